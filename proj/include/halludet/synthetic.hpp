#pragma once

#include <cstdint>
#include <filesystem>

#include "halludet/data.hpp"

namespace halludet {

// Generator for planted-label splits. Each hyp ends with the marker of its
// true label, which the oracle mock backend reads back.
struct SyntheticOptions {
  std::size_t trial = 80;
  std::size_t unlabeled = 1000;
  std::size_t validation = 200;
  std::size_t test = 0;
  Track track = Track::agnostic;
  std::uint64_t seed = 0;
  double hallucination_rate = 0.5;

  void validate() const;
};

struct SyntheticSplits {
  Split trial;
  Split unlabeled;
  Split validation;
  Split test;
};

// Tasks rotate DM, MT, PG so every task is present in every non-empty split.
// The trial split alternates labels within each task so k-shot sampling has
// enough of both classes.
SyntheticSplits make_synthetic(const SyntheticOptions& opts);

// trial.json, unlabeled.json, validation.json and, if non-empty, test.json.
void write_synthetic(const SyntheticSplits& splits, const std::filesystem::path& dir);

}  // namespace halludet
