#include "halludet/synthetic.hpp"

#include <array>
#include <iterator>

#include "halludet/error.hpp"
#include "halludet/hash.hpp"
#include "halludet/mock_backend.hpp"
#include "halludet/random.hpp"

namespace halludet {

namespace {

constexpr std::array<std::string_view, 12> kWords = {
    "river", "lantern", "orchard", "copper", "meadow", "harbor",
    "signal", "granite", "thistle", "compass", "ember", "willow"};

std::string phrase(SeededRng& rng, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += kWords[rng.below(kWords.size())];
  }
  return s;
}

DataPoint make_point(const std::string& id, Task task, Track track, Label label, SeededRng& rng) {
  DataPoint p;
  p.id = id;
  p.task = task;
  p.track = track;
  p.src = "The " + phrase(rng, 3) + " near the " + phrase(rng, 2) + ".";
  p.tgt = task == Task::PG ? std::string() : phrase(rng, 4);
  p.hyp = phrase(rng, 5) + " " + std::string(planted_marker(label));
  if (track == Track::aware) p.producer_model = "synthetic-generator";
  static constexpr std::array<double, 3> kH = {0.6, 0.8, 1.0};
  static constexpr std::array<double, 3> kN = {0.0, 0.2, 0.4};
  p.gold_label = label;
  p.gold_p = label == Label::Hallucination ? kH[rng.below(3)] : kN[rng.below(3)];
  return p;
}

Split make_split(SplitKind kind, const std::string& prefix, std::size_t n,
                 const SyntheticOptions& opts, SeededRng& rng, bool alternate) {
  Split s;
  s.kind = kind;
  for (std::size_t i = 0; i < n; ++i) {
    Task task = kAllTasks[i % std::size(kAllTasks)];
    Label label;
    if (alternate) {
      label = (i / std::size(kAllTasks)) % 2 == 0 ? Label::Hallucination : Label::NotHallucination;
    } else {
      label = unit_interval(rng.next()) < opts.hallucination_rate ? Label::Hallucination
                                                                  : Label::NotHallucination;
    }
    auto p = make_point(prefix + "-" + std::to_string(i), task, opts.track, label, rng);
    if (kind == SplitKind::unlabeled_train) {
      p.gold_label.reset();
      p.gold_p.reset();
    }
    s.points.push_back(std::move(p));
  }
  return s;
}

}  // namespace

void SyntheticOptions::validate() const {
  if (hallucination_rate < 0.0 || hallucination_rate > 1.0) {
    throw ValidationError("hallucination_rate must be in [0, 1]");
  }
}

SyntheticSplits make_synthetic(const SyntheticOptions& opts) {
  opts.validate();
  SeededRng rng(opts.seed);
  SyntheticSplits out;
  out.trial = make_split(SplitKind::trial, "trial", opts.trial, opts, rng, true);
  out.unlabeled = make_split(SplitKind::unlabeled_train, "train", opts.unlabeled, opts, rng, false);
  out.validation = make_split(SplitKind::validation, "val", opts.validation, opts, rng, false);
  out.test = make_split(SplitKind::test, "test", opts.test, opts, rng, false);
  return out;
}

void write_synthetic(const SyntheticSplits& splits, const std::filesystem::path& dir) {
  write_dataset(splits.trial, dir / "trial.json");
  write_dataset(splits.unlabeled, dir / "unlabeled.json");
  write_dataset(splits.validation, dir / "validation.json");
  if (!splits.test.points.empty()) write_dataset(splits.test, dir / "test.json");
}

}  // namespace halludet
