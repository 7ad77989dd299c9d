#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/inference.hpp"
#include "halludet/log.hpp"
#include "halludet/prompt.hpp"
#include "halludet/random.hpp"

namespace halludet {

struct ConsistencyMember {
  std::string model_id;
  std::vector<SamplingParams> param_sets;
};

// Unanimity is required at both levels: across a model's parameter sets and
// across models.
struct ConsistencyConfig {
  std::vector<ConsistencyMember> members;

  void validate() const;
};

// The label every configured parameter set agreed on, if any. A missing or
// undecided prediction for any configured set blocks agreement.
std::optional<Label> param_consistent_label(std::span<const Prediction> preds,
                                            std::span<const std::string> param_ids);

std::optional<Label> cross_model_label(const std::map<std::string, std::optional<Label>>& per_model);

struct Vote {
  std::string model_id;
  std::string params_id;
  double p_halluc = 0.5;

  bool operator==(const Vote&) const = default;
};

struct WeakEntry {
  DataPoint point;
  Label label = Label::NotHallucination;
  std::vector<Vote> provenance;

  bool operator==(const WeakEntry&) const = default;
};

struct WeakLabeledSet {
  std::vector<WeakEntry> entries;
};

// Downsamples the majority class to the minority count, uniformly without
// replacement; survivors keep their relative order.
template <typename Entry, typename LabelOf>
std::vector<Entry> balance(std::vector<Entry> entries, std::uint64_t seed, LabelOf label_of) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    (label_of(entries[i]) == Label::Hallucination ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) {
    if (!entries.empty()) log::warn("balance: one class is empty, result is empty");
    return {};
  }
  if (pos.size() == neg.size()) return entries;

  auto& major = pos.size() > neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  SeededRng rng(seed);
  auto picked = sample_without_replacement(major.size(), keep, rng);
  std::vector<char> keep_flag(entries.size(), 1);
  for (auto i : major) keep_flag[i] = 0;
  for (auto j : picked) keep_flag[major[j]] = 1;

  std::vector<Entry> out;
  out.reserve(2 * keep);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (keep_flag[i]) out.push_back(std::move(entries[i]));
  }
  return out;
}

std::vector<WeakEntry> balance(std::vector<WeakEntry> entries, std::uint64_t seed);

// predictions[model_id][params_id] is aligned with `points`. Pure reducer:
// keeps points on which every configured (model, params) pair agrees.
std::vector<WeakEntry> consolidate(
    std::span<const DataPoint> points,
    const std::map<std::string, std::map<std::string, std::vector<Prediction>>>& predictions,
    const ConsistencyConfig& cfg);

struct WeakLabelStats {
  std::size_t points = 0;
  std::size_t kept_before_balance = 0;
  std::size_t kept_after_balance = 0;
};

struct WeakLabelRun {
  WeakLabeledSet set;
  WeakLabelStats stats;
  // Raw predictions per (model, params), aligned with the input split.
  std::map<std::string, std::map<std::string, std::vector<Prediction>>> predictions;
};

// Clients are looked up by model id.
WeakLabelRun generate_weak_labels(const Split& unlabeled, const ConsistencyConfig& cfg,
                                  const DemoSet& demos, const PromptConfig& prompt,
                                  const std::map<std::string, InferenceClient*>& clients,
                                  std::uint64_t balance_seed, std::size_t concurrency = 8);

nlohmann::ordered_json to_json(const WeakEntry& e);
WeakEntry weak_entry_from_json(const nlohmann::json& j, std::size_t line);
std::string weak_set_to_jsonl(const WeakLabeledSet& set);
WeakLabeledSet parse_weak_set_jsonl(std::string_view text);
void write_weak_set(const WeakLabeledSet& set, const std::filesystem::path& path);
WeakLabeledSet read_weak_set(const std::filesystem::path& path);

// {instruction, input, output} per entry. instruction is the rendered
// zero-shot prompt, input is empty, output is "yes" / "no".
std::string sft_record(const WeakEntry& e, InstructionVariant variant);
void export_sft(const WeakLabeledSet& set, InstructionVariant variant,
                const std::filesystem::path& path);

}  // namespace halludet
