#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "halludet/data.hpp"

namespace halludet {

class InferenceClient;
struct SamplingParams;

enum class InstructionVariant { naive, ours };

std::string_view to_string(InstructionVariant v);
std::optional<InstructionVariant> parse_variant(std::string_view s);

inline constexpr std::string_view kAnswerCue = "Answer using ONLY yes or no:";
inline constexpr std::string_view kCotCue = "Let's think step by step. Reasoning:";

struct Demonstration {
  DataPoint point;
  Label label = Label::NotHallucination;
  std::optional<std::string> rationale;
};

struct PromptConfig {
  InstructionVariant variant = InstructionVariant::ours;
  int shots = 0;
  bool cot = false;
  std::uint64_t seed = 0;

  // Throws ValidationError for negative or odd shot counts.
  void validate() const;
};

struct RenderedPrompt {
  std::string text;
  std::string point_id;
  std::string config_fingerprint;
};

// "yes" means supported, i.e. not a hallucination.
std::string_view answer_word(Label l);

std::string render_instruction(const DataPoint& point, InstructionVariant variant);

// k/2 demonstrations per label, sampled without replacement, interleaved
// Hallucination first. Deterministic in (trial, task, k, seed).
std::vector<Demonstration> sample_demonstrations(const Split& trial, Task task, int k,
                                                 std::uint64_t seed);

using DemoSet = std::map<Task, std::vector<Demonstration>>;

// One sample per task, reused for every datapoint of a run.
DemoSet sample_demo_set(const Split& trial, int k, std::uint64_t seed);

std::string config_fingerprint(const PromptConfig& config, std::span<const Demonstration> demos);

RenderedPrompt assemble_prompt(const DataPoint& point, std::span<const Demonstration> demos,
                               const PromptConfig& config);

// The prompt used to ask a model why a demonstration's known label holds.
std::string rationale_request(const Demonstration& demo, InstructionVariant variant);

// Rationales keyed by (demo id, model id). On disk: {"<demo id>": {"model": ..., "rationale": ...}}
// for a single model, so one cache file serves one rationale model.
class RationaleCache {
 public:
  explicit RationaleCache(std::string model_id) : model_id_(std::move(model_id)) {}
  RationaleCache(RationaleCache&& other) noexcept : model_id_(std::move(other.model_id_)) {
    std::lock_guard lock(other.mu_);
    entries_ = std::move(other.entries_);
  }

  const std::string& model_id() const { return model_id_; }
  std::optional<std::string> get(const std::string& demo_id) const;
  void put(const std::string& demo_id, std::string rationale);
  std::size_t size() const;

  static RationaleCache load(const std::filesystem::path& path, std::string model_id);
  void save(const std::filesystem::path& path) const;
  std::string to_json_text() const;

 private:
  std::string model_id_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> entries_;
};

SamplingParams default_rationale_params();

// Fills in missing rationales. Demos that already carry one are left alone and
// cost no endpoint call; so do demos found in the cache.
std::vector<Demonstration> generate_rationales(std::vector<Demonstration> demos,
                                               InferenceClient& client, RationaleCache& cache,
                                               InstructionVariant variant,
                                               const SamplingParams& params);

std::vector<Demonstration> generate_rationales(std::vector<Demonstration> demos,
                                               InferenceClient& client, RationaleCache& cache);

}  // namespace halludet
