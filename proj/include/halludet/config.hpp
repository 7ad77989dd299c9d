#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/inference.hpp"
#include "halludet/prompt.hpp"
#include "halludet/vote.hpp"
#include "halludet/weak_label.hpp"

namespace halludet {

struct PromptCandidate {
  InstructionVariant variant = InstructionVariant::ours;
  int shots = 0;
  bool cot = false;

  std::string name() const;  // e.g. "ours_k4_cot"
  bool operator==(const PromptCandidate&) const = default;
};

struct RunPaths {
  std::filesystem::path trial;
  std::filesystem::path unlabeled;
  std::filesystem::path validation;
  std::optional<std::filesystem::path> test;
  std::filesystem::path run_root = "runs";
  ParseOptions parse;
};

struct RunConfig {
  std::vector<ModelEndpoint> endpoints;
  std::vector<SamplingParams> param_sets;

  PromptCandidate prompt;  // used when no sweep is configured
  std::map<std::string, std::uint64_t> seeds;

  std::vector<std::string> baseline_models;
  std::string baseline_params;

  std::optional<std::string> sweep_model;  // default: best baseline model
  std::string sweep_params;
  std::optional<std::string> cot_params;
  std::optional<std::string> rationale_model;
  std::vector<PromptCandidate> sweep;  // evaluation order; first wins ties

  ConsistencyConfig consistency;

  std::vector<std::string> vote_models;
  std::string vote_params;
  WeightSearchConfig vote;

  RunPaths paths;
  std::size_t concurrency = 8;
  nlohmann::ordered_json training = nlohmann::ordered_json::object();  // recorded, never executed

  const ModelEndpoint& endpoint(const std::string& model_id) const;
  const SamplingParams& params(const std::string& id) const;
  std::uint64_t seed(const std::string& name) const;

  // Cross-reference checks; runs before any network activity.
  void validate() const;

  // Hash of everything that can change an artifact: semantic settings and the
  // contents of the input files. Endpoint URLs, credentials, timeouts, retry
  // policy and concurrency are excluded.
  std::string fingerprint() const;
  nlohmann::ordered_json semantic_json() const;
};

RunConfig parse_run_config(std::string_view toml_text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace halludet
