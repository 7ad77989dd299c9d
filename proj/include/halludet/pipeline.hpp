#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "halludet/config.hpp"

namespace halludet {

inline constexpr std::array<std::string_view, 5> kStages = {
    "baseline", "prompt_sweep", "weak_labels", "vote", "final_eval"};

struct PipelineOptions {
  std::optional<std::size_t> concurrency;  // overrides run.concurrency
  std::function<void(const std::string&)> progress;
};

struct StageOutcome {
  std::string name;
  std::string fingerprint;
  bool resumed = false;
};

struct PipelineResult {
  std::filesystem::path run_dir;
  std::string fingerprint;
  std::vector<StageOutcome> stages;
  std::size_t endpoint_attempts = 0;  // HTTP attempts made by this invocation
};

// Runs the five stages in order under <run_root>/<fingerprint>/. A stage whose
// stage.json carries the expected fingerprint and whose recorded files are all
// present and unchanged is skipped. Errors are rethrown with the stage name
// prepended, keeping their category; artifacts written so far stay on disk.
PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts = {});
PipelineResult run_pipeline(const std::filesystem::path& config_path, const PipelineOptions& opts = {});

}  // namespace halludet
