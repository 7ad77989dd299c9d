#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "halludet/data.hpp"
#include "halludet/inference.hpp"
#include "halludet/mock_backend.hpp"
#include "halludet/safetensors.hpp"

namespace testsupport {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// Oracle-mode mock servers, one per seed, on ephemeral ports.
class MockFleet {
 public:
  MockFleet(const std::vector<std::uint64_t>& seeds, double accuracy);
  std::size_t size() const { return servers_.size(); }
  halludet::MockServer& server(std::size_t i) { return *servers_.at(i); }
  std::string url(std::size_t i) const { return servers_.at(i)->base_url(); }
  std::size_t total_requests() const;

 private:
  std::vector<std::unique_ptr<halludet::MockServer>> servers_;
};

halludet::ModelEndpoint endpoint(const std::string& model, const std::string& url, int retries = 0);

halludet::DataPoint point(const std::string& id, halludet::Task task, std::optional<halludet::Label> label,
                          std::string src = "source text", std::string tgt = "target text",
                          std::string hyp = "hypothesis text");

// ---------------------------------------------------------------------------
// Independent scalar oracles.
// ---------------------------------------------------------------------------

// Rank of each value: (#smaller) + (#equal + 1) / 2, by pairwise counting.
std::vector<double> rank_oracle(const std::vector<double>& v);
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y);
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y);

std::vector<double> linear_oracle(const std::vector<std::vector<double>>& xs, const std::vector<double>& w);
std::vector<double> slerp_oracle(const std::vector<double>& a, const std::vector<double>& b, double t);
// Trim by full sort of |tau| (ties to the lower index), elect by sum sign,
// disjoint mean over agreeing values.
std::vector<double> ties_oracle(const std::vector<double>& base, const std::vector<std::vector<double>>& xs,
                                double density, double lambda);

// "All present and equal" over a flat list of optional labels.
std::optional<halludet::Label> unanimity_oracle(const std::vector<std::optional<halludet::Label>>& labels);

// Random F32 checkpoint with the given tensor names and shapes.
halludet::TensorCheckpoint random_checkpoint(std::mt19937_64& rng,
                                             const std::map<std::string, std::vector<std::uint64_t>>& schema);
std::map<std::string, std::vector<std::uint64_t>> random_schema(std::mt19937_64& rng, std::size_t max_numel);

std::vector<double> as_doubles(const halludet::Tensor& t);

double max_rel_error(const std::vector<double>& expected, const std::vector<double>& actual);

// Writes a run config for an oracle mock fleet whose models are m0..m{n-1}.
struct PipelineFixture {
  fs::path data_dir;
  fs::path config;
  fs::path run_root;
};
PipelineFixture write_pipeline_fixture(const fs::path& dir, const MockFleet& fleet, std::size_t unlabeled,
                                       std::size_t validation, std::size_t test, std::size_t concurrency);

}  // namespace testsupport
