#include <gtest/gtest.h>

#include <fstream>

#include "halludet/config.hpp"
#include "halludet/error.hpp"
#include "halludet/pipeline.hpp"
#include "halludet/synthetic.hpp"
#include "support.hpp"

using namespace halludet;

namespace {

class ConfigTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticOptions opts;
    opts.trial = 12;
    opts.unlabeled = 10;
    opts.validation = 9;
    write_synthetic(make_synthetic(opts), dir_ / "data");
  }

  std::string base_toml(const std::string& extra = {}) const {
    return R"(
[paths]
trial = "data/trial.json"
unlabeled = "data/unlabeled.json"
validation = "data/validation.json"

[seeds]
demos = 1
balance = 2

[[endpoints]]
model_id = "a"
base_url = "http://127.0.0.1:1/v1"

[[endpoints]]
model_id = "b"
base_url = "http://127.0.0.1:2/v1"
auth_token_env = "SOME_TOKEN"
timeout_ms = 500
max_retries = 4

[[param_sets]]
id = "greedy"
temperature = 0.0

[[param_sets]]
id = "warm"
temperature = 0.8
top_p = 0.95
n_samples = 5
)" + extra;
  }

  RunConfig parse(const std::string& text) const { return parse_run_config(text, dir_.path()); }

  testsupport::TempDir dir_;
};

}  // namespace

TEST_F(ConfigTest, DefaultsAndPaths) {
  auto cfg = parse(base_toml());
  EXPECT_EQ(cfg.paths.trial, dir_ / "data/trial.json");
  EXPECT_EQ(cfg.paths.run_root, dir_ / "runs");
  EXPECT_EQ(cfg.baseline_models, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(cfg.baseline_params, "greedy");
  EXPECT_EQ(cfg.vote_models, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(cfg.consistency.members.size(), 2u);
  EXPECT_EQ(cfg.consistency.members[0].param_sets.size(), 1u);
  ASSERT_EQ(cfg.sweep.size(), 1u);
  EXPECT_EQ(cfg.sweep[0], PromptCandidate{});
  EXPECT_EQ(cfg.concurrency, 8u);
  EXPECT_EQ(cfg.endpoint("b").max_retries, 4);
  EXPECT_EQ(cfg.endpoint("b").request_timeout.count(), 500);
  EXPECT_EQ(cfg.params("warm").n_samples, 5);
  EXPECT_EQ(cfg.seed("balance"), 2u);
  EXPECT_THROW(cfg.seed("nope"), ValidationError);
}

TEST_F(ConfigTest, SweepCrossProduct) {
  auto cfg = parse(base_toml(R"(
[sweep]
params = "greedy"
cot_params = "warm"
variants = ["naive", "ours"]
shots = [0, 2]
cot = [false, true]
)"));
  std::vector<std::string> names;
  for (const auto& c : cfg.sweep) names.push_back(c.name());
  EXPECT_EQ(names, (std::vector<std::string>{"naive_k0", "naive_k2", "ours_k0", "ours_k2", "naive_k2_cot",
                                             "ours_k2_cot"}));
}

TEST_F(ConfigTest, TrainingTableIsRecorded) {
  auto cfg = parse(base_toml("[training]\nmethod = \"lora\"\nrank = 16\nlr = 2e-5\n"));
  EXPECT_EQ(cfg.training.dump(), R"({"lr":2e-05,"method":"lora","rank":16})");
}

TEST_F(ConfigTest, RejectsBadReferences) {
  EXPECT_THROW(parse(base_toml("[baseline]\nmodels = [\"ghost\"]\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[vote]\nparams = \"ghost\"\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[consistency]\nparams = [\"ghost\"]\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[consistency]\nmodels = [\"ghost\"]\nparams = [\"greedy\"]\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[sweep]\nmodel = \"ghost\"\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[vote]\nstep = 0.3\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[run]\nconcurrency = 0\n")), ValidationError);
  EXPECT_THROW(parse(base_toml("[prompt]\nvariant = \"fancy\"\n")), ValidationError);
}

TEST_F(ConfigTest, RejectsStructuralProblems) {
  EXPECT_THROW(parse("not = [toml"), ValidationError);
  EXPECT_THROW(parse(base_toml("[[endpoints]]\nmodel_id = \"a\"\nbase_url = \"http://x/v1\"\n")), ValidationError);
  auto no_seeds = base_toml();
  no_seeds.replace(no_seeds.find("[seeds]"), 7, "[other]");
  EXPECT_THROW(parse(no_seeds), ValidationError);
  auto no_paths = base_toml();
  no_paths.replace(no_paths.find("[paths]"), 7, "[other_paths]");
  EXPECT_THROW(parse(no_paths), ValidationError);
}

TEST_F(ConfigTest, CotSweepNeedsTextParams) {
  const std::string logprob = "\n[[param_sets]]\nid = \"lp\"\nlogprob_mode = true\n";
  EXPECT_THROW(parse(base_toml(logprob + "[sweep]\nparams = \"lp\"\nshots = [2]\ncot = [true]\n")), ValidationError);
  EXPECT_THROW(parse(base_toml(logprob + "[sweep]\nshots = [2]\ncot = [true]\ncot_params = \"lp\"\n")),
               ValidationError);
  EXPECT_THROW(parse(base_toml(logprob + "[sweep]\nshots = [2]\ncot = [true]\ncot_params = \"warm\"\n"
                                         "[vote]\nparams = \"lp\"\n")),
               ValidationError);
  EXPECT_NO_THROW(parse(base_toml(logprob + "[sweep]\nshots = [2]\ncot = [true]\ncot_params = \"warm\"\n")));
}

TEST_F(ConfigTest, FingerprintIgnoresOperationalSettings) {
  const auto fp = parse(base_toml()).fingerprint();
  EXPECT_EQ(fp.size(), 16u);

  auto operational = base_toml("[run]\nconcurrency = 3\n");
  operational.replace(operational.find("127.0.0.1:1"), 11, "10.0.0.9:80");
  operational.replace(operational.find("max_retries = 4"), 15, "max_retries = 0");
  operational.replace(operational.find("timeout_ms = 500"), 16, "timeout_ms = 9");
  EXPECT_EQ(parse(operational).fingerprint(), fp);

  EXPECT_NE(parse(base_toml("[vote]\nstep = 0.5\n")).fingerprint(), fp);
  auto temp = base_toml();
  temp.replace(temp.find("temperature = 0.8"), 17, "temperature = 0.9");
  EXPECT_NE(parse(temp).fingerprint(), fp);
  auto seed = base_toml();
  seed.replace(seed.find("demos = 1"), 9, "demos = 7");
  EXPECT_NE(parse(seed).fingerprint(), fp);

  // Input contents are part of the fingerprint.
  std::ofstream(dir_ / "data/validation.json", std::ios::app) << "\n";
  EXPECT_NE(parse(base_toml()).fingerprint(), fp);
}

TEST_F(ConfigTest, UnknownModelFailsBeforeAnyRequest) {
  testsupport::MockFleet fleet({1}, 1.0);
  std::string text = base_toml("[vote]\nmodels = [\"a\", \"typo\"]\n");
  text.replace(text.find("http://127.0.0.1:1/v1"), 21, fleet.url(0));
  std::ofstream(dir_ / "run.toml") << text;
  try {
    run_pipeline(dir_ / "run.toml");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("typo"), std::string::npos);
  }
  EXPECT_EQ(fleet.total_requests(), 0u);
  EXPECT_FALSE(std::filesystem::exists(dir_ / "runs"));
}
