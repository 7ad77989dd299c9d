#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <httplib.h>

#include "halludet/inference.hpp"
#include "halludet/mock_backend.hpp"
#include "halludet/prompt.hpp"
#include "support.hpp"

using namespace halludet;
using nlohmann::json;

namespace {

json request_for(const std::string& prompt, double temperature = 0.0, bool logprobs = false) {
  SamplingParams p;
  p.temperature = temperature;
  p.logprob_mode = logprobs;
  return build_chat_request(prompt, "m", p, 1);
}

std::string planted_prompt(int i, Label l) {
  return "Context: c" + std::to_string(i) + "\nSentence: s" + std::to_string(i) + " " +
         std::string(planted_marker(l)) + "\nIs the Sentence supported by the Context above? " +
         std::string(kAnswerCue);
}

Label truth(int i) { return i % 3 == 0 ? Label::Hallucination : Label::NotHallucination; }

std::vector<bool> correctness(const MockRule& rule, int n) {
  std::vector<bool> out;
  for (int i = 0; i < n; ++i) {
    auto [status, body] = mock_respond(rule, request_for(planted_prompt(i, truth(i))));
    EXPECT_EQ(status, 200);
    out.push_back(parse_answer(body["choices"][0]["message"]["content"].get<std::string>(), false) == truth(i));
  }
  return out;
}

}  // namespace

TEST(Markers, LastMarkerWins) {
  const std::string h(kPlantedHallucination), n(kPlantedNotHallucination);
  EXPECT_EQ(find_planted_label("demo " + h + " target " + n), Label::NotHallucination);
  EXPECT_EQ(find_planted_label("demo " + n + " target " + h), Label::Hallucination);
  EXPECT_EQ(find_planted_label("nothing"), std::nullopt);
  EXPECT_EQ(strip_planted_markers("a " + h + " b " + n), "a  b ");
}

TEST(MockRespond, FixtureLookup) {
  MockRule rule;
  rule.mode = MockRule::Mode::fixture;
  rule.fixtures[prompt_hash("p1")] = {"no", {}, {}};
  auto [status, body] = mock_respond(rule, request_for("p1"));
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["choices"][0]["message"]["content"], "no");
  auto [miss, err] = mock_respond(rule, request_for("p2"));
  EXPECT_EQ(miss, 404);
  EXPECT_EQ(err["error"]["type"], "fixture_miss");
}

TEST(MockRespond, FixtureFile) {
  testsupport::TempDir dir;
  const auto h = prompt_hash("p1");
  std::ofstream(dir / "f.json") << "{\"" << h << "\": {\"text\": \"yes\", \"lp_yes\": -0.1, \"lp_no\": -2.5}}";
  auto fixtures = load_fixtures(dir / "f.json");
  ASSERT_EQ(fixtures.count(h), 1u);
  EXPECT_EQ(fixtures[h].text, "yes");
  EXPECT_EQ(fixtures[h].lp_no, -2.5);
}

TEST(MockRespond, OracleWithoutMarker) {
  MockRule rule;
  auto [status, body] = mock_respond(rule, request_for("no marker here"));
  EXPECT_EQ(status, 422);
}

TEST(MockRespond, PerfectOracle) {
  MockRule rule;
  rule.oracle_accuracy = 1.0;
  for (bool ok : correctness(rule, 300)) EXPECT_TRUE(ok);
}

TEST(MockRespond, ZeroAccuracyOracle) {
  MockRule rule;
  rule.oracle_accuracy = 0.0;
  for (bool ok : correctness(rule, 100)) EXPECT_FALSE(ok);
}

TEST(MockRespond, ObservedAccuracyNearTarget) {
  for (std::uint64_t seed : {1, 2, 3}) {
    MockRule rule;
    rule.oracle_accuracy = 0.8;
    rule.oracle_seed = seed;
    auto c = correctness(rule, 1000);
    const double acc = static_cast<double>(std::count(c.begin(), c.end(), true)) / 1000.0;
    EXPECT_NEAR(acc, 0.8, 0.04) << "seed " << seed;
  }
}

TEST(MockRespond, SeedsGiveIndependentErrors) {
  MockRule a, b;
  a.oracle_accuracy = b.oracle_accuracy = 0.8;
  a.oracle_seed = 7;
  b.oracle_seed = 8;
  auto ca = correctness(a, 1000), cb = correctness(b, 1000);
  std::vector<double> ea, eb;
  for (int i = 0; i < 1000; ++i) {
    ea.push_back(ca[i] ? 0.0 : 1.0);
    eb.push_back(cb[i] ? 0.0 : 1.0);
  }
  EXPECT_NEAR(testsupport::pearson_oracle(ea, eb), 0.0, 0.1);
}

TEST(MockRespond, TemperatureDrawsDifferFromGreedy) {
  MockRule rule;
  rule.oracle_accuracy = 0.5;
  int differ = 0;
  for (int i = 0; i < 200; ++i) {
    auto p = planted_prompt(i, truth(i));
    auto greedy = mock_respond(rule, request_for(p, 0.0)).second["choices"][0]["message"]["content"];
    auto warm = mock_respond(rule, request_for(p, 0.7)).second["choices"][0]["message"]["content"];
    auto greedy2 = mock_respond(rule, request_for(p, 0.0)).second["choices"][0]["message"]["content"];
    EXPECT_EQ(greedy, greedy2);
    differ += greedy != warm;
  }
  EXPECT_GT(differ, 50);
  EXPECT_LT(differ, 150);
}

TEST(MockRespond, LogprobAlternatives) {
  MockRule rule;
  auto [status, body] = mock_respond(rule, request_for(planted_prompt(0, Label::Hallucination), 0.0, true));
  ASSERT_EQ(status, 200);
  auto raw = parse_chat_response(body.dump());
  auto lp = answer_logprobs(raw.choices[0].first_token_alternatives);
  ASSERT_TRUE(lp.lp_yes && lp.lp_no);
  EXPECT_GT(*lp.lp_no, *lp.lp_yes);
  EXPECT_NEAR(std::exp(*lp.lp_yes) + std::exp(*lp.lp_no), 1.0, 1e-12);
}

TEST(MockRespond, ChainOfThoughtAnswerParsable) {
  MockRule rule;
  auto prompt = planted_prompt(0, Label::NotHallucination) + "\n" + std::string(kCotCue);
  auto [status, body] = mock_respond(rule, request_for(prompt));
  ASSERT_EQ(status, 200);
  EXPECT_EQ(parse_answer(body["choices"][0]["message"]["content"].get<std::string>(), true), Label::NotHallucination);
}

TEST(MockServer, IdenticalAcrossRestarts) {
  MockRule rule;
  rule.oracle_accuracy = 0.6;
  rule.oracle_seed = 4;
  std::vector<std::string> bodies[2];
  for (int run = 0; run < 2; ++run) {
    MockServer server(rule);
    server.start();
    httplib::Client cli("127.0.0.1", server.port());
    for (int i = 0; i < 20; ++i) {
      auto res = cli.Post("/v1/chat/completions", request_for(planted_prompt(i, truth(i)), 0.5, true).dump(),
                          "application/json");
      ASSERT_TRUE(res);
      bodies[run].push_back(res->body);
    }
  }
  EXPECT_EQ(bodies[0], bodies[1]);
}

TEST(MockServer, ConcurrentRequests) {
  MockRule rule;
  MockServer server(rule);
  server.start();
  InferenceClient client(testsupport::endpoint("m", server.base_url()), 16);
  std::vector<std::string> out(64);
  parallel_for(out.size(), 16, [&](std::size_t i) {
    out[i] = client.complete(planted_prompt(static_cast<int>(i), truth(static_cast<int>(i))), SamplingParams{})
                 .choices[0]
                 .text;
  });
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i], answer_word(truth(static_cast<int>(i))));
  }
  EXPECT_EQ(server.request_count(), 64u);
}
