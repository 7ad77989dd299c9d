#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <random>

#include <httplib.h>

#include "halludet/error.hpp"
#include "halludet/inference.hpp"
#include "halludet/mock_backend.hpp"
#include "halludet/prompt.hpp"
#include "support.hpp"

using namespace halludet;
using testsupport::point;

namespace {

SamplingParams logprob_params() {
  SamplingParams p;
  p.id = "lp";
  p.logprob_mode = true;
  return p;
}

std::vector<DataPoint> planted_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<DataPoint> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Label l = rng() % 2 ? Label::Hallucination : Label::NotHallucination;
    out.push_back(point("p" + std::to_string(i), kAllTasks[i % 3], std::nullopt, "src " + std::to_string(i),
                        "tgt", "hyp " + std::to_string(rng() % 1000) + " " + std::string(planted_marker(l))));
  }
  return out;
}

}  // namespace

TEST(ParseAnswer, Basics) {
  EXPECT_EQ(parse_answer("Yes", false), Label::NotHallucination);
  EXPECT_EQ(parse_answer("  no.", false), Label::Hallucination);
  EXPECT_EQ(parse_answer("NO", false), Label::Hallucination);
  EXPECT_EQ(parse_answer("\"yes\", because", false), Label::NotHallucination);
  EXPECT_EQ(parse_answer("The source says so.\nAnswer: yes", true), Label::NotHallucination);
  EXPECT_EQ(parse_answer("Answer: no, wait. Answer: YES!", true), Label::NotHallucination);
  EXPECT_THROW(parse_answer("maybe", false), UnparseableAnswer);
  EXPECT_THROW(parse_answer("nothing to see", false), UnparseableAnswer);
  EXPECT_THROW(parse_answer("yesterday", false), UnparseableAnswer);
  EXPECT_THROW(parse_answer("yes", true), UnparseableAnswer);
  EXPECT_THROW(parse_answer("", false), UnparseableAnswer);
}

TEST(Logprobs, SoftmaxClosedForm) {
  EXPECT_DOUBLE_EQ(p_halluc_from_logprobs(-1.0, -1.0), 0.5);
  EXPECT_NEAR(p_halluc_from_logprobs(std::log(0.9), std::log(0.1)), 0.1, 1e-12);
  EXPECT_EQ(p_halluc_from_logprobs(std::nullopt, -3.0), 1.0);
  EXPECT_EQ(p_halluc_from_logprobs(-3.0, std::nullopt), 0.0);
  EXPECT_THROW(p_halluc_from_logprobs(std::nullopt, std::nullopt), ProbabilityUnavailable);
  // Large gaps stay finite.
  EXPECT_NEAR(p_halluc_from_logprobs(0.0, -2000.0), 0.0, 1e-300);
  EXPECT_NEAR(p_halluc_from_logprobs(-2000.0, 0.0), 1.0, 1e-15);
}

TEST(Logprobs, SwapSymmetry) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-20, 0);
  for (int i = 0; i < 1000; ++i) {
    double a = u(rng), b = u(rng);
    double p = p_halluc_from_logprobs(a, b);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    EXPECT_NEAR(p_halluc_from_logprobs(b, a), 1.0 - p, 1e-15);
  }
}

TEST(Logprobs, VariantsTakeMaximum) {
  std::vector<TokenAlternative> alts = {{"Yes", -2.0}, {" yes", -0.5}, {"no.", -1.5}, {"\xE2\x96\x81No", -0.7},
                                        {"maybe", -0.1}};
  auto lp = answer_logprobs(alts);
  EXPECT_EQ(lp.lp_yes, -0.5);
  EXPECT_EQ(lp.lp_no, -0.7);
  EXPECT_TRUE(answer_logprobs(std::vector<TokenAlternative>{{"hmm", -1}}).lp_yes == std::nullopt);
}

TEST(Prediction, SamplingCounts) {
  SamplingParams p;
  p.n_samples = 10;
  std::vector<Choice> choices;
  for (int i = 0; i < 3; ++i) choices.push_back({"no", {}});
  for (int i = 0; i < 7; ++i) choices.push_back({"yes", {}});
  auto pred = prediction_from_choices(choices, p, false, "x", "m");
  EXPECT_DOUBLE_EQ(pred.p_halluc, 0.3);
  EXPECT_EQ(pred.label, Label::NotHallucination);
}

TEST(Prediction, UnparsableSamplesExcluded) {
  SamplingParams p;
  p.n_samples = 4;
  std::vector<Choice> choices = {{"no", {}}, {"???", {}}, {"no", {}}, {"yes", {}}};
  auto pred = prediction_from_choices(choices, p, false, "x", "m");
  EXPECT_NEAR(pred.p_halluc, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(pred.label, Label::Hallucination);
  std::vector<Choice> none = {{"???", {}}, {"hmm", {}}};
  EXPECT_THROW(prediction_from_choices(none, p, false, "x", "m"), UndecidedError);
}

TEST(Prediction, TieFollowsText) {
  auto p = logprob_params();
  std::vector<Choice> c = {{"no", {{"yes", -0.7}, {"no", -0.7}}}};
  auto pred = prediction_from_choices(c, p, false, "x", "m");
  EXPECT_EQ(pred.p_halluc, 0.5);
  EXPECT_EQ(pred.label, Label::Hallucination);
  c[0].text = "yes";
  EXPECT_EQ(prediction_from_choices(c, p, false, "x", "m").label, Label::NotHallucination);
}

TEST(Prediction, LabelMatchesProbability) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-10, 0);
  auto p = logprob_params();
  for (int i = 0; i < 500; ++i) {
    std::vector<Choice> c = {{"yes", {{"yes", u(rng)}, {"no", u(rng)}}}};
    auto pred = prediction_from_choices(c, p, false, "x", "m");
    if (pred.p_halluc != 0.5) EXPECT_EQ(pred.label == Label::Hallucination, pred.p_halluc > 0.5);
  }
}

TEST(Prediction, MissingAlternatives) {
  auto p = logprob_params();
  std::vector<Choice> c = {{"yes", {{"maybe", -0.1}}}};
  EXPECT_THROW(prediction_from_choices(c, p, false, "x", "m"), ProbabilityUnavailable);
}

TEST(Prediction, JsonlRoundTrip) {
  std::vector<Prediction> preds(3);
  preds[0] = {"a", "m", "p", Label::Hallucination, 0.75, "no", ""};
  preds[1] = {"b", "m", "p", Label::NotHallucination, 0.1, "yes\nmore", ""};
  preds[2] = undecided_prediction("c", "m", "p", "boom");
  auto text = predictions_to_jsonl(preds);
  EXPECT_EQ(text.substr(0, text.find('\n')),
            R"({"point_id":"a","model_id":"m","params_id":"p","label":"Hallucination","p_halluc":0.75,"raw_completion":"no"})");
  EXPECT_EQ(parse_predictions_jsonl(text), preds);
}

TEST(Request, Body) {
  auto p = logprob_params();
  p.temperature = 0.3;
  p.top_p = 0.9;
  p.max_tokens = 7;
  auto body = build_chat_request("hello", "m1", p, 1);
  EXPECT_EQ(body["model"], "m1");
  EXPECT_EQ(body["messages"][0]["role"], "user");
  EXPECT_EQ(body["messages"][0]["content"], "hello");
  EXPECT_EQ(body["temperature"], 0.3);
  EXPECT_EQ(body["top_p"], 0.9);
  EXPECT_EQ(body["max_tokens"], 7);
  EXPECT_EQ(body["n"], 1);
  EXPECT_EQ(body["logprobs"], true);
  EXPECT_EQ(body["top_logprobs"], 5);
  p.logprob_mode = false;
  EXPECT_FALSE(build_chat_request("hello", "m1", p, 1).contains("logprobs"));
}

TEST(Request, ParamValidation) {
  SamplingParams p = logprob_params();
  p.n_samples = 2;
  EXPECT_THROW(p.validate(), ValidationError);
  p = SamplingParams{};
  p.top_p = 0;
  EXPECT_THROW(p.validate(), ValidationError);
  p = SamplingParams{};
  p.temperature = -1;
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(Response, MissingTextIsProtocolError) {
  EXPECT_THROW(parse_chat_response(R"({"choices":[{"message":{"role":"assistant"}}]})"), ProtocolError);
  EXPECT_THROW(parse_chat_response("not json"), ProtocolError);
  EXPECT_THROW(parse_chat_response(R"({"choices":[]})"), ProtocolError);
}

TEST(Client, FixtureAnswer) {
  MockRule rule;
  rule.mode = MockRule::Mode::fixture;
  rule.fixtures[prompt_hash("p1")] = {"no", std::log(0.1), std::log(0.9)};
  MockServer server(rule);
  server.start();
  InferenceClient client(testsupport::endpoint("m", server.base_url()));
  auto r = client.complete("p1", SamplingParams{});
  ASSERT_EQ(r.choices.size(), 1u);
  EXPECT_EQ(r.choices[0].text, "no");

  auto lr = client.complete("p1", logprob_params());
  auto lp = answer_logprobs(lr.choices[0].first_token_alternatives);
  EXPECT_EQ(lp.lp_yes, std::log(0.1));
  EXPECT_EQ(lp.lp_no, std::log(0.9));
}

TEST(Client, LogprobFixtureProbability) {
  MockRule rule;
  rule.mode = MockRule::Mode::fixture;
  rule.fixtures[prompt_hash("q")] = {"yes", std::log(0.9), std::log(0.1)};
  MockServer server(rule);
  server.start();
  InferenceClient client(testsupport::endpoint("m", server.base_url()));
  auto pred = estimate_probability(RenderedPrompt{"q", "id", ""}, client, logprob_params(), false);
  EXPECT_NEAR(pred.p_halluc, 0.1, 1e-12);
  EXPECT_EQ(pred.label, Label::NotHallucination);
}

TEST(Client, TimeoutsRetriedThenFail) {
  MockRule rule;
  MockServer server(rule, std::chrono::milliseconds(400));
  server.start();
  auto ep = testsupport::endpoint("m", server.base_url(), 2);
  ep.request_timeout = std::chrono::milliseconds(100);
  InferenceClient client(ep);
  EXPECT_THROW(client.complete("x " + std::string(planted_marker(Label::Hallucination)), SamplingParams{}),
               EndpointError);
  EXPECT_EQ(client.attempts(), 3u);
  EXPECT_EQ(server.request_count(), 3u);
}

TEST(Client, ServerErrorsRetriedClientErrorsNot) {
  httplib::Server srv;
  std::atomic<int> hits{0};
  std::atomic<int> status{503};
  srv.Post(R"(.*/chat/completions)", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = status;
    res.set_content("{}", "application/json");
  });
  int port = srv.bind_to_any_port("127.0.0.1");
  std::thread t([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  auto ep = testsupport::endpoint("m", "http://127.0.0.1:" + std::to_string(port) + "/v1", 3);
  {
    InferenceClient client(ep);
    try {
      client.complete("x", SamplingParams{});
      FAIL();
    } catch (const EndpointError& e) {
      EXPECT_EQ(e.http_status(), 503);
    }
    EXPECT_EQ(hits.load(), 4);
  }
  hits = 0;
  status = 400;
  {
    InferenceClient client(ep);
    EXPECT_THROW(client.complete("x", SamplingParams{}), EndpointError);
    EXPECT_EQ(hits.load(), 1);
  }
  srv.stop();
  t.join();
}

TEST(Client, BearerTokenFromEnvironment) {
  httplib::Server srv;
  std::string seen;
  srv.Post(R"(.*/chat/completions)", [&](const httplib::Request& req, httplib::Response& res) {
    seen = req.get_header_value("Authorization");
    res.set_content(R"({"choices":[{"message":{"content":"yes"}}]})", "application/json");
  });
  int port = srv.bind_to_any_port("127.0.0.1");
  std::thread t([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  setenv("HALLUDET_TEST_TOKEN", "s3cret", 1);
  auto ep = testsupport::endpoint("m", "http://127.0.0.1:" + std::to_string(port) + "/v1");
  ep.auth_token_env = "HALLUDET_TEST_TOKEN";
  InferenceClient client(ep);
  client.complete("x", SamplingParams{});
  EXPECT_EQ(seen, "Bearer s3cret");
  srv.stop();
  t.join();
}

TEST(Client, UnreachableEndpoint) {
  auto ep = testsupport::endpoint("m", "http://127.0.0.1:1/v1", 1);
  ep.request_timeout = std::chrono::milliseconds(200);
  InferenceClient client(ep);
  EXPECT_THROW(client.complete("x", SamplingParams{}), EndpointError);
  EXPECT_EQ(client.attempts(), 2u);
}

TEST(Batch, OrderPreserved) {
  MockRule rule;
  MockServer server(rule);
  server.start();
  InferenceClient client(testsupport::endpoint("m", server.base_url()), 8);
  auto points = planted_points(5, 1);
  auto preds = predict_batch(points, {}, PromptConfig{InstructionVariant::ours, 0, false, 0}, client,
                             logprob_params(), 4);
  ASSERT_EQ(preds.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(preds[i].point_id, points[i].id);
    EXPECT_EQ(preds[i].label, find_planted_label(points[i].hyp));
  }
}

TEST(Batch, OnePointFailing) {
  auto points = planted_points(5, 2);
  const PromptConfig cfg{InstructionVariant::ours, 0, false, 0};
  MockRule rule;
  rule.mode = MockRule::Mode::fixture;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (i == 2) continue;
    rule.fixtures[prompt_hash(assemble_prompt(points[i], {}, cfg).text)] = {"yes", {}, {}};
  }
  MockServer server(rule);
  server.start();
  InferenceClient client(testsupport::endpoint("m", server.base_url(), 2));
  auto preds = predict_batch(points, {}, cfg, client, SamplingParams{}, 3);
  ASSERT_EQ(preds.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(preds[i].decided(), i != 2) << i;
    EXPECT_EQ(preds[i].point_id, points[i].id);
  }
  EXPECT_EQ(preds[2].p_halluc, 0.5);
  EXPECT_NE(preds[2].error.find("404"), std::string::npos) << preds[2].error;
}

TEST(Batch, EveryPointFailingIsFatal) {
  auto ep = testsupport::endpoint("m", "http://127.0.0.1:1/v1", 0);
  ep.request_timeout = std::chrono::milliseconds(200);
  InferenceClient client(ep);
  EXPECT_THROW(predict_batch(planted_points(3, 1), {}, PromptConfig{}, client, SamplingParams{}, 2), EndpointError);
}

TEST(Batch, ConcurrencyDoesNotChangeOutput) {
  MockRule rule;
  rule.oracle_accuracy = 0.7;
  rule.oracle_seed = 3;
  MockServer server(rule);
  server.start();
  auto points = planted_points(60, 3);
  SamplingParams warm;
  warm.id = "warm";
  warm.temperature = 0.8;
  warm.n_samples = 3;
  for (const auto& params : {logprob_params(), warm}) {
    InferenceClient c1(testsupport::endpoint("m", server.base_url()), 1);
    InferenceClient c8(testsupport::endpoint("m", server.base_url()), 8);
    auto a = predict_batch(points, {}, PromptConfig{}, c1, params, 1);
    auto b = predict_batch(points, {}, PromptConfig{}, c8, params, 8);
    EXPECT_EQ(predictions_to_jsonl(a), predictions_to_jsonl(b));
  }
}

TEST(Batch, ChainOfThoughtWithLogprobsRejected) {
  InferenceClient client(testsupport::endpoint("m", "http://127.0.0.1:1/v1"));
  EXPECT_THROW(predict_batch(planted_points(1, 1), {}, PromptConfig{InstructionVariant::ours, 0, true, 0}, client,
                             logprob_params(), 1),
               ValidationError);
}

TEST(ParallelFor, PropagatesFirstException) {
  std::atomic<int> ran{0};
  EXPECT_THROW(parallel_for(100, 4,
                            [&](std::size_t i) {
                              ++ran;
                              if (i == 10) throw std::runtime_error("x");
                            }),
               std::runtime_error);
  EXPECT_GT(ran.load(), 0);
}
