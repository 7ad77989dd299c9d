#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/prompt.hpp"

namespace halludet {

struct SamplingParams {
  std::string id = "default";
  double temperature = 0.0;
  double top_p = 1.0;
  int max_tokens = 16;
  int n_samples = 1;
  bool logprob_mode = false;

  void validate() const;
};

struct ModelEndpoint {
  std::string model_id;
  std::string base_url;  // e.g. http://127.0.0.1:8080/v1
  std::optional<std::string> auth_token;
  std::optional<std::string> auth_token_env;  // read the token from this variable at request time
  std::chrono::milliseconds request_timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds backoff_base{1000};

  void validate() const;
  std::optional<std::string> resolved_token() const;
};

struct TokenAlternative {
  std::string token;
  double logprob = 0.0;
};

struct Choice {
  std::string text;
  std::vector<TokenAlternative> first_token_alternatives;  // empty unless logprobs were requested
};

struct RawResponse {
  std::vector<Choice> choices;
};

// Request body for POST {base_url}/chat/completions.
nlohmann::json build_chat_request(std::string_view prompt, std::string_view model,
                                  const SamplingParams& params, int n);
RawResponse parse_chat_response(std::string_view body);

// Thread-safe; every request uses its own connection, and the number of
// requests in flight is capped at max_in_flight.
class InferenceClient {
 public:
  explicit InferenceClient(ModelEndpoint endpoint, std::size_t max_in_flight = 8);

  RawResponse complete(std::string_view prompt, const SamplingParams& params);
  RawResponse complete(const RenderedPrompt& prompt, const SamplingParams& params) {
    return complete(prompt.text, params);
  }

  const ModelEndpoint& endpoint() const { return endpoint_; }
  std::size_t attempts() const { return attempts_.load(); }

 private:
  RawResponse request_once(std::string_view prompt, const SamplingParams& params, int n);

  ModelEndpoint endpoint_;
  std::string host_;  // scheme://host:port
  std::string path_;  // .../chat/completions
  std::size_t max_in_flight_;
  std::size_t in_flight_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::atomic<std::size_t> attempts_{0};
};

std::optional<Label> try_parse_answer(std::string_view completion, bool cot);
// Throws UnparseableAnswer when no yes/no verdict is present.
Label parse_answer(std::string_view completion, bool cot);

struct AnswerLogprobs {
  std::optional<double> lp_yes;
  std::optional<double> lp_no;
};

// Best log-probability among case/punctuation variants of each answer token.
AnswerLogprobs answer_logprobs(std::span<const TokenAlternative> alternatives);

// exp(lp_no) / (exp(lp_no) + exp(lp_yes)), computed without overflow.
double p_halluc_from_logprobs(std::optional<double> lp_yes, std::optional<double> lp_no);

struct Prediction {
  std::string point_id;
  std::string model_id;
  std::string params_id;
  std::optional<Label> label;  // absent: undecided
  double p_halluc = 0.5;
  std::string raw_completion;
  std::string error;  // why the prediction is undecided

  bool decided() const { return label.has_value(); }
  bool operator==(const Prediction&) const = default;
};

Prediction undecided_prediction(std::string point_id, std::string model_id, std::string params_id,
                                std::string error);

// Pure part of estimate_probability: turns completions into a Prediction.
// Throws ProbabilityUnavailable / UndecidedError / UnparseableAnswer.
Prediction prediction_from_choices(std::span<const Choice> choices, const SamplingParams& params,
                                   bool cot, std::string point_id, std::string model_id);

Prediction estimate_probability(const RenderedPrompt& prompt, InferenceClient& client,
                                const SamplingParams& params, bool cot);

// Per-point failures become undecided entries; throws EndpointError only when
// every point failed at the endpoint.
std::vector<Prediction> predict_batch(std::span<const DataPoint> points, const DemoSet& demos,
                                      const PromptConfig& config, InferenceClient& client,
                                      const SamplingParams& params, std::size_t concurrency = 8);

nlohmann::ordered_json to_json(const Prediction& p);
Prediction prediction_from_json(const nlohmann::json& j);
std::string predictions_to_jsonl(std::span<const Prediction> preds);
std::vector<Prediction> parse_predictions_jsonl(std::string_view text);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path);

// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace halludet
