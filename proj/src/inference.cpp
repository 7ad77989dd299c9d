#include "halludet/inference.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <sstream>
#include <thread>

#include "halludet/error.hpp"
#include "halludet/hash.hpp"

namespace halludet {

using nlohmann::json;

void SamplingParams::validate() const {
  auto bad = [&](const std::string& why) {
    throw ValidationError("sampling params '" + id + "': " + why);
  };
  if (id.empty()) bad("id must be non-empty");
  if (!(temperature >= 0.0)) bad("temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) bad("top_p must lie in (0, 1]");
  if (max_tokens <= 0) bad("max_tokens must be positive");
  if (n_samples <= 0) bad("n_samples must be positive");
  if (logprob_mode && n_samples != 1) bad("logprob_mode requires n_samples == 1");
}

void ModelEndpoint::validate() const {
  auto bad = [&](const std::string& why) {
    throw ValidationError("endpoint '" + model_id + "': " + why);
  };
  if (model_id.empty()) throw ValidationError("endpoint model_id must be non-empty");
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
    bad("base_url must start with http:// or https://");
  }
  if (request_timeout.count() <= 0) bad("request_timeout must be positive");
  if (max_retries < 0 || max_retries > 20) bad("max_retries must lie in [0, 20]");
  if (backoff_base.count() < 0) bad("backoff must be >= 0");
}

std::optional<std::string> ModelEndpoint::resolved_token() const {
  if (auth_token && !auth_token->empty()) return auth_token;
  if (auth_token_env) {
    if (const char* v = std::getenv(auth_token_env->c_str()); v && *v) return std::string(v);
  }
  return std::nullopt;
}

json build_chat_request(std::string_view prompt, std::string_view model,
                        const SamplingParams& params, int n) {
  json body = {
      {"model", model},
      {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
      {"temperature", params.temperature},
      {"top_p", params.top_p},
      {"max_tokens", params.max_tokens},
      {"n", n},
  };
  if (params.logprob_mode) {
    body["logprobs"] = true;
    body["top_logprobs"] = 5;
  }
  return body;
}

RawResponse parse_chat_response(std::string_view body) {
  json doc = json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw ProtocolError("response is not a JSON object");
  auto choices = doc.find("choices");
  if (choices == doc.end() || !choices->is_array() || choices->empty()) {
    throw ProtocolError("response has no choices");
  }
  RawResponse out;
  for (const auto& c : *choices) {
    Choice choice;
    const json* content = nullptr;
    if (auto m = c.find("message"); m != c.end() && m->is_object()) {
      if (auto ct = m->find("content"); ct != m->end() && ct->is_string()) content = &*ct;
    }
    if (!content) {
      if (auto t = c.find("text"); t != c.end() && t->is_string()) content = &*t;
    }
    if (!content) throw ProtocolError("choice is missing completion text");
    choice.text = content->get<std::string>();

    auto lp = c.find("logprobs");
    if (lp != c.end() && lp->is_object()) {
      auto toks = lp->find("content");
      if (toks != lp->end() && toks->is_array() && !toks->empty()) {
        const auto& first = (*toks)[0];
        if (auto top = first.find("top_logprobs"); top != first.end() && top->is_array()) {
          for (const auto& alt : *top) {
            if (alt.contains("token") && alt["token"].is_string() && alt.contains("logprob") &&
                alt["logprob"].is_number()) {
              choice.first_token_alternatives.push_back(
                  {alt["token"].get<std::string>(), alt["logprob"].get<double>()});
            }
          }
        }
        if (first.contains("token") && first["token"].is_string() && first.contains("logprob") &&
            first["logprob"].is_number()) {
          choice.first_token_alternatives.push_back(
              {first["token"].get<std::string>(), first["logprob"].get<double>()});
        }
      }
    }
    out.choices.push_back(std::move(choice));
  }
  return out;
}

namespace {

void split_url(const std::string& url, std::string& host, std::string& path) {
  auto scheme_end = url.find("://");
  auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) {
    host = url;
    path.clear();
  } else {
    host = url.substr(0, path_start);
    path = url.substr(path_start);
  }
  while (!path.empty() && path.back() == '/') path.pop_back();
  path += "/chat/completions";
}

bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

InferenceClient::InferenceClient(ModelEndpoint endpoint, std::size_t max_in_flight)
    : endpoint_(std::move(endpoint)), max_in_flight_(std::max<std::size_t>(1, max_in_flight)) {
  endpoint_.validate();
  split_url(endpoint_.base_url, host_, path_);
}

RawResponse InferenceClient::request_once(std::string_view prompt, const SamplingParams& params,
                                          int n) {
  const std::string body = build_chat_request(prompt, endpoint_.model_id, params, n).dump();
  const auto token = endpoint_.resolved_token();
  std::string last_error;
  int last_status = 0;

  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    if (attempt > 0) {
      // Full jitter: uniform in [0, base * 2^(attempt-1)), drawn reproducibly.
      const double cap = static_cast<double>(endpoint_.backoff_base.count()) *
                         std::ldexp(1.0, attempt - 1);
      const double u = unit_interval(hash64(body + '#' + std::to_string(attempt)));
      std::this_thread::sleep_for(std::chrono::microseconds(static_cast<long long>(cap * u * 1000)));
    }
    ++attempts_;

    httplib::Client cli(host_);
    const auto secs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint_.request_timeout);
    cli.set_connection_timeout(secs);
    cli.set_read_timeout(secs);
    cli.set_write_timeout(secs);
    httplib::Headers headers;
    if (token) headers.emplace("Authorization", "Bearer " + *token);

    httplib::Result res;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return in_flight_ < max_in_flight_; });
      ++in_flight_;
    }
    res = cli.Post(path_, headers, body, "application/json");
    {
      std::lock_guard lock(mu_);
      --in_flight_;
    }
    cv_.notify_one();

    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      last_status = 0;
      continue;
    }
    if (res->status >= 200 && res->status < 300) return parse_chat_response(res->body);
    last_status = res->status;
    last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
    if (!transient_status(res->status)) break;
  }
  throw EndpointError("endpoint '" + endpoint_.model_id + "' (" + endpoint_.base_url +
                          "): " + last_error,
                      last_status);
}

RawResponse InferenceClient::complete(std::string_view prompt, const SamplingParams& params) {
  params.validate();
  RawResponse out;
  // Some servers cap or ignore `n`; keep asking until enough samples arrive.
  int guard = 0;
  while (static_cast<int>(out.choices.size()) < params.n_samples) {
    auto r = request_once(prompt, params, params.n_samples - static_cast<int>(out.choices.size()));
    for (auto& c : r.choices) out.choices.push_back(std::move(c));
    if (++guard > params.n_samples) throw ProtocolError("endpoint returned too few choices");
  }
  out.choices.resize(static_cast<std::size_t>(params.n_samples));
  return out;
}

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::optional<Label> parse_verdict(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && (std::isspace(static_cast<unsigned char>(s[i])) ||
                          std::ispunct(static_cast<unsigned char>(s[i])))) {
    ++i;
  }
  auto starts = [&](std::string_view word) {
    if (s.size() - i < word.size()) return false;
    for (std::size_t k = 0; k < word.size(); ++k) {
      if (std::tolower(static_cast<unsigned char>(s[i + k])) != word[k]) return false;
    }
    std::size_t end = i + word.size();
    return end == s.size() || !is_word_char(static_cast<unsigned char>(s[end]));
  };
  if (starts("yes")) return Label::NotHallucination;
  if (starts("no")) return Label::Hallucination;
  return std::nullopt;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::optional<Label> try_parse_answer(std::string_view completion, bool cot) {
  if (!cot) return parse_verdict(completion);
  const auto l = lower(completion);
  auto pos = l.rfind("answer:");
  if (pos == std::string::npos) return std::nullopt;
  return parse_verdict(completion.substr(pos + 7));
}

Label parse_answer(std::string_view completion, bool cot) {
  if (auto l = try_parse_answer(completion, cot)) return *l;
  std::string shown(completion.substr(0, 80));
  throw UnparseableAnswer("no yes/no verdict in completion: \"" + shown + "\"");
}

AnswerLogprobs answer_logprobs(std::span<const TokenAlternative> alternatives) {
  AnswerLogprobs out;
  for (const auto& alt : alternatives) {
    std::string norm;
    for (unsigned char c : alt.token) {
      if (std::isspace(c) || std::ispunct(c)) continue;
      norm.push_back(static_cast<char>(std::tolower(c)));
    }
    // SentencePiece / GPT-2 word-start markers.
    for (std::string_view marker : {"\xE2\x96\x81", "\xC4\xA0"}) {
      if (norm.rfind(marker, 0) == 0) norm.erase(0, marker.size());
    }
    std::optional<double>* slot = norm == "yes"  ? &out.lp_yes
                                  : norm == "no" ? &out.lp_no
                                                 : nullptr;
    if (slot && (!*slot || alt.logprob > **slot)) *slot = alt.logprob;
  }
  return out;
}

double p_halluc_from_logprobs(std::optional<double> lp_yes, std::optional<double> lp_no) {
  if (!lp_yes && !lp_no) throw ProbabilityUnavailable("neither yes nor no among the alternatives");
  if (!lp_yes) return 1.0;
  if (!lp_no) return 0.0;
  // 1 / (1 + exp(lp_yes - lp_no))
  const double d = *lp_yes - *lp_no;
  if (d >= 0) {
    const double e = std::exp(-d);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(d));
}

Prediction undecided_prediction(std::string point_id, std::string model_id, std::string params_id,
                                std::string error) {
  Prediction p;
  p.point_id = std::move(point_id);
  p.model_id = std::move(model_id);
  p.params_id = std::move(params_id);
  p.p_halluc = 0.5;
  p.error = std::move(error);
  return p;
}

Prediction prediction_from_choices(std::span<const Choice> choices, const SamplingParams& params,
                                   bool cot, std::string point_id, std::string model_id) {
  if (choices.empty()) throw ProtocolError("no completions returned");
  Prediction pred;
  pred.point_id = std::move(point_id);
  pred.model_id = std::move(model_id);
  pred.params_id = params.id;
  pred.raw_completion = choices.front().text;

  if (params.logprob_mode) {
    auto lp = answer_logprobs(choices.front().first_token_alternatives);
    if (!lp.lp_yes && !lp.lp_no) {
      throw ProbabilityUnavailable("no yes/no token among the returned log-probabilities");
    }
    pred.p_halluc = p_halluc_from_logprobs(lp.lp_yes, lp.lp_no);
  } else {
    std::size_t h = 0, total = 0;
    for (const auto& c : choices) {
      if (auto l = try_parse_answer(c.text, cot)) {
        ++total;
        if (*l == Label::Hallucination) ++h;
      }
    }
    if (total == 0) throw UndecidedError("none of the sampled completions is parsable");
    pred.p_halluc = static_cast<double>(h) / static_cast<double>(total);
  }

  if (pred.p_halluc > 0.5) {
    pred.label = Label::Hallucination;
  } else if (pred.p_halluc < 0.5) {
    pred.label = Label::NotHallucination;
  } else {
    pred.label = parse_answer(pred.raw_completion, cot);
  }
  return pred;
}

Prediction estimate_probability(const RenderedPrompt& prompt, InferenceClient& client,
                                const SamplingParams& params, bool cot) {
  auto resp = client.complete(prompt, params);
  return prediction_from_choices(resp.choices, params, cot, prompt.point_id,
                                 client.endpoint().model_id);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr first_error;
  std::mutex err_mu;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !stop; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(err_mu);
            if (!first_error) first_error = std::current_exception();
            stop = true;
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<Prediction> predict_batch(std::span<const DataPoint> points, const DemoSet& demos,
                                      const PromptConfig& config, InferenceClient& client,
                                      const SamplingParams& params, std::size_t concurrency) {
  config.validate();
  params.validate();
  if (config.cot && params.logprob_mode) {
    throw ValidationError("sampling params '" + params.id +
                          "': logprob_mode cannot be combined with chain-of-thought prompts");
  }
  const std::vector<Demonstration> none;
  std::vector<Prediction> out(points.size());
  std::vector<char> endpoint_failed(points.size(), 0);

  parallel_for(points.size(), concurrency, [&](std::size_t i) {
    const auto& p = points[i];
    auto it = demos.find(p.task);
    const auto& task_demos = it == demos.end() ? none : it->second;
    try {
      auto prompt = assemble_prompt(p, task_demos, config);
      out[i] = estimate_probability(prompt, client, params, config.cot);
    } catch (const EndpointError& e) {
      endpoint_failed[i] = 1;
      out[i] = undecided_prediction(p.id, client.endpoint().model_id, params.id, e.what());
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      out[i] = undecided_prediction(p.id, client.endpoint().model_id, params.id, e.what());
    }
  });

  if (!points.empty() &&
      std::all_of(endpoint_failed.begin(), endpoint_failed.end(), [](char c) { return c != 0; })) {
    throw EndpointError("every request to '" + client.endpoint().model_id + "' failed: " +
                        out.front().error);
  }
  return out;
}

nlohmann::ordered_json to_json(const Prediction& p) {
  nlohmann::ordered_json j;
  j["point_id"] = p.point_id;
  j["model_id"] = p.model_id;
  j["params_id"] = p.params_id;
  j["label"] = p.label ? json(to_string(*p.label)) : json(nullptr);
  j["p_halluc"] = p.p_halluc;
  j["raw_completion"] = p.raw_completion;
  if (!p.error.empty()) j["error"] = p.error;
  return j;
}

Prediction prediction_from_json(const json& j) {
  auto str = [&](const char* k) -> std::string {
    auto it = j.find(k);
    if (it == j.end() || !it->is_string()) {
      throw ValidationError(std::string("prediction: field '") + k + "' missing or not a string");
    }
    return it->get<std::string>();
  };
  if (!j.is_object()) throw ValidationError("prediction: not a JSON object");
  Prediction p;
  p.point_id = str("point_id");
  p.model_id = str("model_id");
  p.params_id = str("params_id");
  if (auto it = j.find("label"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ValidationError("prediction: field 'label' must be a string");
    auto l = parse_label(it->get<std::string>());
    if (!l) throw ValidationError("prediction: unknown label '" + it->get<std::string>() + "'");
    p.label = l;
  }
  auto pit = j.find("p_halluc");
  if (pit == j.end() || !pit->is_number()) {
    throw ValidationError("prediction: field 'p_halluc' missing or not a number");
  }
  p.p_halluc = pit->get<double>();
  if (!(p.p_halluc >= 0.0 && p.p_halluc <= 1.0)) {
    throw ValidationError("prediction: p_halluc outside [0, 1]");
  }
  if (auto it = j.find("raw_completion"); it != j.end() && it->is_string()) {
    p.raw_completion = it->get<std::string>();
  }
  if (auto it = j.find("error"); it != j.end() && it->is_string()) p.error = it->get<std::string>();
  return p;
}

std::string predictions_to_jsonl(std::span<const Prediction> preds) {
  std::string out;
  for (const auto& p : preds) {
    out += to_json(p).dump();
    out += '\n';
  }
  return out;
}

std::vector<Prediction> parse_predictions_jsonl(std::string_view text) {
  std::vector<Prediction> out;
  std::size_t start = 0, line_no = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError("predictions line " + std::to_string(line_no) + ": malformed JSON",
                         start + (e.byte > 0 ? e.byte - 1 : 0));
      }
      try {
        out.push_back(prediction_from_json(j));
      } catch (const ValidationError& e) {
        throw ValidationError("predictions line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  try {
    return parse_predictions_jsonl(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": malformed predictions", e.byte_offset());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_predictions(std::span<const Prediction> preds, const std::filesystem::path& path) {
  write_file(path, predictions_to_jsonl(preds));
}

}  // namespace halludet
