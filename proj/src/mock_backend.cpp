#include "halludet/mock_backend.hpp"

#include <httplib.h>

#include <cmath>

#include "halludet/error.hpp"
#include "halludet/hash.hpp"
#include "halludet/prompt.hpp"

namespace halludet {

using nlohmann::json;

std::string_view planted_marker(Label l) {
  return l == Label::Hallucination ? kPlantedHallucination : kPlantedNotHallucination;
}

std::optional<Label> find_planted_label(std::string_view text) {
  auto h = text.rfind(kPlantedHallucination);
  auto n = text.rfind(kPlantedNotHallucination);
  if (h == std::string_view::npos && n == std::string_view::npos) return std::nullopt;
  if (n == std::string_view::npos || (h != std::string_view::npos && h > n)) {
    return Label::Hallucination;
  }
  return Label::NotHallucination;
}

std::string strip_planted_markers(std::string_view text) {
  std::string out(text);
  for (auto marker : {kPlantedHallucination, kPlantedNotHallucination}) {
    for (auto pos = out.find(marker); pos != std::string::npos; pos = out.find(marker, pos)) {
      out.erase(pos, marker.size());
    }
  }
  return out;
}

void MockRule::validate() const {
  if (!(oracle_accuracy >= 0.0 && oracle_accuracy <= 1.0)) {
    throw ValidationError("mock oracle_accuracy must lie in [0, 1]");
  }
}

std::map<std::string, FixtureAnswer> parse_fixtures(const json& doc) {
  if (!doc.is_object()) throw ValidationError("fixtures must be a JSON object keyed by prompt hash");
  std::map<std::string, FixtureAnswer> out;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto& v = it.value();
    FixtureAnswer a;
    if (v.is_string()) {
      a.text = v.get<std::string>();
    } else if (v.is_object() && v.contains("text") && v["text"].is_string()) {
      a.text = v["text"].get<std::string>();
      if (v.contains("lp_yes") && v["lp_yes"].is_number()) a.lp_yes = v["lp_yes"].get<double>();
      if (v.contains("lp_no") && v["lp_no"].is_number()) a.lp_no = v["lp_no"].get<double>();
    } else {
      throw ValidationError("fixture '" + it.key() + "' must be a string or {text, lp_yes, lp_no}");
    }
    out.emplace(it.key(), std::move(a));
  }
  return out;
}

std::map<std::string, FixtureAnswer> load_fixtures(const std::filesystem::path& path) {
  auto text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": malformed fixtures", e.byte > 0 ? e.byte - 1 : 0);
  }
  return parse_fixtures(doc);
}

std::string prompt_hash(std::string_view prompt) { return sha256_hex(prompt); }

namespace {

json error_payload(std::string_view type, std::string_view message) {
  return {{"error", {{"type", type}, {"message", message}}}};
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

json logprob_block(std::string_view chosen, double lp_chosen, std::string_view other,
                   std::optional<double> lp_other) {
  json top = json::array({{{"token", chosen}, {"logprob", lp_chosen}}});
  if (lp_other) top.push_back({{"token", other}, {"logprob", *lp_other}});
  return {{"content", json::array({{{"token", chosen}, {"logprob", lp_chosen}, {"top_logprobs", top}}})}};
}

json make_choice(std::size_t index, const std::string& text, json logprobs) {
  return {{"index", index},
          {"message", {{"role", "assistant"}, {"content", text}}},
          {"finish_reason", "stop"},
          {"logprobs", std::move(logprobs)}};
}

}  // namespace

std::pair<int, json> mock_respond(const MockRule& rule, const json& request) {
  if (!request.is_object() || !request.contains("messages") || !request["messages"].is_array() ||
      request["messages"].empty()) {
    return {400, error_payload("invalid_request", "messages must be a non-empty array")};
  }
  const auto& last = request["messages"].back();
  if (!last.is_object() || !last.contains("content") || !last["content"].is_string()) {
    return {400, error_payload("invalid_request", "last message has no string content")};
  }
  const std::string prompt = last["content"].get<std::string>();
  const std::string model = request.value("model", std::string("mock"));
  const int n = std::max(1, request.value("n", 1));
  const bool want_logprobs = request.value("logprobs", false);
  const double temperature = request.value("temperature", 0.0);
  const double top_p = request.value("top_p", 1.0);

  json choices = json::array();

  if (rule.mode == MockRule::Mode::fixture) {
    const auto h = prompt_hash(prompt);
    auto it = rule.fixtures.find(h);
    if (it == rule.fixtures.end()) {
      return {404, error_payload("fixture_miss", "no fixture for prompt hash " + h)};
    }
    const auto& a = it->second;
    for (int i = 0; i < n; ++i) {
      json lp = nullptr;
      if (want_logprobs && (a.lp_yes || a.lp_no)) {
        json top = json::array();
        if (a.lp_yes) top.push_back({{"token", "yes"}, {"logprob", *a.lp_yes}});
        if (a.lp_no) top.push_back({{"token", "no"}, {"logprob", *a.lp_no}});
        lp = {{"content", json::array({{{"token", top[0]["token"]},
                                        {"logprob", top[0]["logprob"]},
                                        {"top_logprobs", top}}})}};
      }
      choices.push_back(make_choice(static_cast<std::size_t>(i), a.text, std::move(lp)));
    }
  } else {
    if (ends_with(prompt, "Explain briefly why.")) {
      const bool supported = prompt.rfind("The correct answer is yes.") != std::string::npos;
      const std::string text = supported
                                   ? "The hypothesis only restates what the context says."
                                   : "The hypothesis adds content that the context does not support.";
      for (int i = 0; i < n; ++i) choices.push_back(make_choice(static_cast<std::size_t>(i), text, nullptr));
    } else {
      auto planted = find_planted_label(prompt);
      if (!planted) {
        return {422, error_payload("no_planted_label", "prompt carries no planted label marker")};
      }
      const bool cot = ends_with(prompt, kCotCue);
      const std::string right(answer_word(*planted));
      const std::string wrong(answer_word(*planted == Label::Hallucination ? Label::NotHallucination
                                                                          : Label::Hallucination));
      for (int i = 0; i < n; ++i) {
        std::string key = std::to_string(rule.oracle_seed) + '|';
        if (temperature > 0.0) {
          // Sampled decoding: each (temperature, top_p, sample) is a fresh draw.
          key += std::to_string(temperature) + '|' + std::to_string(top_p) + '|' +
                 std::to_string(i) + '|';
        }
        key += prompt;
        const bool correct = unit_interval(hash64("correct|" + key)) < rule.oracle_accuracy;
        const double confidence = 0.55 + 0.44 * unit_interval(hash64("confidence|" + key));
        const std::string& word = correct ? right : wrong;
        std::string text = word;
        if (cot) {
          text = std::string(word == "yes" ? "The hypothesis is supported by the source."
                                           : "The hypothesis is not supported by the source.") +
                 "\nAnswer: " + word;
        }
        json lp = nullptr;
        if (want_logprobs) {
          lp = logprob_block(word, std::log(confidence), word == right ? wrong : right,
                             std::log(1.0 - confidence));
        }
        choices.push_back(make_choice(static_cast<std::size_t>(i), text, std::move(lp)));
      }
    }
  }

  json body = {{"id", "mock-" + prompt_hash(prompt).substr(0, 12)},
               {"object", "chat.completion"},
               {"created", 0},
               {"model", model},
               {"choices", std::move(choices)}};
  return {200, std::move(body)};
}

MockServer::MockServer(MockRule rule, std::chrono::milliseconds delay)
    : rule_(std::move(rule)), delay_(delay) {
  rule_.validate();
}

MockServer::~MockServer() { stop(); }

void MockServer::start(const std::string& host, int port) {
  if (server_) throw std::logic_error("mock server already started");
  server_ = std::make_unique<httplib::Server>();
  server_->Post(R"(.*/chat/completions)", [this](const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    json request = json::parse(req.body, nullptr, false);
    if (request.is_discarded()) {
      res.status = 400;
      res.set_content(error_payload("invalid_request", "body is not JSON").dump(), "application/json");
      return;
    }
    auto [status, payload] = mock_respond(rule_, request);
    res.status = status;
    res.set_content(payload.dump(), "application/json");
  });
  server_->Get(R"(.*/models)", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"object":"list","data":[]})", "application/json");
  });

  host_ = host;
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
  } else {
    port_ = server_->bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) {
    server_.reset();
    throw std::runtime_error("mock server: cannot bind " + host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void MockServer::stop() {
  if (!server_) return;
  server_->stop();
  if (thread_.joinable()) thread_.join();
  server_.reset();
}

void MockServer::wait() {
  if (thread_.joinable()) thread_.join();
}

std::string MockServer::base_url() const {
  return "http://" + host_ + ":" + std::to_string(port_) + "/v1";
}

}  // namespace halludet
