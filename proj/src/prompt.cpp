#include "halludet/prompt.hpp"

#include <exception>
#include <sstream>

#include "halludet/error.hpp"
#include "halludet/hash.hpp"
#include "halludet/inference.hpp"
#include "halludet/log.hpp"
#include "halludet/random.hpp"

namespace halludet {

std::string_view to_string(InstructionVariant v) {
  return v == InstructionVariant::naive ? "naive" : "ours";
}

std::optional<InstructionVariant> parse_variant(std::string_view s) {
  if (s == "naive") return InstructionVariant::naive;
  if (s == "ours") return InstructionVariant::ours;
  return std::nullopt;
}

void PromptConfig::validate() const {
  if (shots < 0 || shots % 2 != 0) {
    throw ValidationError("prompt shots must be a nonnegative even number, got " +
                          std::to_string(shots));
  }
}

std::string_view answer_word(Label l) { return l == Label::NotHallucination ? "yes" : "no"; }

namespace {

std::string_view task_title(Task t) {
  return t == Task::MT ? "Machine Translation" : "Paraphrase Generation";
}

std::string render_naive(const DataPoint& p) {
  const std::string& context = p.task == Task::MT ? p.tgt : p.src;
  std::string s;
  s += "Context: ";
  s += context;
  s += "\nSentence: ";
  s += p.hyp;
  s += "\nIs the Sentence supported by the Context above? ";
  s += kAnswerCue;
  return s;
}

std::string render_task_specific(const DataPoint& p) {
  const auto title = std::string(task_title(p.task));
  std::ostringstream os;
  os << "Given the following information related to " << title << " task:\n"
     << "Src: Source input sentence\n"
     << "Tgt: " << title << " standard answer\n"
     << "Hyp: " << title << " predicted answer\n"
     << "Please determine whether hyp contains unexpected hallucinations based on src and tgt.\n"
     << "\n"
     << "Src: " << p.src << "\n"
     << "Tgt: " << p.tgt << "\n"
     << "Hyp: " << p.hyp << "\n"
     << "Is the Hyp supported by the Src and Tgt above? " << kAnswerCue;
  return os.str();
}

}  // namespace

std::string render_instruction(const DataPoint& point, InstructionVariant variant) {
  if (variant == InstructionVariant::ours && point.task != Task::DM) {
    return render_task_specific(point);
  }
  return render_naive(point);
}

std::vector<Demonstration> sample_demonstrations(const Split& trial, Task task, int k,
                                                 std::uint64_t seed) {
  if (k < 0 || k % 2 != 0) {
    throw ValidationError("demonstration count must be a nonnegative even number, got " +
                          std::to_string(k));
  }
  if (k == 0) return {};
  const auto half = static_cast<std::size_t>(k / 2);

  std::vector<const DataPoint*> pos, neg;
  for (const auto& p : trial.points) {
    if (p.task != task || !p.gold_label) continue;
    (*p.gold_label == Label::Hallucination ? pos : neg).push_back(&p);
  }
  auto check = [&](const std::vector<const DataPoint*>& pool, Label l) {
    if (pool.size() < half) {
      std::ostringstream os;
      os << "not enough '" << to_string(l) << "' trial points for task " << to_string(task)
         << ": need " << half << ", have " << pool.size();
      throw ValidationError(os.str());
    }
  };
  check(pos, Label::Hallucination);
  check(neg, Label::NotHallucination);

  SeededRng rng(seed);
  auto pos_idx = sample_without_replacement(pos.size(), half, rng);
  auto neg_idx = sample_without_replacement(neg.size(), half, rng);

  std::vector<Demonstration> out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < half; ++i) {
    out.push_back({*pos[pos_idx[i]], Label::Hallucination, std::nullopt});
    out.push_back({*neg[neg_idx[i]], Label::NotHallucination, std::nullopt});
  }
  return out;
}

DemoSet sample_demo_set(const Split& trial, int k, std::uint64_t seed) {
  DemoSet set;
  for (auto t : kAllTasks) set[t] = sample_demonstrations(trial, t, k, seed);
  return set;
}

std::string config_fingerprint(const PromptConfig& config, std::span<const Demonstration> demos) {
  std::ostringstream os;
  os << to_string(config.variant) << '|' << config.shots << '|' << config.cot << '|'
     << config.seed;
  for (const auto& d : demos) os << '|' << d.point.id;
  return sha256_hex(os.str()).substr(0, 16);
}

RenderedPrompt assemble_prompt(const DataPoint& point, std::span<const Demonstration> demos,
                               const PromptConfig& config) {
  config.validate();
  if (demos.size() != static_cast<std::size_t>(config.shots)) {
    throw ValidationError("expected " + std::to_string(config.shots) + " demonstrations, got " +
                          std::to_string(demos.size()));
  }
  std::string text;
  for (const auto& d : demos) {
    if (d.point.task != point.task) {
      throw ValidationError("demonstration '" + d.point.id + "' is for task " +
                            std::string(to_string(d.point.task)) + " but the target point '" +
                            point.id + "' is " + std::string(to_string(point.task)));
    }
    if (d.point.gold_label && *d.point.gold_label != d.label) {
      throw ValidationError("demonstration '" + d.point.id + "' carries a label that differs from its gold label");
    }
    text += render_instruction(d.point, config.variant);
    if (config.cot) {
      if (!d.rationale || d.rationale->empty()) {
        throw ValidationError("demonstration '" + d.point.id + "' has no rationale");
      }
      text += "\nReasoning: ";
      text += *d.rationale;
      text += "\nAnswer: ";
    } else {
      text += ' ';
    }
    text += answer_word(d.label);
    text += "\n\n";
  }
  text += render_instruction(point, config.variant);
  if (config.cot) {
    text += '\n';
    text += kCotCue;
  }
  return {std::move(text), point.id, config_fingerprint(config, demos)};
}

std::string rationale_request(const Demonstration& demo, InstructionVariant variant) {
  std::string s = render_instruction(demo.point, variant);
  s += "\nThe correct answer is ";
  s += answer_word(demo.label);
  s += ". Explain briefly why.";
  return s;
}

std::optional<std::string> RationaleCache::get(const std::string& demo_id) const {
  std::lock_guard lock(mu_);
  if (auto it = entries_.find(demo_id); it != entries_.end()) return it->second;
  return std::nullopt;
}

void RationaleCache::put(const std::string& demo_id, std::string rationale) {
  std::lock_guard lock(mu_);
  entries_[demo_id] = std::move(rationale);
}

std::size_t RationaleCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

RationaleCache RationaleCache::load(const std::filesystem::path& path, std::string model_id) {
  RationaleCache cache(std::move(model_id));
  if (!std::filesystem::exists(path)) return cache;
  auto text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": malformed rationale cache", e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!doc.is_object()) throw ValidationError(path.string() + ": rationale cache must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto& v = it.value();
    if (!v.is_object() || !v.contains("model") || !v.contains("rationale") ||
        !v["model"].is_string() || !v["rationale"].is_string()) {
      throw ValidationError(path.string() + ": entry '" + it.key() +
                            "' must be {\"model\": string, \"rationale\": string}");
    }
    if (v["model"].get<std::string>() != cache.model_id_) {
      log::warn(path.string() + ": skipping rationale for '" + it.key() + "' from model '" +
                v["model"].get<std::string>() + "'");
      continue;
    }
    cache.entries_[it.key()] = v["rationale"].get<std::string>();
  }
  return cache;
}

std::string RationaleCache::to_json_text() const {
  std::lock_guard lock(mu_);
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [id, r] : entries_) doc[id] = {{"model", model_id_}, {"rationale", r}};
  return doc.dump(2) + "\n";
}

void RationaleCache::save(const std::filesystem::path& path) const { write_file(path, to_json_text()); }

SamplingParams default_rationale_params() {
  SamplingParams p;
  p.id = "rationale";
  p.temperature = 0.0;
  p.top_p = 1.0;
  p.max_tokens = 256;
  return p;
}

std::vector<Demonstration> generate_rationales(std::vector<Demonstration> demos,
                                               InferenceClient& client, RationaleCache& cache) {
  return generate_rationales(std::move(demos), client, cache, InstructionVariant::ours,
                             default_rationale_params());
}

std::vector<Demonstration> generate_rationales(std::vector<Demonstration> demos,
                                               InferenceClient& client, RationaleCache& cache,
                                               InstructionVariant variant,
                                               const SamplingParams& params) {
  if (cache.model_id() != client.endpoint().model_id) {
    throw ValidationError("rationale cache belongs to model '" + cache.model_id() +
                          "', client talks to '" + client.endpoint().model_id + "'");
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    auto& d = demos[i];
    if (d.rationale && !d.rationale->empty()) continue;
    if (auto cached = cache.get(d.point.id)) {
      d.rationale = std::move(cached);
      continue;
    }
    todo.push_back(i);
  }

  std::vector<std::exception_ptr> errors(todo.size());
  parallel_for(todo.size(), 8, [&](std::size_t j) {
    auto& d = demos[todo[j]];
    try {
      auto resp = client.complete(rationale_request(d, variant), params);
      std::string text = resp.choices.empty() ? std::string() : resp.choices.front().text;
      auto last = text.find_last_not_of(" \t\r\n");
      text = last == std::string::npos ? std::string() : text.substr(0, last + 1);
      text.erase(0, text.find_first_not_of(" \t\r\n") == std::string::npos
                        ? 0
                        : text.find_first_not_of(" \t\r\n"));
      if (text.empty()) {
        throw ProtocolError("empty rationale for demonstration '" + d.point.id + "'");
      }
      cache.put(d.point.id, text);
      d.rationale = std::move(text);
    } catch (const ProtocolError&) {
      errors[j] = std::current_exception();
    } catch (const EndpointError& e) {
      errors[j] = std::make_exception_ptr(EndpointError(
          "rationale for demonstration '" + d.point.id + "': " + e.what(), e.http_status()));
    } catch (...) {
      errors[j] = std::current_exception();
    }
  });
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return demos;
}

}  // namespace halludet
