#include "halludet/config.hpp"

#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "halludet/error.hpp"
#include "halludet/hash.hpp"

namespace halludet {

std::string PromptCandidate::name() const {
  std::string s(to_string(variant));
  s += "_k" + std::to_string(shots);
  if (cot) s += "_cot";
  return s;
}

const ModelEndpoint& RunConfig::endpoint(const std::string& model_id) const {
  for (const auto& e : endpoints) {
    if (e.model_id == model_id) return e;
  }
  throw ValidationError("unknown model id '" + model_id + "'");
}

const SamplingParams& RunConfig::params(const std::string& id) const {
  for (const auto& p : param_sets) {
    if (p.id == id) return p;
  }
  throw ValidationError("unknown param set id '" + id + "'");
}

std::uint64_t RunConfig::seed(const std::string& name) const {
  auto it = seeds.find(name);
  if (it == seeds.end()) throw ValidationError("seeds." + name + " is required");
  return it->second;
}

void RunConfig::validate() const {
  if (endpoints.empty()) throw ValidationError("config needs at least one [[endpoints]] entry");
  std::set<std::string> ids;
  for (const auto& e : endpoints) {
    e.validate();
    if (!ids.insert(e.model_id).second) throw ValidationError("duplicate endpoint model_id '" + e.model_id + "'");
  }
  ids.clear();
  for (const auto& p : param_sets) {
    p.validate();
    if (!ids.insert(p.id).second) throw ValidationError("duplicate param set id '" + p.id + "'");
  }
  seed("demos");
  seed("balance");

  for (const auto& m : baseline_models) endpoint(m);
  params(baseline_params);
  if (sweep_model) endpoint(*sweep_model);
  params(sweep_params);
  if (sweep.empty()) throw ValidationError("prompt sweep is empty");
  bool any_cot = false;
  for (const auto& c : sweep) {
    PromptConfig{c.variant, c.shots, c.cot, 0}.validate();
    any_cot = any_cot || c.cot;
  }
  if (params(sweep_params).logprob_mode) {
    for (const auto& c : sweep) {
      if (c.cot && !cot_params) {
        throw ValidationError("sweep includes chain-of-thought prompts; set sweep.cot_params");
      }
    }
  }
  if (cot_params && params(*cot_params).logprob_mode) {
    throw ValidationError("sweep.cot_params '" + *cot_params + "' must not use logprob_mode");
  }
  if (rationale_model) endpoint(*rationale_model);

  consistency.validate();
  for (const auto& m : consistency.members) endpoint(m.model_id);

  if (vote_models.empty()) throw ValidationError("vote.models is empty");
  for (const auto& m : vote_models) endpoint(m);
  params(vote_params);
  vote.validate();

  // The selected prompt may be chain-of-thought, and later stages reuse it.
  if (any_cot) {
    for (const auto& m : consistency.members) {
      for (const auto& p : m.param_sets) {
        if (p.logprob_mode) {
          throw ValidationError("sweep includes chain-of-thought prompts, so consistency param set '" +
                                p.id + "' must not use logprob_mode");
        }
      }
    }
    if (params(vote_params).logprob_mode) {
      throw ValidationError("sweep includes chain-of-thought prompts, so vote.params '" + vote_params +
                            "' must not use logprob_mode");
    }
  }

  if (paths.trial.empty() || paths.unlabeled.empty() || paths.validation.empty()) {
    throw ValidationError("paths.trial, paths.unlabeled and paths.validation are required");
  }
  if (concurrency == 0) throw ValidationError("run.concurrency must be positive");
}

nlohmann::ordered_json RunConfig::semantic_json() const {
  using oj = nlohmann::ordered_json;
  oj j;
  oj eps = oj::array();
  for (const auto& e : endpoints) eps.push_back(e.model_id);
  j["endpoints"] = eps;
  oj ps = oj::array();
  for (const auto& p : param_sets) {
    ps.push_back({{"id", p.id},
                  {"temperature", p.temperature},
                  {"top_p", p.top_p},
                  {"max_tokens", p.max_tokens},
                  {"n_samples", p.n_samples},
                  {"logprob_mode", p.logprob_mode}});
  }
  j["param_sets"] = ps;
  j["seeds"] = seeds;
  j["baseline"] = {{"models", baseline_models}, {"params", baseline_params}};
  oj sw = oj::array();
  for (const auto& c : sweep) sw.push_back(c.name());
  j["sweep"] = {{"model", sweep_model ? oj(*sweep_model) : oj(nullptr)},
                {"params", sweep_params},
                {"cot_params", cot_params ? oj(*cot_params) : oj(nullptr)},
                {"rationale_model", rationale_model ? oj(*rationale_model) : oj(nullptr)},
                {"candidates", sw}};
  oj cons = oj::array();
  for (const auto& m : consistency.members) {
    oj pids = oj::array();
    for (const auto& p : m.param_sets) pids.push_back(p.id);
    cons.push_back({{"model", m.model_id}, {"params", pids}});
  }
  j["consistency"] = cons;
  j["vote"] = {{"models", vote_models}, {"params", vote_params}, {"step", vote.step}, {"threshold", vote.threshold}};
  j["training"] = training;
  auto file_hash = [](const std::filesystem::path& p) { return sha256_file_hex(p); };
  j["inputs"] = {{"trial", file_hash(paths.trial)},
                 {"unlabeled", file_hash(paths.unlabeled)},
                 {"validation", file_hash(paths.validation)},
                 {"test", paths.test ? oj(file_hash(*paths.test)) : oj(nullptr)},
                 {"jsonl", paths.parse.jsonl},
                 {"track", paths.parse.track_override ? oj(to_string(*paths.parse.track_override)) : oj(nullptr)}};
  return j;
}

std::string RunConfig::fingerprint() const { return sha256_hex(semantic_json().dump()).substr(0, 16); }

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw ValidationError("config: " + key + ": " + why);
}

template <typename T>
std::optional<T> opt(const toml::table& t, std::string_view key, const std::string& where) {
  auto node = t.get(key);
  if (!node) return std::nullopt;
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = node->value<double>()) return *v;  // integers convert too
  } else {
    if (auto v = node->value_exact<T>()) return *v;
  }
  bad(where + std::string(key), "wrong type");
}

template <typename T>
T req(const toml::table& t, std::string_view key, const std::string& where) {
  auto v = opt<T>(t, key, where);
  if (!v) bad(where + std::string(key), "is required");
  return *v;
}

const toml::table* sub(const toml::table& root, std::string_view key) {
  auto node = root.get(key);
  if (!node) return nullptr;
  if (!node->is_table()) bad(std::string(key), "must be a table");
  return node->as_table();
}

std::vector<std::string> string_list(const toml::table& t, std::string_view key, const std::string& where) {
  std::vector<std::string> out;
  auto node = t.get(key);
  if (!node) return out;
  auto arr = node->as_array();
  if (!arr) bad(where + std::string(key), "must be an array of strings");
  for (const auto& el : *arr) {
    auto s = el.value<std::string>();
    if (!s) bad(where + std::string(key), "must be an array of strings");
    out.push_back(*s);
  }
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

nlohmann::ordered_json to_json(const toml::node& n) {
  if (auto t = n.as_table()) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = to_json(v);
    return j;
  }
  if (auto a = n.as_array()) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& v : *a) j.push_back(to_json(v));
    return j;
  }
  if (auto v = n.value_exact<std::string>()) return *v;
  if (auto v = n.value_exact<std::int64_t>()) return *v;
  if (auto v = n.value_exact<double>()) return *v;
  if (auto v = n.value_exact<bool>()) return *v;
  std::ostringstream os;
  if (auto v = n.as_date()) {
    os << *v;
  } else if (auto v = n.as_time()) {
    os << *v;
  } else if (auto v = n.as_date_time()) {
    os << *v;
  }
  return os.str();
}

}  // namespace

RunConfig parse_run_config(std::string_view toml_text, const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " (line " << e.source().begin.line << ", column "
       << e.source().begin.column << ")";
    throw ValidationError(os.str());
  }

  RunConfig cfg;

  if (auto run = sub(root, "run")) {
    if (auto c = opt<std::int64_t>(*run, "concurrency", "run.")) {
      if (*c <= 0) bad("run.concurrency", "must be positive");
      cfg.concurrency = static_cast<std::size_t>(*c);
    }
    if (auto r = opt<std::string>(*run, "root", "run.")) cfg.paths.run_root = resolve(base_dir, *r);
  }
  if (cfg.paths.run_root.is_relative()) cfg.paths.run_root = base_dir / cfg.paths.run_root;

  const toml::table* paths = sub(root, "paths");
  if (!paths) bad("paths", "section is required");
  cfg.paths.trial = resolve(base_dir, req<std::string>(*paths, "trial", "paths."));
  cfg.paths.unlabeled = resolve(base_dir, req<std::string>(*paths, "unlabeled", "paths."));
  cfg.paths.validation = resolve(base_dir, req<std::string>(*paths, "validation", "paths."));
  if (auto t = opt<std::string>(*paths, "test", "paths.")) cfg.paths.test = resolve(base_dir, *t);
  cfg.paths.parse.jsonl = opt<bool>(*paths, "jsonl", "paths.").value_or(false);
  if (auto tr = opt<std::string>(*paths, "track", "paths.")) {
    auto track = parse_track(*tr);
    if (!track) bad("paths.track", "expected \"aware\" or \"agnostic\"");
    cfg.paths.parse.track_override = track;
  }

  if (auto seeds = sub(root, "seeds")) {
    for (const auto& [k, v] : *seeds) {
      auto x = v.value_exact<std::int64_t>();
      if (!x || *x < 0) bad("seeds." + std::string(k.str()), "must be a nonnegative integer");
      cfg.seeds[std::string(k.str())] = static_cast<std::uint64_t>(*x);
    }
  }

  if (auto eps = root.get("endpoints")) {
    auto arr = eps->as_array();
    if (!arr) bad("endpoints", "must be an array of tables ([[endpoints]])");
    for (const auto& el : *arr) {
      auto t = el.as_table();
      if (!t) bad("endpoints", "entries must be tables");
      ModelEndpoint e;
      e.model_id = req<std::string>(*t, "model_id", "endpoints.");
      e.base_url = req<std::string>(*t, "base_url", "endpoints.");
      e.auth_token = opt<std::string>(*t, "auth_token", "endpoints.");
      e.auth_token_env = opt<std::string>(*t, "auth_token_env", "endpoints.");
      if (auto v = opt<std::int64_t>(*t, "timeout_ms", "endpoints.")) e.request_timeout = std::chrono::milliseconds(*v);
      if (auto v = opt<std::int64_t>(*t, "max_retries", "endpoints.")) e.max_retries = static_cast<int>(*v);
      if (auto v = opt<std::int64_t>(*t, "backoff_ms", "endpoints.")) e.backoff_base = std::chrono::milliseconds(*v);
      cfg.endpoints.push_back(std::move(e));
    }
  }

  if (auto ps = root.get("param_sets")) {
    auto arr = ps->as_array();
    if (!arr) bad("param_sets", "must be an array of tables ([[param_sets]])");
    for (const auto& el : *arr) {
      auto t = el.as_table();
      if (!t) bad("param_sets", "entries must be tables");
      SamplingParams p;
      p.id = req<std::string>(*t, "id", "param_sets.");
      p.temperature = opt<double>(*t, "temperature", "param_sets.").value_or(p.temperature);
      p.top_p = opt<double>(*t, "top_p", "param_sets.").value_or(p.top_p);
      p.max_tokens = static_cast<int>(opt<std::int64_t>(*t, "max_tokens", "param_sets.").value_or(p.max_tokens));
      p.n_samples = static_cast<int>(opt<std::int64_t>(*t, "n_samples", "param_sets.").value_or(p.n_samples));
      p.logprob_mode = opt<bool>(*t, "logprob_mode", "param_sets.").value_or(false);
      cfg.param_sets.push_back(std::move(p));
    }
  }

  std::vector<std::string> all_models;
  for (const auto& e : cfg.endpoints) all_models.push_back(e.model_id);
  const std::string first_params = cfg.param_sets.empty() ? std::string() : cfg.param_sets.front().id;

  auto parse_variant_or = [](const std::string& s, const std::string& key) {
    auto v = parse_variant(s);
    if (!v) bad(key, "expected \"naive\" or \"ours\"");
    return *v;
  };

  if (auto pr = sub(root, "prompt")) {
    if (auto v = opt<std::string>(*pr, "variant", "prompt.")) cfg.prompt.variant = parse_variant_or(*v, "prompt.variant");
    cfg.prompt.shots = static_cast<int>(opt<std::int64_t>(*pr, "shots", "prompt.").value_or(0));
    cfg.prompt.cot = opt<bool>(*pr, "cot", "prompt.").value_or(false);
  }

  cfg.baseline_models = all_models;
  cfg.baseline_params = first_params;
  if (auto bl = sub(root, "baseline")) {
    if (bl->get("models")) cfg.baseline_models = string_list(*bl, "models", "baseline.");
    if (auto p = opt<std::string>(*bl, "params", "baseline.")) cfg.baseline_params = *p;
  }

  cfg.sweep_params = cfg.baseline_params;
  if (auto sw = sub(root, "sweep")) {
    cfg.sweep_model = opt<std::string>(*sw, "model", "sweep.");
    if (auto p = opt<std::string>(*sw, "params", "sweep.")) cfg.sweep_params = *p;
    cfg.cot_params = opt<std::string>(*sw, "cot_params", "sweep.");
    cfg.rationale_model = opt<std::string>(*sw, "rationale_model", "sweep.");

    std::vector<InstructionVariant> variants;
    for (const auto& s : string_list(*sw, "variants", "sweep.")) variants.push_back(parse_variant_or(s, "sweep.variants"));
    if (variants.empty()) variants = {cfg.prompt.variant};
    std::vector<int> shots;
    if (auto node = sw->get("shots")) {
      auto arr = node->as_array();
      if (!arr) bad("sweep.shots", "must be an array of integers");
      for (const auto& el : *arr) {
        auto v = el.value_exact<std::int64_t>();
        if (!v) bad("sweep.shots", "must be an array of integers");
        shots.push_back(static_cast<int>(*v));
      }
    }
    if (shots.empty()) shots = {cfg.prompt.shots};
    std::vector<bool> cots;
    if (auto node = sw->get("cot")) {
      auto arr = node->as_array();
      if (!arr) bad("sweep.cot", "must be an array of booleans");
      for (const auto& el : *arr) {
        auto v = el.value_exact<bool>();
        if (!v) bad("sweep.cot", "must be an array of booleans");
        cots.push_back(*v);
      }
    }
    if (cots.empty()) cots = {cfg.prompt.cot};
    for (bool c : cots) {
      for (auto v : variants) {
        for (int k : shots) {
          if (c && k == 0) continue;  // CoT needs demonstrations with rationales
          cfg.sweep.push_back({v, k, c});
        }
      }
    }
  } else {
    cfg.sweep.push_back(cfg.prompt);
  }

  if (auto cs = sub(root, "consistency")) {
    auto models = cs->get("models") ? string_list(*cs, "models", "consistency.") : all_models;
    auto pids = string_list(*cs, "params", "consistency.");
    if (pids.empty() && !first_params.empty()) pids = {first_params};
    for (const auto& m : models) {
      ConsistencyMember member{m, {}};
      for (const auto& pid : pids) {
        bool found = false;
        for (const auto& p : cfg.param_sets) {
          if (p.id == pid) {
            member.param_sets.push_back(p);
            found = true;
          }
        }
        if (!found) bad("consistency.params", "unknown param set id '" + pid + "'");
      }
      cfg.consistency.members.push_back(std::move(member));
    }
  } else {
    for (const auto& m : all_models) {
      ConsistencyMember member{m, {}};
      if (!cfg.param_sets.empty()) member.param_sets.push_back(cfg.param_sets.front());
      cfg.consistency.members.push_back(std::move(member));
    }
  }

  cfg.vote_models = all_models;
  cfg.vote_params = first_params;
  if (auto vt = sub(root, "vote")) {
    if (vt->get("models")) cfg.vote_models = string_list(*vt, "models", "vote.");
    if (auto p = opt<std::string>(*vt, "params", "vote.")) cfg.vote_params = *p;
    cfg.vote.step = opt<double>(*vt, "step", "vote.").value_or(cfg.vote.step);
    cfg.vote.threshold = opt<double>(*vt, "threshold", "vote.").value_or(cfg.vote.threshold);
  }

  if (auto tr = sub(root, "training")) cfg.training = to_json(*tr);

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  auto text = read_file(path);
  auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_run_config(text, base);
}

}  // namespace halludet
