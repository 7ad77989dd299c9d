#include <chrono>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "halludet/config.hpp"
#include "halludet/data.hpp"
#include "halludet/error.hpp"
#include "halludet/eval.hpp"
#include "halludet/inference.hpp"
#include "halludet/merge.hpp"
#include "halludet/mock_backend.hpp"
#include "halludet/pipeline.hpp"
#include "halludet/prompt.hpp"
#include "halludet/safetensors.hpp"
#include "halludet/synthetic.hpp"
#include "halludet/vote.hpp"
#include "halludet/weak_label.hpp"

using namespace halludet;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kValidation = 1, kEndpoint = 2, kInternal = 3 };

void emit(const std::optional<std::string>& out, const std::string& text) {
  if (out) {
    write_file(*out, text);
  } else {
    std::cout << text;
  }
}

struct SplitArgs {
  std::string path;
  std::string kind = "validation";
  bool jsonl = false;
  std::string track;

  void add(CLI::App* cmd, const std::string& flag, const std::string& help) {
    cmd->add_option(flag, path, help)->required()->check(CLI::ExistingFile);
    cmd->add_option("--split", kind, "split kind: trial, unlabeled_train, validation, test")
        ->capture_default_str();
    cmd->add_flag("--jsonl", jsonl, "input is JSON Lines");
    cmd->add_option("--track", track, "force the track: aware or agnostic");
  }

  ParseOptions options() const {
    ParseOptions o;
    o.jsonl = jsonl;
    if (!track.empty()) {
      auto t = parse_track(track);
      if (!t) throw ValidationError("--track must be aware or agnostic");
      o.track_override = t;
    }
    return o;
  }

  Split load() const {
    auto k = parse_split_kind(kind);
    if (!k) throw ValidationError("unknown split kind '" + kind + "'");
    return parse_dataset(path, *k, options());
  }
};

struct PromptArgs {
  std::string trial;
  std::string variant = "ours";
  int shots = 0;
  bool cot = false;
  std::uint64_t seed = 0;
  std::string rationales;

  void add(CLI::App* cmd) {
    cmd->add_option("--trial", trial, "labeled trial split used for demonstrations")->check(CLI::ExistingFile);
    cmd->add_option("--variant", variant, "instruction variant: naive or ours")->capture_default_str();
    cmd->add_option("--shots", shots, "number of demonstrations (even)")->capture_default_str();
    cmd->add_flag("--cot", cot, "chain-of-thought prompting");
    cmd->add_option("--seed", seed, "demonstration sampling seed")->capture_default_str();
    cmd->add_option("--rationales", rationales, "rationale cache file (required with --cot)");
  }

  PromptConfig config() const {
    auto v = parse_variant(variant);
    if (!v) throw ValidationError("--variant must be naive or ours");
    PromptConfig c{*v, shots, cot, seed};
    c.validate();
    return c;
  }

  DemoSet demos(std::optional<InferenceClient*> rationale_client = std::nullopt) const {
    if (shots == 0) return {};
    if (trial.empty()) throw ValidationError("--trial is required when --shots > 0");
    auto split = parse_dataset(trial, SplitKind::trial);
    auto set = sample_demo_set(split, shots, seed);
    if (!cot) return set;
    if (rationales.empty()) throw ValidationError("--rationales is required with --cot");
    std::string model = rationale_client ? (*rationale_client)->endpoint().model_id : std::string();
    if (!rationale_client) {
      auto doc = nlohmann::json::parse(read_file(rationales));
      if (!doc.empty()) model = doc.begin()->at("model").get<std::string>();
    }
    auto cache = fs::exists(rationales) ? RationaleCache::load(rationales, model) : RationaleCache(model);
    for (auto& [task, list] : set) {
      if (rationale_client) {
        list = generate_rationales(std::move(list), **rationale_client, cache, config().variant,
                                   default_rationale_params());
      } else {
        for (auto& d : list) {
          d.rationale = cache.get(d.point.id);
          if (!d.rationale) throw ValidationError("no cached rationale for demo '" + d.point.id + "'");
        }
      }
    }
    if (rationale_client) cache.save(rationales);
    return set;
  }
};

struct EndpointArgs {
  std::string model;
  std::string base_url;
  std::string token_env;
  int timeout_ms = 30000;
  int retries = 3;
  int backoff_ms = 1000;

  void add(CLI::App* cmd) {
    cmd->add_option("--model", model, "model id")->required();
    cmd->add_option("--base-url", base_url, "OpenAI-compatible base URL, e.g. http://host:port/v1")->required();
    cmd->add_option("--token-env", token_env, "environment variable holding the bearer token");
    cmd->add_option("--timeout-ms", timeout_ms, "per-request timeout")->capture_default_str();
    cmd->add_option("--retries", retries, "retries after the first attempt")->capture_default_str();
    cmd->add_option("--backoff-ms", backoff_ms, "base backoff between retries")->capture_default_str();
  }

  ModelEndpoint endpoint() const {
    ModelEndpoint e;
    e.model_id = model;
    e.base_url = base_url;
    if (!token_env.empty()) e.auth_token_env = token_env;
    e.request_timeout = std::chrono::milliseconds(timeout_ms);
    e.max_retries = retries;
    e.backoff_base = std::chrono::milliseconds(backoff_ms);
    e.validate();
    return e;
  }
};

struct ParamArgs {
  SamplingParams p;
  void add(CLI::App* cmd) {
    cmd->add_option("--params-id", p.id, "name recorded with each prediction")->capture_default_str();
    cmd->add_option("--temperature", p.temperature)->capture_default_str();
    cmd->add_option("--top-p", p.top_p)->capture_default_str();
    cmd->add_option("--max-tokens", p.max_tokens)->capture_default_str();
    cmd->add_option("--n-samples", p.n_samples)->capture_default_str();
    cmd->add_flag("--logprobs", p.logprob_mode, "estimate p(Hallucination) from first-token logprobs");
  }
};

void print_split_summary(const Split& s) {
  std::map<Task, std::map<std::string, std::size_t>> counts;
  for (const auto& p : s.points) {
    counts[p.task][p.gold_label ? std::string(to_string(*p.gold_label)) : "unlabeled"]++;
  }
  std::cout << to_string(s.kind) << ": " << s.points.size() << " points\n";
  for (const auto& [task, by_label] : counts) {
    std::cout << "  " << to_string(task) << ":";
    for (const auto& [label, n] : by_label) std::cout << " " << label << "=" << n;
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hallucination detection toolkit: prompting, weak labels, evaluation, voting and checkpoint merging"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate a dataset split and print per-task counts");
  SplitArgs ingest_split;
  std::optional<std::string> ingest_out;
  ingest_split.add(ingest, "input", "dataset file");
  ingest->add_option("--out", ingest_out, "write the normalised split here");

  // prompt-preview
  auto* preview = app.add_subcommand("prompt-preview", "Print the assembled prompt for one datapoint");
  SplitArgs preview_split;
  PromptArgs preview_prompt;
  std::string preview_id;
  preview_split.add(preview, "input", "dataset file");
  preview_prompt.add(preview);
  preview->add_option("--id", preview_id, "datapoint id (default: first)");

  // infer
  auto* infer = app.add_subcommand("infer", "Predict p(Hallucination) for every datapoint of a split");
  SplitArgs infer_split;
  PromptArgs infer_prompt;
  EndpointArgs infer_ep;
  ParamArgs infer_params;
  std::size_t infer_conc = 8;
  std::optional<std::string> infer_out;
  infer_split.add(infer, "input", "dataset file");
  infer_prompt.add(infer);
  infer_ep.add(infer);
  infer_params.add(infer);
  infer->add_option("--concurrency", infer_conc, "requests in flight")->capture_default_str();
  infer->add_option("--out", infer_out, "predictions JSONL (default: stdout)");

  // gen-labels
  auto* gen = app.add_subcommand("gen-labels", "Generate consistency-filtered weak labels from a run config");
  std::string gen_config;
  std::string gen_out = "weak";
  std::optional<std::size_t> gen_conc;
  gen->add_option("--config", gen_config, "run configuration (TOML)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out-dir", gen_out, "output directory")->capture_default_str();
  gen->add_option("--concurrency", gen_conc, "requests in flight per endpoint");

  // export-sft
  auto* sft = app.add_subcommand("export-sft", "Write an instruction-tuning JSONL from weak labels");
  std::string sft_in, sft_variant = "ours";
  std::optional<std::string> sft_out;
  sft->add_option("input", sft_in, "weak label JSONL")->required()->check(CLI::ExistingFile);
  sft->add_option("--variant", sft_variant, "instruction variant: naive or ours")->capture_default_str();
  sft->add_option("--out", sft_out, "output JSONL (default: stdout)");

  // eval
  auto* ev = app.add_subcommand("eval", "Accuracy and Spearman rho of predictions against gold");
  std::string ev_pred;
  SplitArgs ev_gold;
  bool ev_json = false;
  ev->add_option("--pred", ev_pred, "predictions JSONL")->required()->check(CLI::ExistingFile);
  ev_gold.add(ev, "--gold", "labeled split");
  ev->add_flag("--json", ev_json, "print JSON instead of a table");

  // vote-search
  auto* vs = app.add_subcommand("vote-search", "Grid-search per-task voting weights on a labeled split");
  SplitArgs vs_gold;
  std::vector<std::string> vs_preds;
  WeightSearchConfig vs_cfg;
  std::optional<std::string> vs_out;
  vs_gold.add(vs, "--gold", "labeled split");
  vs->add_option("--pred", vs_preds, "predictions JSONL, one file per model, in model order")->required()->check(CLI::ExistingFile);
  vs->add_option("--step", vs_cfg.step, "grid step")->capture_default_str();
  vs->add_option("--threshold", vs_cfg.threshold, "decision threshold")->capture_default_str();
  vs->add_option("--out", vs_out, "weights JSON (default: stdout)");

  // vote-apply
  auto* va = app.add_subcommand("vote-apply", "Fuse per-model predictions with searched weights");
  SplitArgs va_data;
  std::string va_weights;
  std::vector<std::string> va_preds;
  double va_threshold = 0.5;
  std::optional<std::string> va_out;
  va_data.add(va, "--data", "split the predictions cover");
  va->add_option("--weights", va_weights, "weights JSON from vote-search")->required()->check(CLI::ExistingFile);
  va->add_option("--pred", va_preds, "predictions JSONL, one file per model")->required()->check(CLI::ExistingFile);
  va->add_option("--threshold", va_threshold, "decision threshold")->capture_default_str();
  va->add_option("--out", va_out, "voted predictions JSONL (default: stdout)");

  // merge
  auto* mg = app.add_subcommand("merge", "Merge safetensors checkpoints (linear, slerp, ties)");
  std::string mg_method = "linear";
  MergeSpec mg_spec;
  std::vector<std::string> mg_inputs;
  std::optional<std::string> mg_base;
  std::string mg_out;
  mg->add_option("--method", mg_method, "linear, slerp or ties")->capture_default_str();
  mg->add_option("--input", mg_inputs, "input checkpoint (repeatable)")->required()->check(CLI::ExistingFile);
  mg->add_option("--weights", mg_spec.weights, "linear weights, one per input");
  mg->add_option("--t", mg_spec.t, "slerp interpolation factor");
  mg->add_option("--base", mg_base, "ties base checkpoint")->check(CLI::ExistingFile);
  mg->add_option("--density", mg_spec.density, "ties density")->capture_default_str();
  mg->add_option("--lambda", mg_spec.lambda, "ties scaling")->capture_default_str();
  mg->add_option("--out", mg_out, "output checkpoint")->required();

  // mock-serve
  auto* ms = app.add_subcommand("mock-serve", "Serve a deterministic OpenAI-compatible mock backend");
  std::string ms_mode = "oracle", ms_bind = "127.0.0.1";
  std::optional<std::string> ms_fixtures;
  double ms_acc = 1.0;
  std::uint64_t ms_seed = 0;
  int ms_port = 8000, ms_delay = 0;
  ms->add_option("--mode", ms_mode, "oracle or fixture")->capture_default_str();
  ms->add_option("--fixtures", ms_fixtures, "fixture file (prompt sha256 -> answer)")->check(CLI::ExistingFile);
  ms->add_option("--accuracy", ms_acc, "oracle accuracy")->capture_default_str();
  ms->add_option("--seed", ms_seed, "oracle seed")->capture_default_str();
  ms->add_option("--bind", ms_bind, "listen address")->capture_default_str();
  ms->add_option("--port", ms_port, "listen port (0 picks one)")->capture_default_str();
  ms->add_option("--delay-ms", ms_delay, "artificial latency per request")->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Run the full pipeline from a run configuration");
  std::string run_config;
  std::optional<std::size_t> run_conc;
  run->add_option("config", run_config, "run configuration (TOML)")->required()->check(CLI::ExistingFile);
  run->add_option("--concurrency", run_conc, "override run.concurrency");

  // synth
  auto* syn = app.add_subcommand("synth", "Write synthetic planted-label splits for the mock backend");
  SyntheticOptions syn_opts;
  std::string syn_out, syn_track = "agnostic";
  syn->add_option("--out-dir", syn_out, "output directory")->required();
  syn->add_option("--trial", syn_opts.trial)->capture_default_str();
  syn->add_option("--unlabeled", syn_opts.unlabeled)->capture_default_str();
  syn->add_option("--validation", syn_opts.validation)->capture_default_str();
  syn->add_option("--test", syn_opts.test)->capture_default_str();
  syn->add_option("--track", syn_track, "aware or agnostic")->capture_default_str();
  syn->add_option("--seed", syn_opts.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  try {
    if (*ingest) {
      auto split = ingest_split.load();
      print_split_summary(split);
      if (ingest_out) write_dataset(split, *ingest_out);
    } else if (*preview) {
      auto split = preview_split.load();
      if (split.points.empty()) throw ValidationError("split is empty");
      const DataPoint* p = preview_id.empty() ? &split.points.front() : split.find(preview_id);
      if (!p) throw ValidationError("no datapoint with id '" + preview_id + "'");
      auto demos = preview_prompt.demos();
      auto it = demos.find(p->task);
      std::vector<Demonstration> none;
      auto prompt = assemble_prompt(*p, it == demos.end() ? none : it->second, preview_prompt.config());
      std::cout << prompt.text << "\n";
    } else if (*infer) {
      auto split = infer_split.load();
      InferenceClient client(infer_ep.endpoint(), infer_conc);
      auto demos = infer_prompt.demos(&client);
      auto preds = predict_batch(split.points, demos, infer_prompt.config(), client, infer_params.p, infer_conc);
      emit(infer_out, predictions_to_jsonl(preds));
    } else if (*gen) {
      auto cfg = load_run_config(gen_config);
      const std::size_t conc = gen_conc.value_or(cfg.concurrency);
      auto trial = parse_dataset(cfg.paths.trial, SplitKind::trial, cfg.paths.parse);
      auto unlabeled = parse_dataset(cfg.paths.unlabeled, SplitKind::unlabeled_train, cfg.paths.parse);
      PromptConfig prompt{cfg.prompt.variant, cfg.prompt.shots, cfg.prompt.cot, cfg.seed("demos")};
      std::map<std::string, std::unique_ptr<InferenceClient>> owned;
      std::map<std::string, InferenceClient*> clients;
      for (const auto& e : cfg.endpoints) {
        owned[e.model_id] = std::make_unique<InferenceClient>(e, conc);
        clients[e.model_id] = owned[e.model_id].get();
      }
      auto demos = sample_demo_set(trial, prompt.shots, prompt.seed);
      if (prompt.cot) {
        const std::string rm = cfg.rationale_model.value_or(cfg.endpoints.front().model_id);
        const fs::path cache_path = fs::path(gen_out) / "rationales.json";
        auto cache = fs::exists(cache_path) ? RationaleCache::load(cache_path, rm) : RationaleCache(rm);
        for (auto& [task, list] : demos) {
          list = generate_rationales(std::move(list), *clients.at(rm), cache, prompt.variant,
                                     default_rationale_params());
        }
        cache.save(cache_path);
      }
      auto result = generate_weak_labels(unlabeled, cfg.consistency, demos, prompt, clients,
                                         cfg.seed("balance"), conc);
      write_weak_set(result.set, fs::path(gen_out) / "weak_labels.jsonl");
      std::cout << "points " << result.stats.points << ", consistent " << result.stats.kept_before_balance
                << ", after balancing " << result.stats.kept_after_balance << "\n";
    } else if (*sft) {
      auto v = parse_variant(sft_variant);
      if (!v) throw ValidationError("--variant must be naive or ours");
      auto set = read_weak_set(sft_in);
      std::string text;
      for (const auto& e : set.entries) text += sft_record(e, *v) + "\n";
      emit(sft_out, text);
    } else if (*ev) {
      auto gold = ev_gold.load();
      auto preds = read_predictions(ev_pred);
      auto r = report(preds, gold);
      std::cout << (ev_json ? to_json(r).dump(2) + "\n" : render_table(r));
    } else if (*vs) {
      auto gold = vs_gold.load();
      vs_cfg.validate();
      std::vector<std::vector<Prediction>> all;
      std::vector<std::string> order;
      for (const auto& f : vs_preds) {
        all.push_back(read_predictions(f));
        if (all.back().empty()) throw ValidationError(f + ": no predictions");
        order.push_back(all.back().front().model_id);
      }
      auto table = prob_table(all);
      std::map<Task, VoteWeights> weights;
      for (auto t : kAllTasks) weights[t] = search_weights(t, order, table, gold, vs_cfg);
      emit(vs_out, weights_to_json(weights).dump(2) + "\n");
    } else if (*va) {
      auto data = va_data.load();
      auto weights = weights_from_json(nlohmann::ordered_json::parse(read_file(va_weights)));
      std::vector<std::vector<Prediction>> all;
      std::vector<std::string> order;
      for (const auto& f : va_preds) {
        all.push_back(read_predictions(f));
        if (all.back().empty()) throw ValidationError(f + ": no predictions");
        order.push_back(all.back().front().model_id);
      }
      auto inputs = vote_inputs(data.points, prob_table(all), order);
      std::vector<Prediction> out;
      for (const auto& v : apply_voting(weights, inputs, va_threshold)) out.push_back(to_prediction(v));
      emit(va_out, predictions_to_jsonl(out));
    } else if (*mg) {
      auto m = parse_merge_method(mg_method);
      if (!m) throw ValidationError("--method must be linear, slerp or ties");
      mg_spec.method = *m;
      for (const auto& f : mg_inputs) mg_spec.inputs.emplace_back(f);
      if (mg_base) mg_spec.base = fs::path(*mg_base);
      save_checkpoint(merge(mg_spec), mg_out);
    } else if (*ms) {
      MockRule rule;
      if (ms_mode == "oracle") {
        rule.mode = MockRule::Mode::oracle;
      } else if (ms_mode == "fixture") {
        rule.mode = MockRule::Mode::fixture;
        if (!ms_fixtures) throw ValidationError("--fixtures is required in fixture mode");
      } else {
        throw ValidationError("--mode must be oracle or fixture");
      }
      if (ms_fixtures) rule.fixtures = load_fixtures(*ms_fixtures);
      rule.oracle_accuracy = ms_acc;
      rule.oracle_seed = ms_seed;
      rule.validate();
      MockServer server(rule, std::chrono::milliseconds(ms_delay));
      server.start(ms_bind, ms_port);
      std::cerr << "listening on " << server.base_url() << "\n";
      server.wait();
    } else if (*run) {
      PipelineOptions opts;
      opts.concurrency = run_conc;
      opts.progress = [](const std::string& msg) { std::cerr << msg << "\n"; };
      auto result = run_pipeline(fs::path(run_config), opts);
      std::cout << result.run_dir.string() << "\n";
    } else if (*syn) {
      auto t = parse_track(syn_track);
      if (!t) throw ValidationError("--track must be aware or agnostic");
      syn_opts.track = *t;
      write_synthetic(make_synthetic(syn_opts), syn_out);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const EndpointError& e) {
    std::cerr << "endpoint error: " << e.what() << "\n";
    return kEndpoint;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
