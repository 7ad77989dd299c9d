#include "halludet/pipeline.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <set>

#include "halludet/error.hpp"
#include "halludet/eval.hpp"
#include "halludet/hash.hpp"
#include "halludet/inference.hpp"
#include "halludet/log.hpp"
#include "halludet/prompt.hpp"
#include "halludet/vote.hpp"
#include "halludet/weak_label.hpp"

namespace halludet {

namespace fs = std::filesystem;
using oj = nlohmann::ordered_json;

namespace {

std::string dump(const oj& j) { return j.dump(2) + "\n"; }

// Collects the files a stage writes so stage.json can pin their hashes.
class StageWriter {
 public:
  explicit StageWriter(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  void write(const std::string& rel, std::string_view contents) {
    write_file(dir_ / rel, contents);
    files_[rel] = sha256_hex(contents);
  }

  void finish(const std::string& stage, const std::string& fingerprint) const {
    oj j;
    j["stage"] = stage;
    j["fingerprint"] = fingerprint;
    j["files"] = files_;
    write_file(dir_ / "stage.json", dump(j));
  }

 private:
  fs::path dir_;
  std::map<std::string, std::string> files_;
};

// Hash of stage.json when the stage is complete and intact, else nullopt.
std::optional<std::string> completed_stage(const fs::path& dir, const std::string& fingerprint) {
  const auto marker = dir / "stage.json";
  if (!fs::exists(marker)) return std::nullopt;
  try {
    auto text = read_file(marker);
    auto j = nlohmann::json::parse(text);
    if (j.value("fingerprint", std::string()) != fingerprint) return std::nullopt;
    for (const auto& [rel, hash] : j.at("files").items()) {
      const auto path = dir / rel;
      if (!fs::is_regular_file(path) || sha256_file_hex(path) != hash.get<std::string>()) {
        return std::nullopt;
      }
    }
    return sha256_hex(text);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

oj demos_to_json(const DemoSet& demos) {
  oj j = oj::object();
  for (const auto& [task, list] : demos) {
    oj arr = oj::array();
    for (const auto& d : list) {
      oj e;
      e["id"] = d.point.id;
      e["label"] = to_string(d.label);
      e["rationale"] = d.rationale ? oj(*d.rationale) : oj(nullptr);
      arr.push_back(std::move(e));
    }
    j[std::string(to_string(task))] = std::move(arr);
  }
  return j;
}

DemoSet demos_from_json(const nlohmann::json& j, const Split& trial) {
  DemoSet out;
  for (const auto& [key, arr] : j.items()) {
    auto task = parse_task(key);
    if (!task) throw ValidationError("demos.json: unknown task '" + key + "'");
    auto& list = out[*task];
    for (const auto& e : arr) {
      const auto id = e.at("id").get<std::string>();
      const DataPoint* p = trial.find(id);
      if (!p) throw ValidationError("demos.json: demo '" + id + "' is not in the trial split");
      Demonstration d;
      d.point = *p;
      auto label = parse_label(e.at("label").get<std::string>());
      if (!label) throw ValidationError("demos.json: bad label for demo '" + id + "'");
      d.label = *label;
      if (!e.at("rationale").is_null()) d.rationale = e.at("rationale").get<std::string>();
      list.push_back(std::move(d));
    }
  }
  return out;
}

struct Selected {
  PromptConfig prompt;
  std::string model;
};

class Runner {
 public:
  Runner(const RunConfig& cfg, const PipelineOptions& opts)
      : cfg_(cfg), opts_(opts), concurrency_(opts.concurrency.value_or(cfg.concurrency)) {
    if (concurrency_ == 0) throw ValidationError("concurrency must be positive");
    for (const auto& e : cfg.endpoints) {
      clients_[e.model_id] = std::make_unique<InferenceClient>(e, concurrency_);
    }
  }

  PipelineResult run() {
    PipelineResult result;
    result.fingerprint = cfg_.fingerprint();
    result.run_dir = cfg_.paths.run_root / result.fingerprint;
    run_dir_ = result.run_dir;

    load_splits();

    using StageFn = void (Runner::*)(StageWriter&);
    const std::array<StageFn, kStages.size()> fns = {&Runner::baseline, &Runner::prompt_sweep,
                                                     &Runner::weak_labels, &Runner::vote,
                                                     &Runner::final_eval};
    std::string chain = result.fingerprint;
    for (std::size_t i = 0; i < kStages.size(); ++i) {
      const std::string name(kStages[i]);
      const std::string fp = sha256_hex(chain + "|" + name).substr(0, 16);
      const fs::path dir = run_dir_ / name;
      StageOutcome outcome{name, fp, false};
      if (auto marker_hash = completed_stage(dir, fp)) {
        outcome.resumed = true;
        chain = fp + "|" + *marker_hash;
        say(name + ": up to date, skipped");
      } else {
        say(name + ": running");
        fs::remove_all(dir);
        StageWriter w(dir);
        run_stage(name, [&] { (this->*fns[i])(w); });
        w.finish(name, fp);
        chain = fp + "|" + sha256_file_hex(dir / "stage.json");
      }
      result.stages.push_back(outcome);
    }
    write_manifest(result);
    for (const auto& [_, c] : clients_) result.endpoint_attempts += c->attempts();
    return result;
  }

 private:
  void say(const std::string& msg) const {
    if (opts_.progress) opts_.progress(msg);
  }

  template <typename F>
  void run_stage(const std::string& name, F&& body) {
    const std::string prefix = "stage " + name + ": ";
    try {
      body();
    } catch (const ParseError& e) {
      throw ParseError(prefix + e.what(), e.byte_offset());
    } catch (const ValidationError& e) {
      throw ValidationError(prefix + e.what());
    } catch (const EndpointError& e) {
      throw EndpointError(prefix + e.what(), e.http_status());
    } catch (const std::exception& e) {
      throw std::runtime_error(prefix + e.what());
    }
  }

  void load_splits() {
    trial_ = parse_dataset(cfg_.paths.trial, SplitKind::trial, cfg_.paths.parse);
    unlabeled_ = parse_dataset(cfg_.paths.unlabeled, SplitKind::unlabeled_train, cfg_.paths.parse);
    validation_ = parse_dataset(cfg_.paths.validation, SplitKind::validation, cfg_.paths.parse);
    if (cfg_.paths.test) test_ = parse_dataset(*cfg_.paths.test, SplitKind::test, cfg_.paths.parse);
  }

  InferenceClient& client(const std::string& model) { return *clients_.at(model); }

  std::uint64_t demo_seed() const { return cfg_.seed("demos"); }

  // Stage 1: naive zero-shot prompt on every baseline model.
  void baseline(StageWriter& w) {
    const PromptConfig prompt{InstructionVariant::naive, 0, false, demo_seed()};
    const auto& params = cfg_.params(cfg_.baseline_params);
    std::vector<ComparisonRow> rows;
    oj reports = oj::object();
    std::string best;
    double best_acc = -1.0;
    for (const auto& m : cfg_.baseline_models) {
      auto preds = predict_batch(validation_.points, DemoSet{}, prompt, client(m), params, concurrency_);
      w.write("predictions/" + m + ".jsonl", predictions_to_jsonl(preds));
      auto r = report(preds, validation_);
      reports[m] = to_json(r);
      rows.push_back({m, r});
      if (r.accuracy > best_acc) {
        best_acc = r.accuracy;
        best = m;
      }
    }
    oj summary;
    summary["prompt"] = {{"variant", "naive"}, {"shots", 0}, {"cot", false}};
    summary["params"] = params.id;
    summary["reports"] = reports;
    summary["best_model"] = best;
    w.write("report.json", dump(summary));
    w.write("table.txt", render_comparison(rows));
  }

  std::string best_baseline_model() const {
    auto j = nlohmann::json::parse(read_file(run_dir_ / "baseline" / "report.json"));
    return j.at("best_model").get<std::string>();
  }

  // Stage 2: prompt variants, shot counts and CoT on one model.
  void prompt_sweep(StageWriter& w) {
    const std::string model = cfg_.sweep_model.value_or(best_baseline_model());
    const std::string rationale_model = cfg_.rationale_model.value_or(model);
    RationaleCache cache(rationale_model);
    bool used_cache = false;

    std::vector<ComparisonRow> rows;
    oj results = oj::array();
    std::optional<std::size_t> best;
    double best_acc = -1.0;
    std::vector<DemoSet> demo_sets;
    for (const auto& c : cfg_.sweep) {
      const PromptConfig prompt{c.variant, c.shots, c.cot, demo_seed()};
      const auto& params = cfg_.params(c.cot && cfg_.cot_params ? *cfg_.cot_params : cfg_.sweep_params);
      DemoSet demos = sample_demo_set(trial_, c.shots, demo_seed());
      if (c.cot) {
        used_cache = true;
        for (auto& [task, list] : demos) {
          list = generate_rationales(std::move(list), client(rationale_model), cache, c.variant,
                                     default_rationale_params());
        }
      }
      auto preds = predict_batch(validation_.points, demos, prompt, client(model), params, concurrency_);
      w.write("predictions/" + c.name() + ".jsonl", predictions_to_jsonl(preds));
      auto r = report(preds, validation_);
      rows.push_back({c.name(), r});
      results.push_back({{"name", c.name()}, {"params", params.id}, {"report", to_json(r)}});
      if (r.accuracy > best_acc) {
        best_acc = r.accuracy;
        best = demo_sets.size();
      }
      demo_sets.push_back(std::move(demos));
    }
    if (used_cache) w.write("rationales.json", cache.to_json_text());

    const auto& chosen = cfg_.sweep[*best];
    oj selected;
    selected["name"] = chosen.name();
    selected["model"] = model;
    selected["variant"] = to_string(chosen.variant);
    selected["shots"] = chosen.shots;
    selected["cot"] = chosen.cot;
    selected["seed"] = demo_seed();
    selected["accuracy"] = best_acc;
    w.write("selected.json", dump(selected));
    w.write("demos.json", dump(demos_to_json(demo_sets[*best])));
    w.write("results.json", dump(results));
    w.write("table.txt", render_comparison(rows));
  }

  Selected selected() const {
    auto j = nlohmann::json::parse(read_file(run_dir_ / "prompt_sweep" / "selected.json"));
    Selected s;
    s.model = j.at("model").get<std::string>();
    s.prompt.variant = *parse_variant(j.at("variant").get<std::string>());
    s.prompt.shots = j.at("shots").get<int>();
    s.prompt.cot = j.at("cot").get<bool>();
    s.prompt.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }

  DemoSet selected_demos() const {
    return demos_from_json(nlohmann::json::parse(read_file(run_dir_ / "prompt_sweep" / "demos.json")), trial_);
  }

  std::map<std::string, InferenceClient*> client_ptrs() {
    std::map<std::string, InferenceClient*> out;
    for (auto& [id, c] : clients_) out[id] = c.get();
    return out;
  }

  // Stage 3: consistency-filtered weak labels and the SFT export.
  void weak_labels(StageWriter& w) {
    const auto sel = selected();
    const auto demos = selected_demos();
    auto run = generate_weak_labels(unlabeled_, cfg_.consistency, demos, sel.prompt, client_ptrs(),
                                    cfg_.seed("balance"), concurrency_);
    for (const auto& [model, by_params] : run.predictions) {
      for (const auto& [pid, preds] : by_params) {
        w.write("predictions/" + model + "__" + pid + ".jsonl", predictions_to_jsonl(preds));
      }
    }
    w.write("weak_labels.jsonl", weak_set_to_jsonl(run.set));
    std::string sft;
    for (const auto& e : run.set.entries) sft += sft_record(e, sel.prompt.variant) + "\n";
    w.write("sft.jsonl", sft);

    std::size_t h = 0;
    for (const auto& e : run.set.entries) h += e.label == Label::Hallucination;
    oj stats;
    stats["points"] = run.stats.points;
    stats["kept_before_balance"] = run.stats.kept_before_balance;
    stats["kept_after_balance"] = run.stats.kept_after_balance;
    stats["hallucination"] = h;
    stats["not_hallucination"] = run.set.entries.size() - h;
    w.write("stats.json", dump(stats));

    oj training;
    training["dataset"] = "sft.jsonl";
    training["records"] = run.set.entries.size();
    training["settings"] = cfg_.training;
    w.write("training.json", dump(training));
  }

  // Stage 4: per-task weight search over the vote models on validation.
  void vote(StageWriter& w) {
    const auto sel = selected();
    const auto demos = selected_demos();
    const auto& params = cfg_.params(cfg_.vote_params);
    std::vector<std::vector<Prediction>> all;
    for (const auto& m : cfg_.vote_models) {
      auto preds = predict_batch(validation_.points, demos, sel.prompt, client(m), params, concurrency_);
      w.write("predictions/" + m + ".jsonl", predictions_to_jsonl(preds));
      all.push_back(std::move(preds));
    }
    const auto table = prob_table(all);
    std::map<Task, VoteWeights> weights;
    oj accs = oj::object();
    for (auto task : kAllTasks) {
      auto wt = search_weights(task, cfg_.vote_models, table, validation_, cfg_.vote);
      oj row = oj::object();
      for (const auto& m : cfg_.vote_models) {
        VoteWeights one{task, {}};
        for (const auto& n : cfg_.vote_models) one.weights.emplace_back(n, n == m ? 1.0 : 0.0);
        row[m] = thresholded_accuracy(task, one, table, validation_, cfg_.vote.threshold);
      }
      row["vote"] = thresholded_accuracy(task, wt, table, validation_, cfg_.vote.threshold);
      accs[std::string(to_string(task))] = std::move(row);
      weights[task] = std::move(wt);
    }
    w.write("weights.json", dump(weights_to_json(weights)));
    w.write("accuracy.json", dump(accs));
  }

  std::vector<Prediction> voted(const Split& split, const std::vector<std::vector<Prediction>>& per_model,
                                const std::map<Task, VoteWeights>& weights) const {
    const auto table = prob_table(per_model);
    const auto inputs = vote_inputs(split.points, table, cfg_.vote_models);
    std::vector<Prediction> out;
    for (const auto& v : apply_voting(weights, inputs, cfg_.vote.threshold)) out.push_back(to_prediction(v));
    return out;
  }

  // Stage 5: voted validation report and, when a test split is configured,
  // voted test predictions.
  void final_eval(StageWriter& w) {
    const auto weights = weights_from_json(oj::parse(read_file(run_dir_ / "vote" / "weights.json")));
    std::vector<std::vector<Prediction>> val_preds;
    std::vector<ComparisonRow> rows;
    for (const auto& m : cfg_.vote_models) {
      val_preds.push_back(read_predictions(run_dir_ / "vote" / "predictions" / (m + ".jsonl")));
      rows.push_back({m, report(val_preds.back(), validation_)});
    }
    auto fused = voted(validation_, val_preds, weights);
    auto r = report(fused, validation_);
    rows.push_back({"vote", r});
    w.write("voted_validation.jsonl", predictions_to_jsonl(fused));

    oj summary;
    summary["validation"] = to_json(r);

    if (test_) {
      const auto sel = selected();
      const auto demos = selected_demos();
      const auto& params = cfg_.params(cfg_.vote_params);
      std::vector<std::vector<Prediction>> test_preds;
      for (const auto& m : cfg_.vote_models) {
        test_preds.push_back(
            predict_batch(test_->points, demos, sel.prompt, client(m), params, concurrency_));
        w.write("test/predictions/" + m + ".jsonl", predictions_to_jsonl(test_preds.back()));
      }
      auto fused_test = voted(*test_, test_preds, weights);
      w.write("voted_test.jsonl", predictions_to_jsonl(fused_test));
      const bool labeled = std::all_of(test_->points.begin(), test_->points.end(),
                                       [](const DataPoint& p) { return p.gold_label.has_value(); });
      if (labeled && !test_->points.empty()) {
        auto rt = report(fused_test, *test_);
        summary["test"] = to_json(rt);
        w.write("report_test.txt", render_table(rt, "vote (test)"));
      } else {
        summary["test"] = nullptr;
      }
    }
    w.write("report.json", dump(summary));
    w.write("report.txt", render_comparison(rows));
  }

  void write_manifest(const PipelineResult& result) const {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir_)) {
      if (!entry.is_regular_file()) continue;
      auto rel = fs::relative(entry.path(), run_dir_).generic_string();
      if (rel == "manifest.json") continue;
      files[rel] = sha256_file_hex(entry.path());
    }
    oj j;
    j["fingerprint"] = result.fingerprint;
    oj stages = oj::array();
    for (const auto& s : result.stages) stages.push_back({{"name", s.name}, {"fingerprint", s.fingerprint}});
    j["stages"] = stages;
    j["config"] = cfg_.semantic_json();
    j["files"] = files;
    write_file(run_dir_ / "manifest.json", dump(j));
  }

  const RunConfig& cfg_;
  const PipelineOptions& opts_;
  std::size_t concurrency_;
  std::map<std::string, std::unique_ptr<InferenceClient>> clients_;
  fs::path run_dir_;
  Split trial_, unlabeled_, validation_;
  std::optional<Split> test_;
};

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts) {
  cfg.validate();
  return Runner(cfg, opts).run();
}

PipelineResult run_pipeline(const fs::path& config_path, const PipelineOptions& opts) {
  return run_pipeline(load_run_config(config_path), opts);
}

}  // namespace halludet
