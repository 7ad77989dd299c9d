#include "halludet/vote.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "halludet/error.hpp"

namespace halludet {

void VoteWeights::validate() const {
  if (weights.empty()) throw ValidationError("vote weights are empty");
  double sum = 0.0;
  std::set<std::string> seen;
  for (const auto& [m, w] : weights) {
    if (!seen.insert(m).second) throw ValidationError("vote weights repeat model '" + m + "'");
    if (!(w >= 0.0)) throw ValidationError("vote weight for '" + m + "' is negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("vote weights for task " + std::string(to_string(task)) +
                          " sum to " + std::to_string(sum) + ", not 1");
  }
}

double VoteWeights::weight(const std::string& model) const {
  for (const auto& [m, w] : weights) {
    if (m == model) return w;
  }
  throw ValidationError("no vote weight for model '" + model + "'");
}

void WeightSearchConfig::validate() const {
  if (!(step > 0.0 && step <= 1.0)) throw ValidationError("vote step must lie in (0, 1]");
  const double inv = 1.0 / step;
  if (std::abs(inv - std::round(inv)) > 1e-9 * std::max(1.0, inv)) {
    throw ValidationError("vote step must divide 1 evenly");
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("vote threshold must lie in [0, 1]");
}

int WeightSearchConfig::divisions() const { return static_cast<int>(std::lround(1.0 / step)); }

double fuse(const ModelProbs& p, const VoteWeights& w) {
  if (p.size() != w.weights.size()) throw ValidationError("fuse: model sets differ");
  double acc = 0.0;
  for (const auto& [m, weight] : w.weights) {
    auto it = p.find(m);
    if (it == p.end()) throw ValidationError("fuse: no probability for model '" + m + "'");
    acc += weight * it->second;
  }
  return std::clamp(acc, 0.0, 1.0);
}

ProbTable prob_table(std::span<const std::vector<Prediction>> per_model) {
  ProbTable t;
  for (const auto& preds : per_model) {
    for (const auto& p : preds) t[p.model_id][p.point_id] = p.decided() ? p.p_halluc : 0.5;
  }
  return t;
}

std::vector<std::vector<int>> simplex_grid(std::size_t models, int divisions) {
  std::vector<std::vector<int>> out;
  if (models == 0) return out;
  std::vector<int> cur(models, 0);
  // Lexicographic: the first coordinate varies slowest, ascending.
  auto rec = [&](auto&& self, std::size_t i, int left) -> void {
    if (i + 1 == models) {
      cur[i] = left;
      out.push_back(cur);
      return;
    }
    for (int c = 0; c <= left; ++c) {
      cur[i] = c;
      self(self, i + 1, left - c);
    }
  };
  rec(rec, 0, divisions);
  return out;
}

namespace {

struct TaskColumn {
  std::vector<std::vector<double>> probs;  // [point][model]
  std::vector<Label> gold;
};

TaskColumn collect(Task task, const std::vector<std::string>& models, const ProbTable& preds,
                   const Split& gold) {
  TaskColumn col;
  for (const auto& m : models) {
    if (!preds.count(m)) throw ValidationError("no predictions for model '" + m + "'");
  }
  for (const auto& p : gold.points) {
    if (p.task != task) continue;
    if (!p.gold_label) throw ValidationError("gold point '" + p.id + "' has no label");
    std::vector<double> row;
    row.reserve(models.size());
    for (const auto& m : models) {
      const auto& table = preds.at(m);
      auto it = table.find(p.id);
      if (it == table.end()) {
        throw ValidationError("model '" + m + "' has no prediction for point '" + p.id + "'");
      }
      row.push_back(it->second);
    }
    col.probs.push_back(std::move(row));
    col.gold.push_back(*p.gold_label);
  }
  return col;
}

VoteWeights to_weights(Task task, const std::vector<std::string>& models,
                       const std::vector<int>& counts, int divisions) {
  VoteWeights w;
  w.task = task;
  for (std::size_t i = 0; i < models.size(); ++i) {
    w.weights.emplace_back(models[i], static_cast<double>(counts[i]) / divisions);
  }
  return w;
}

std::size_t count_correct(const TaskColumn& col, const std::vector<double>& w, double threshold) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < col.probs.size(); ++i) {
    double f = 0.0;
    for (std::size_t m = 0; m < w.size(); ++m) f += w[m] * col.probs[i][m];
    f = std::clamp(f, 0.0, 1.0);
    const Label l = f > threshold ? Label::Hallucination : Label::NotHallucination;
    if (l == col.gold[i]) ++correct;
  }
  return correct;
}

}  // namespace

VoteWeights search_weights(Task task, const std::vector<std::string>& model_order,
                           const ProbTable& preds, const Split& gold,
                           const WeightSearchConfig& cfg) {
  cfg.validate();
  if (model_order.empty()) throw ValidationError("weight search needs at least one model");
  const auto col = collect(task, model_order, preds, gold);
  const int divisions = cfg.divisions();
  const auto grid = simplex_grid(model_order.size(), divisions);

  std::size_t best_correct = 0;
  const std::vector<int>* best = nullptr;
  std::vector<double> w(model_order.size());
  for (const auto& counts : grid) {
    for (std::size_t m = 0; m < counts.size(); ++m) {
      w[m] = static_cast<double>(counts[m]) / divisions;
    }
    const auto correct = count_correct(col, w, cfg.threshold);
    // Grid is in ascending lexicographic order, so strict > keeps the smallest maximiser.
    if (!best || correct > best_correct) {
      best_correct = correct;
      best = &counts;
    }
  }
  return to_weights(task, model_order, *best, divisions);
}

double thresholded_accuracy(Task task, const VoteWeights& w, const ProbTable& preds,
                            const Split& gold, double threshold) {
  std::vector<std::string> models;
  std::vector<double> ws;
  for (const auto& [m, x] : w.weights) {
    models.push_back(m);
    ws.push_back(x);
  }
  const auto col = collect(task, models, preds, gold);
  if (col.gold.empty()) throw ValidationError("no gold points for task " + std::string(to_string(task)));
  return static_cast<double>(count_correct(col, ws, threshold)) / static_cast<double>(col.gold.size());
}

std::vector<VotedPoint> apply_voting(const std::map<Task, VoteWeights>& per_task,
                                     std::span<const VoteInput> preds, double threshold) {
  std::vector<VotedPoint> out;
  out.reserve(preds.size());
  for (const auto& in : preds) {
    auto it = per_task.find(in.task);
    if (it == per_task.end()) {
      throw ValidationError("no vote weights for task " + std::string(to_string(in.task)));
    }
    const double f = fuse(in.probs, it->second);
    out.push_back({in.point_id, f > threshold ? Label::Hallucination : Label::NotHallucination, f});
  }
  return out;
}

std::vector<VoteInput> vote_inputs(std::span<const DataPoint> points, const ProbTable& preds,
                                   const std::vector<std::string>& model_order) {
  std::vector<VoteInput> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    VoteInput in{p.id, p.task, {}};
    for (const auto& m : model_order) {
      auto mt = preds.find(m);
      if (mt == preds.end()) throw ValidationError("no predictions for model '" + m + "'");
      auto it = mt->second.find(p.id);
      if (it == mt->second.end()) {
        throw ValidationError("model '" + m + "' has no prediction for point '" + p.id + "'");
      }
      in.probs[m] = it->second;
    }
    out.push_back(std::move(in));
  }
  return out;
}

nlohmann::ordered_json weights_to_json(const std::map<Task, VoteWeights>& per_task) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [t, w] : per_task) {
    nlohmann::ordered_json ws = nlohmann::ordered_json::object();
    for (const auto& [m, x] : w.weights) ws[m] = x;
    j[std::string(to_string(t))] = std::move(ws);
  }
  return j;
}

std::map<Task, VoteWeights> weights_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ValidationError("vote weights must be a JSON object keyed by task");
  std::map<Task, VoteWeights> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto task = parse_task(it.key());
    if (!task) throw ValidationError("vote weights: unknown task '" + it.key() + "'");
    if (!it.value().is_object()) throw ValidationError("vote weights: task entry must be an object");
    VoteWeights w;
    w.task = *task;
    for (auto m = it.value().begin(); m != it.value().end(); ++m) {
      if (!m.value().is_number()) throw ValidationError("vote weights: weight must be a number");
      w.weights.emplace_back(m.key(), m.value().get<double>());
    }
    w.validate();
    out[*task] = std::move(w);
  }
  return out;
}

Prediction to_prediction(const VotedPoint& v) {
  Prediction p;
  p.point_id = v.point_id;
  p.model_id = "vote";
  p.params_id = "fused";
  p.label = v.label;
  p.p_halluc = v.fused_p;
  return p;
}

}  // namespace halludet
