#include "halludet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "halludet/error.hpp"

namespace halludet {

namespace {

std::unordered_map<std::string, const DataPoint*> index_gold(const Split& gold) {
  std::unordered_map<std::string, const DataPoint*> idx;
  idx.reserve(gold.points.size());
  for (const auto& p : gold.points) idx.emplace(p.id, &p);
  return idx;
}

}  // namespace

double accuracy(std::span<const LabeledId> preds, const Split& gold) {
  if (preds.empty()) throw ValidationError("accuracy is undefined for an empty prediction set");
  auto idx = index_gold(gold);
  std::size_t correct = 0;
  for (const auto& [id, label] : preds) {
    auto it = idx.find(id);
    if (it == idx.end()) throw ValidationError("prediction for unknown point id '" + id + "'");
    if (!it->second->gold_label) throw ValidationError("gold point '" + id + "' has no label");
    if (label && *label == *it->second->gold_label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("correlation inputs differ in length");
  if (x.size() < 2) throw ValidationError("correlation needs at least two pairs");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("correlation undefined for a constant vector");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman_rho(std::span<const double> pred_p, std::span<const double> gold_p) {
  if (pred_p.size() != gold_p.size()) {
    throw ValidationError("spearman_rho: length mismatch (" + std::to_string(pred_p.size()) +
                          " vs " + std::to_string(gold_p.size()) + ")");
  }
  if (pred_p.size() < 2) throw ValidationError("spearman_rho: need at least two pairs");
  auto rx = average_ranks(pred_p);
  auto ry = average_ranks(gold_p);
  return pearson(rx, ry);
}

namespace {

struct Bucket {
  std::vector<LabeledId> labels;
  std::vector<double> pred_p;
  std::vector<double> gold_p;
};

TaskMetrics finish(const Bucket& b, const Split& gold) {
  TaskMetrics m;
  m.n = b.labels.size();
  if (m.n == 0) return m;
  m.accuracy = accuracy(b.labels, gold);
  if (b.gold_p.size() == m.n) {
    try {
      m.rho = spearman_rho(b.pred_p, b.gold_p);
    } catch (const ValidationError&) {
      m.rho.reset();
    }
  }
  return m;
}

}  // namespace

EvalReport report(std::span<const Prediction> preds, const Split& gold) {
  if (preds.empty()) throw ValidationError("cannot evaluate an empty prediction set");
  auto idx = index_gold(gold);
  Bucket all;
  std::map<Task, Bucket> by_task;
  std::optional<Track> track;
  for (const auto& p : preds) {
    auto it = idx.find(p.point_id);
    if (it == idx.end()) throw ValidationError("prediction for unknown point id '" + p.point_id + "'");
    const DataPoint& g = *it->second;
    if (!track) {
      track = g.track;
    } else if (*track != g.track) {
      throw ValidationError("gold split mixes model-aware and model-agnostic points");
    }
    const double pp = p.decided() ? p.p_halluc : 0.5;
    for (Bucket* b : {&all, &by_task[g.task]}) {
      b->labels.emplace_back(p.point_id, p.label);
      b->pred_p.push_back(pp);
      if (g.gold_p) b->gold_p.push_back(*g.gold_p);
    }
  }
  EvalReport r;
  r.track = *track;
  auto overall = finish(all, gold);
  r.n = overall.n;
  r.accuracy = overall.accuracy;
  r.rho = overall.rho;
  for (auto t : kAllTasks) {
    auto it = by_task.find(t);
    r.per_task[t] = it == by_task.end() ? TaskMetrics{} : finish(it->second, gold);
  }
  return r;
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["track"] = to_string(r.track);
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["rho"] = opt(r.rho);
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [t, m] : r.per_task) {
    per[std::string(to_string(t))] = {{"n", m.n}, {"accuracy", m.accuracy}, {"rho", opt(m.rho)}};
  }
  j["per_task"] = std::move(per);
  return j;
}

namespace {

std::string fmt3(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << *v;
  return os.str();
}

}  // namespace

std::string render_table(const EvalReport& r, const std::string& title) {
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  os << std::left << std::setw(8) << "task" << std::right << std::setw(7) << "n" << std::setw(9)
     << "acc" << std::setw(9) << "rho" << '\n';
  for (const auto& [t, m] : r.per_task) {
    if (m.n == 0) continue;
    os << std::left << std::setw(8) << to_string(t) << std::right << std::setw(7) << m.n
       << std::setw(9) << fmt3(m.accuracy) << std::setw(9) << fmt3(m.rho) << '\n';
  }
  os << std::left << std::setw(8) << "all" << std::right << std::setw(7) << r.n << std::setw(9)
     << fmt3(r.accuracy) << std::setw(9) << fmt3(r.rho) << '\n';
  return os.str();
}

std::string render_comparison(std::span<const ComparisonRow> rows) {
  std::size_t width = 5;
  for (const auto& row : rows) width = std::max(width, row.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width + 2)) << "name" << std::right << std::setw(9)
     << "track" << std::setw(7) << "n" << std::setw(9) << "acc" << std::setw(9) << "rho" << '\n';
  for (const auto& row : rows) {
    os << std::left << std::setw(static_cast<int>(width + 2)) << row.name << std::right
       << std::setw(9) << to_string(row.report.track) << std::setw(7) << row.report.n
       << std::setw(9) << fmt3(row.report.accuracy) << std::setw(9) << fmt3(row.report.rho)
       << '\n';
  }
  return os.str();
}

}  // namespace halludet
