#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/inference.hpp"

namespace halludet {

using LabeledId = std::pair<std::string, std::optional<Label>>;  // absent label: undecided

// Fraction of exact matches against gold; undecided counts as wrong.
double accuracy(std::span<const LabeledId> preds, const Split& gold);

// Average ranks (ties share the mean of their positions), 1-based.
std::vector<double> average_ranks(std::span<const double> values);
double pearson(std::span<const double> x, std::span<const double> y);
double spearman_rho(std::span<const double> pred_p, std::span<const double> gold_p);

struct TaskMetrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  std::optional<double> rho;  // absent when undefined (constant input or n < 2)
};

struct EvalReport {
  Track track = Track::agnostic;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::optional<double> rho;
  std::map<Task, TaskMetrics> per_task;
};

// Undecided predictions score as wrong and enter rho with p = 0.5.
EvalReport report(std::span<const Prediction> preds, const Split& gold);

nlohmann::ordered_json to_json(const EvalReport& r);
// Aligned plain-text table, one row per task plus the pooled row.
std::string render_table(const EvalReport& r, const std::string& title = {});

struct ComparisonRow {
  std::string name;
  EvalReport report;
};
std::string render_comparison(std::span<const ComparisonRow> rows);

}  // namespace halludet
