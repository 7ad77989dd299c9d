#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "halludet/data.hpp"
#include "halludet/inference.hpp"

namespace halludet {

// Weights in model order; they sum to 1.
struct VoteWeights {
  Task task = Task::DM;
  std::vector<std::pair<std::string, double>> weights;

  void validate() const;
  double weight(const std::string& model) const;
  bool operator==(const VoteWeights&) const = default;
};

struct WeightSearchConfig {
  double step = 0.05;
  double threshold = 0.5;

  void validate() const;
  int divisions() const;  // 1 / step
};

using ModelProbs = std::map<std::string, double>;

// sum_m w_m * p_m, accumulated in weight order.
double fuse(const ModelProbs& p, const VoteWeights& w);

// model -> (point id -> p_halluc)
using ProbTable = std::map<std::string, std::map<std::string, double>>;

// Builds a ProbTable from prediction dumps; undecided predictions enter as 0.5.
ProbTable prob_table(std::span<const std::vector<Prediction>> per_model);

// Every nonnegative composition of 1 in units of `step`, in lexicographic
// order. Exposed so tests can enumerate the same grid independently.
std::vector<std::vector<int>> simplex_grid(std::size_t models, int divisions);

// Exhaustive grid search for the fused accuracy maximiser on `task`'s gold points.
// Ties go to the lexicographically smallest weight vector under `model_order`.
VoteWeights search_weights(Task task, const std::vector<std::string>& model_order,
                           const ProbTable& preds, const Split& gold,
                           const WeightSearchConfig& cfg);

// Thresholded accuracy of one model (or fused weights) on a task's gold points.
double thresholded_accuracy(Task task, const VoteWeights& w, const ProbTable& preds,
                            const Split& gold, double threshold);

struct VotedPoint {
  std::string point_id;
  Label label = Label::NotHallucination;
  double fused_p = 0.0;
};

struct VoteInput {
  std::string point_id;
  Task task = Task::DM;
  ModelProbs probs;
};

std::vector<VotedPoint> apply_voting(const std::map<Task, VoteWeights>& per_task,
                                     std::span<const VoteInput> preds, double threshold);

// Joins a ProbTable with the points it covers, in point order.
std::vector<VoteInput> vote_inputs(std::span<const DataPoint> points, const ProbTable& preds,
                                   const std::vector<std::string>& model_order);

nlohmann::ordered_json weights_to_json(const std::map<Task, VoteWeights>& per_task);
std::map<Task, VoteWeights> weights_from_json(const nlohmann::ordered_json& j);

// VotedPoint as a Prediction row (model id "vote"), for eval and dumps.
Prediction to_prediction(const VotedPoint& v);

}  // namespace halludet
