#include "halludet/merge.hpp"

#include <nlohmann/json.hpp>

#include "halludet/error.hpp"

namespace halludet {

void check_same_schema(const TensorCheckpoint& reference, const TensorCheckpoint& other,
                       const std::string& other_label) {
  auto a = reference.tensors.begin();
  auto b = other.tensors.begin();
  for (; a != reference.tensors.end() && b != other.tensors.end(); ++a, ++b) {
    if (a->first != b->first) {
      throw ValidationError("schema mismatch in " + other_label + ": expected tensor '" + a->first +
                            "', found '" + b->first + "'");
    }
    if (a->second.shape != b->second.shape) {
      throw ValidationError("schema mismatch in " + other_label + ": tensor '" + a->first +
                            "' has shape " + nlohmann::json(b->second.shape).dump() + ", expected " +
                            nlohmann::json(a->second.shape).dump());
    }
    if (a->second.dtype != b->second.dtype) {
      throw ValidationError("schema mismatch in " + other_label + ": tensor '" + a->first +
                            "' has dtype " + std::string(to_string(b->second.dtype)) + ", expected " +
                            std::string(to_string(a->second.dtype)));
    }
  }
  if (a != reference.tensors.end()) {
    throw ValidationError("schema mismatch in " + other_label + ": missing tensor '" + a->first + "'");
  }
  if (b != other.tensors.end()) {
    throw ValidationError("schema mismatch in " + other_label + ": unexpected tensor '" + b->first + "'");
  }
}

namespace {

TensorCheckpoint empty_like(const TensorCheckpoint& ref) {
  TensorCheckpoint out;
  for (const auto& [name, t] : ref.tensors) {
    Tensor o;
    o.shape = t.shape;
    o.dtype = t.dtype;
    o.values.resize(t.values.size());
    out.tensors.emplace(name, std::move(o));
  }
  return out;
}

std::string json_array(std::span<const double> xs) { return nlohmann::json(std::vector<double>(xs.begin(), xs.end())).dump(); }

}  // namespace

TensorCheckpoint merge_linear(std::span<const TensorCheckpoint> ckpts, std::span<const double> weights) {
  if (ckpts.empty()) throw ValidationError("linear merge needs at least one checkpoint");
  if (weights.size() != ckpts.size()) {
    throw ValidationError("linear merge: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(ckpts.size()) + " checkpoints");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("linear merge weights must be nonnegative");
    sum += w;
  }
  if (!(sum > 0.0)) throw ValidationError("linear merge weights must not all be zero");
  for (std::size_t i = 1; i < ckpts.size(); ++i) {
    check_same_schema(ckpts[0], ckpts[i], "input " + std::to_string(i));
  }
  std::vector<double> norm(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) norm[i] = weights[i] / sum;

  auto out = empty_like(ckpts[0]);
  std::vector<std::span<const float>> views(ckpts.size());
  for (auto& [name, t] : out.tensors) {
    for (std::size_t i = 0; i < ckpts.size(); ++i) views[i] = ckpts[i].tensors.at(name).values;
    linear_kernel<float>(views, norm, t.values);
  }
  out.metadata["merge_method"] = "linear";
  out.metadata["merge_weights"] = json_array(norm);
  return out;
}

TensorCheckpoint merge_slerp(const TensorCheckpoint& a, const TensorCheckpoint& b, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("slerp t must lie in [0, 1]");
  check_same_schema(a, b, "input 1");
  auto out = empty_like(a);
  std::vector<std::string> fallbacks;
  for (auto& [name, o] : out.tensors) {
    if (slerp_kernel<float>(a.tensors.at(name).values, b.tensors.at(name).values, t, o.values)) {
      fallbacks.push_back(name);
    }
  }
  out.metadata["merge_method"] = "slerp";
  out.metadata["merge_t"] = nlohmann::json(t).dump();
  if (!fallbacks.empty()) out.metadata["slerp_linear_fallback"] = nlohmann::json(fallbacks).dump();
  return out;
}

TensorCheckpoint merge_ties(const TensorCheckpoint& base, std::span<const TensorCheckpoint> ckpts,
                            double density, double lambda) {
  if (ckpts.empty()) throw ValidationError("TIES merge needs at least one checkpoint besides the base");
  if (!(density > 0.0 && density <= 1.0)) throw ValidationError("TIES density must lie in (0, 1]");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ValidationError("TIES lambda must be positive");
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    check_same_schema(base, ckpts[i], "input " + std::to_string(i));
  }
  auto out = empty_like(base);
  std::vector<std::span<const float>> views(ckpts.size());
  for (auto& [name, o] : out.tensors) {
    const auto& b = base.tensors.at(name).values;
    if (!b.empty() && ties_keep_count(density, b.size()) == 0) {
      throw ValidationError("TIES density " + std::to_string(density) + " keeps no entries of tensor '" +
                            name + "' (" + std::to_string(b.size()) + " elements)");
    }
    for (std::size_t i = 0; i < ckpts.size(); ++i) views[i] = ckpts[i].tensors.at(name).values;
    ties_kernel<float>(b, views, density, lambda, o.values);
  }
  out.metadata["merge_method"] = "ties";
  out.metadata["merge_density"] = nlohmann::json(density).dump();
  out.metadata["merge_lambda"] = nlohmann::json(lambda).dump();
  return out;
}

std::optional<MergeMethod> parse_merge_method(std::string_view s) {
  if (s == "linear") return MergeMethod::linear;
  if (s == "slerp") return MergeMethod::slerp;
  if (s == "ties") return MergeMethod::ties;
  return std::nullopt;
}

std::string_view to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::linear: return "linear";
    case MergeMethod::slerp: return "slerp";
    case MergeMethod::ties: return "ties";
  }
  return "?";
}

void MergeSpec::validate() const {
  switch (method) {
    case MergeMethod::linear: {
      if (inputs.empty()) throw ValidationError("linear merge needs at least one input");
      if (weights.size() != inputs.size()) {
        throw ValidationError("linear merge needs one weight per input (" +
                              std::to_string(inputs.size()) + " inputs, " +
                              std::to_string(weights.size()) + " weights)");
      }
      double sum = 0.0;
      for (double w : weights) {
        if (!(w >= 0.0)) throw ValidationError("linear merge weights must be nonnegative");
        sum += w;
      }
      if (!(sum > 0.0)) throw ValidationError("linear merge weights must sum to a positive value");
      break;
    }
    case MergeMethod::slerp:
      if (inputs.size() != 2) throw ValidationError("slerp merge needs exactly two inputs");
      if (!t || !(*t >= 0.0 && *t <= 1.0)) throw ValidationError("slerp merge needs t in [0, 1]");
      break;
    case MergeMethod::ties:
      if (!base) throw ValidationError("TIES merge needs a base checkpoint");
      if (inputs.empty()) throw ValidationError("TIES merge needs at least one input");
      if (!(density > 0.0 && density <= 1.0)) throw ValidationError("TIES density must lie in (0, 1]");
      if (!(lambda > 0.0)) throw ValidationError("TIES lambda must be positive");
      break;
  }
}

TensorCheckpoint merge(const MergeSpec& spec) {
  spec.validate();
  std::vector<TensorCheckpoint> ckpts;
  ckpts.reserve(spec.inputs.size());
  for (const auto& p : spec.inputs) ckpts.push_back(load_checkpoint(p));

  TensorCheckpoint out;
  switch (spec.method) {
    case MergeMethod::linear:
      out = merge_linear(ckpts, spec.weights);
      break;
    case MergeMethod::slerp:
      out = merge_slerp(ckpts[0], ckpts[1], *spec.t);
      break;
    case MergeMethod::ties:
      out = merge_ties(load_checkpoint(*spec.base), ckpts, spec.density, spec.lambda);
      out.metadata["merge_base"] = spec.base->filename().string();
      break;
  }
  std::vector<std::string> names;
  for (const auto& p : spec.inputs) names.push_back(p.filename().string());
  out.metadata["merge_inputs"] = nlohmann::json(names).dump();
  return out;
}

}  // namespace halludet
