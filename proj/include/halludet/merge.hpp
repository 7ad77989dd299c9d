#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "halludet/safetensors.hpp"

namespace halludet {

// ---------------------------------------------------------------------------
// Flat-vector kernels. All arithmetic is carried out in double, summations in
// a fixed sequential order, then rounded to T.
// ---------------------------------------------------------------------------

// out = sum_i weights[i] * inputs[i]; weights are expected to be normalised.
template <std::floating_point T>
void linear_kernel(std::span<const std::span<const T>> inputs, std::span<const double> weights,
                   std::span<T> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) acc += weights[i] * static_cast<double>(inputs[i][j]);
    out[j] = static_cast<T>(acc);
  }
}

inline constexpr double kSlerpParallelEps = 1e-7;

// Spherical interpolation between a and b. The angle comes from the
// normalised vectors; the interpolation itself is applied to the raw ones.
// Returns true when it fell back to linear interpolation (zero norm or
// near-parallel inputs).
template <std::floating_point T>
bool slerp_kernel(std::span<const T> a, std::span<const T> b, double t, std::span<T> out,
                  double eps = kSlerpParallelEps) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double x = a[j], y = b[j];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  double ca = 1.0 - t, cb = t;
  bool fallback = true;
  if (na > 0.0 && nb > 0.0) {
    const double cosine = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
    const double omega = std::acos(cosine);
    const double s = std::sin(omega);
    if (s >= eps) {
      ca = std::sin((1.0 - t) * omega) / s;
      cb = std::sin(t * omega) / s;
      fallback = false;
    }
  }
  for (std::size_t j = 0; j < a.size(); ++j) {
    out[j] = static_cast<T>(ca * static_cast<double>(a[j]) + cb * static_cast<double>(b[j]));
  }
  return fallback;
}

// Number of entries TRIM keeps for a tensor of n elements.
inline std::size_t ties_keep_count(double density, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-9));
}

// TIES for one flattened tensor: trim each task vector to its top-k magnitudes,
// elect a sign per element from the trimmed sum, average the values agreeing
// with it, and add lambda times that to the base. Per-element sums run over
// sorted values so the result does not depend on input order.
template <std::floating_point T>
void ties_kernel(std::span<const T> base, std::span<const std::span<const T>> inputs,
                 double density, double lambda, std::span<T> out) {
  const std::size_t n = base.size();
  const std::size_t k = std::min(ties_keep_count(density, n), n);
  if (n > 0 && k == 0) throw std::invalid_argument("TIES density keeps no entries");

  std::vector<std::vector<double>> trimmed(inputs.size(), std::vector<double>(n, 0.0));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> tau(n);
    for (std::size_t j = 0; j < n; ++j) {
      tau[j] = static_cast<double>(inputs[i][j]) - static_cast<double>(base[j]);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto by_magnitude = [&](std::size_t x, std::size_t y) {
      const double ax = std::abs(tau[x]), ay = std::abs(tau[y]);
      return ax != ay ? ax > ay : x < y;
    };
    if (k < n) {
      std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                       by_magnitude);
    }
    for (std::size_t r = 0; r < k; ++r) trimmed[i][order[r]] = tau[order[r]];
  }

  std::vector<double> vals(inputs.size());
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < inputs.size(); ++i) vals[i] = trimmed[i][j];
    std::sort(vals.begin(), vals.end());
    const double total = std::accumulate(vals.begin(), vals.end(), 0.0);
    const int sign = total > 0.0 ? 1 : total < 0.0 ? -1 : 0;
    double merged = 0.0;
    if (sign != 0) {
      double sum = 0.0;
      std::size_t count = 0;
      for (double v : vals) {
        if ((sign > 0 && v > 0.0) || (sign < 0 && v < 0.0)) {
          sum += v;
          ++count;
        }
      }
      merged = count ? sum / static_cast<double>(count) : 0.0;
    }
    out[j] = static_cast<T>(static_cast<double>(base[j]) + lambda * merged);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint-level merges.
// ---------------------------------------------------------------------------

// Throws ValidationError naming the first tensor whose name, shape or dtype differs.
void check_same_schema(const TensorCheckpoint& reference, const TensorCheckpoint& other,
                       const std::string& other_label);

TensorCheckpoint merge_linear(std::span<const TensorCheckpoint> ckpts, std::span<const double> weights);
TensorCheckpoint merge_slerp(const TensorCheckpoint& a, const TensorCheckpoint& b, double t);
TensorCheckpoint merge_ties(const TensorCheckpoint& base, std::span<const TensorCheckpoint> ckpts,
                            double density, double lambda);

enum class MergeMethod { linear, slerp, ties };
std::optional<MergeMethod> parse_merge_method(std::string_view s);
std::string_view to_string(MergeMethod m);

struct MergeSpec {
  MergeMethod method = MergeMethod::linear;
  std::vector<std::filesystem::path> inputs;
  std::vector<double> weights;          // linear
  std::optional<double> t;              // slerp
  std::optional<std::filesystem::path> base;  // ties
  double density = 0.2;
  double lambda = 1.0;

  void validate() const;
};

TensorCheckpoint merge(const MergeSpec& spec);

}  // namespace halludet
