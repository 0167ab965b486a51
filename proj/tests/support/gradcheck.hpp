#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hydet/ops.hpp"
#include "hydet/rng.hpp"
#include "hydet/tensor.hpp"

namespace hydet::testing {

/// Central-difference gradient check in double precision.
///   error = |analytic - numeric| / max(|analytic|, |numeric|, kGradFloor)
inline constexpr double kGradStep = 1e-6;
inline constexpr double kGradFloor = 1e-3;
inline constexpr double kGradTol = 1e-4;

struct GradCheckResult {
  double max_error = 0.0;
  std::string worst;  // "<tensor>[<index>]: analytic vs numeric"
  int checked = 0;
};

/// `objective` must rebuild the scalar loss from the current leaf values.
/// Up to `per_tensor` coordinates of each leaf are probed (all when the
/// tensor is smaller), chosen by `rng`.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& objective,
                                 std::vector<std::pair<std::string, Tensor<double>>> leaves, Rng& rng,
                                 int per_tensor = 24) {
  for (auto& [name, t] : leaves) t.zero_grad();
  objective().backward();
  GradCheckResult res;
  for (auto& [name, t] : leaves) {
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > static_cast<std::size_t>(per_tensor)) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(per_tensor); ++i) {
        std::swap(idx[i], idx[i + rng.below(n - i)]);
      }
      idx.resize(static_cast<std::size_t>(per_tensor));
    }
    std::vector<double> analytic(n, 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i : idx) {
      auto d = t.mutable_data();
      const double orig = d[i];
      double fp, fm;
      {
        NoGradGuard ng;
        d[i] = orig + kGradStep;
        fp = objective().item();
        d[i] = orig - kGradStep;
        fm = objective().item();
        d[i] = orig;
      }
      const double num = (fp - fm) / (2 * kGradStep);
      const double err = std::abs(analytic[i] - num) / std::max({std::abs(analytic[i]), std::abs(num), kGradFloor});
      ++res.checked;
      if (err > res.max_error) {
        res.max_error = err;
        res.worst = name + "[" + std::to_string(i) + "]: " + std::to_string(analytic[i]) + " vs " +
                    std::to_string(num);
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(v), requires_grad);
}

/// sum(y * R) for a fixed random R: every output element gets a distinct weight.
inline Tensor<double> weighted_sum(const Tensor<double>& y, const Tensor<double>& r) { return sum(mul(y, r)); }

}  // namespace hydet::testing
