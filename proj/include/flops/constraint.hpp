// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_CONSTRAINT_HPP
#define FLOPS_CONSTRAINT_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "flops/gates.hpp"

namespace flops {

/// Target density with its Lagrange multiplier and dual step size.
struct DensityConstraint {
  double rho_targ = 0.05;
  double lambda = 0.0;
  double eta_lambda = 1e-3;
};

enum class ScaleMode {
  /// Masked logits move toward activation and the rest toward deactivation,
  /// whatever their current sign.
  SignAware,
  /// (1 + r) log alpha on the mask, (1 - r) log alpha elsewhere.
  Literal,
};

/// Logit scaling that forces exactly m active gates after `prune_start`.
struct PruneSchedule {
  int prune_start = 0;
  double decay_r = 0.05;
  ScaleMode mode = ScaleMode::SignAware;

  /// Epochs are 1-based; scaling runs on epochs strictly after prune_start.
  bool active(int epoch) const { return epoch > prune_start; }
};

/// Mean expected gate minus the target density.
inline double constraint_value(const GateParams& gates, double rho_targ) {
  return expected_gate(gates).mean() - rho_targ;
}

/// Gradient of constraint_value with respect to log alpha.
inline Vec constraint_gradient(const GateParams& gates) {
  return expected_gate_grad(gates) / static_cast<double>(gates.size());
}

/// Projected ascent on lambda, restarting at zero once the constraint holds.
inline DensityConstraint dual_update(DensityConstraint c, double violation) {
  if (violation <= 0.0) {
    c.lambda = 0.0;
  } else {
    c.lambda = std::max(0.0, c.lambda + c.eta_lambda * violation);
  }
  return c;
}

/// m = floor(rho * size), guarded against floating-point shortfall.
inline Eigen::Index top_m_count(double rho_targ, Eigen::Index size) {
  return static_cast<Eigen::Index>(std::floor(rho_targ * static_cast<double>(size) + 1e-9));
}

/// Marks the m largest-magnitude entries; equal magnitudes resolve to the lower index.
inline std::vector<bool> top_m_mask(const Vec& values, Eigen::Index m) {
  const auto n = values.size();
  if (m < 1 || m > n) throw std::invalid_argument("top-m count must lie in [1, length]");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto before = [&](Eigen::Index a, Eigen::Index b) {
    const double fa = std::abs(values[a]), fb = std::abs(values[b]);
    return fa > fb || (fa == fb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + (m - 1), order.end(), before);
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  for (Eigen::Index i = 0; i < m; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return mask;
}

/// Indices of top_m_mask in ascending order.
inline std::vector<Eigen::Index> top_m_indices(const Vec& values, Eigen::Index m) {
  const auto mask = top_m_mask(values, m);
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(m));
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) idx.push_back(static_cast<Eigen::Index>(j));
  return idx;
}

namespace scaling {
/// Below this magnitude sign-aware steps are additive (r per application), so
/// logits can cross zero instead of stalling at it.
inline constexpr double kLogitFloor = 1.0;
}  // namespace scaling

inline GateParams scale_log_alpha(GateParams gates, const std::vector<bool>& mask, double decay_r,
                                  ScaleMode mode = ScaleMode::SignAware) {
  if (mask.size() != static_cast<std::size_t>(gates.size())) throw std::invalid_argument("mask length differs from gate count");
  for (Eigen::Index j = 0; j < gates.size(); ++j) {
    double& la = gates.log_alpha[j];
    const bool keep = mask[static_cast<std::size_t>(j)];
    if (mode == ScaleMode::Literal) {
      la = keep ? la + decay_r * la : la - decay_r * la;
    } else {
      const double step = decay_r * std::max(std::abs(la), scaling::kLogitFloor);
      la = keep ? la + step : la - step;
    }
  }
  return gates;
}

/// Ranks by |theta_effective| and scales the top m = floor(rho_targ * |theta|) up, the rest down.
inline GateParams scale_log_alpha(GateParams gates, const Vec& theta_effective, Eigen::Index m, double decay_r,
                                  ScaleMode mode = ScaleMode::SignAware) {
  if (theta_effective.size() != gates.size()) throw std::invalid_argument("theta length differs from gate count");
  if (m > gates.size()) throw std::invalid_argument("top-m count exceeds parameter count");
  return scale_log_alpha(std::move(gates), top_m_mask(theta_effective, m), decay_r, mode);
}

}  // namespace flops

#endif  // FLOPS_CONSTRAINT_HPP
