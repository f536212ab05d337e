// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_GATES_HPP
#define FLOPS_GATES_HPP

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

#include "flops/rng.hpp"

namespace flops {

using Vec = Eigen::VectorXd;

/// Stretch interval (gamma, zeta) and temperature of the hard concrete gate.
struct GateHyper {
  double gamma = -0.1;
  double zeta = 1.1;
  double beta_prime = 0.66;

  bool valid() const { return gamma < 0.0 && zeta > 1.0 && beta_prime > 0.0; }
};

/// Per-parameter gate logits (log alpha).
struct GateParams {
  Vec log_alpha;
  GateHyper hyper;

  Eigen::Index size() const { return log_alpha.size(); }
};

/// One training-time draw. `u` is kept so the sample can be replayed when
/// differentiating with respect to log alpha.
struct GateSample {
  Vec z;
  Vec s;
  Vec u;
};

namespace gates {

/// Noise is drawn from (kNoiseEps, 1 - kNoiseEps) to keep logit(u) finite.
inline constexpr double kNoiseEps = 1e-6;
/// Gate values are clamped to [kZEps, 1 - kZEps] before logit inversion.
inline constexpr double kZEps = 1e-4;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double hard_sigmoid(double s, const GateHyper& h) {
  return std::clamp(s * (h.zeta - h.gamma) + h.gamma, 0.0, 1.0);
}

/// Concrete sample for a single coordinate given frozen noise.
inline double concrete(double log_alpha, double u, const GateHyper& h) {
  return sigmoid((std::log(u / (1.0 - u)) + log_alpha) / h.beta_prime);
}

/// Logit offset beta' * log(-gamma / zeta) that separates P(z > 0) from sigmoid(log alpha).
inline double zero_offset(const GateHyper& h) { return h.beta_prime * std::log(-h.gamma / h.zeta); }

}  // namespace gates

inline void validate(const GateParams& params) {
  if (!params.hyper.valid()) throw std::invalid_argument("gate hyperparameters must satisfy gamma < 0 < 1 < zeta, beta' > 0");
  if (!params.log_alpha.allFinite()) throw std::invalid_argument("gate logits must be finite");
}

/// Replays the gate transform for frozen noise `u`.
inline GateSample gate_sample_from_noise(const GateParams& params, const Vec& u) {
  const auto n = params.size();
  GateSample out{Vec(n), Vec(n), u};
  for (Eigen::Index j = 0; j < n; ++j) {
    out.s[j] = gates::concrete(params.log_alpha[j], u[j], params.hyper);
    out.z[j] = gates::hard_sigmoid(out.s[j], params.hyper);
  }
  return out;
}

inline GateSample sample_gates(const GateParams& params, Rng& rng) {
  Vec u(params.size());
  for (Eigen::Index j = 0; j < u.size(); ++j) u[j] = rng.uniform(gates::kNoiseEps, 1.0 - gates::kNoiseEps);
  return gate_sample_from_noise(params, u);
}

/// Deterministic gates used at evaluation time (no noise).
inline Vec test_time_gates(const GateParams& params) {
  return params.log_alpha.unaryExpr(
      [&](double la) { return gates::hard_sigmoid(gates::sigmoid(la), params.hyper); });
}

/// P(z_j > 0), the differentiable surrogate for the L0 indicator.
inline Vec expected_gate(const GateParams& params) {
  const double off = gates::zero_offset(params.hyper);
  return params.log_alpha.unaryExpr([off](double la) { return gates::sigmoid(la - off); });
}

inline Vec expected_gate_grad(const GateParams& params) {
  return expected_gate(params).unaryExpr([](double p) { return p * (1.0 - p); });
}

/// dz_j / dlog_alpha_j for a retained sample; zero where the hard sigmoid clamps.
inline Vec gate_grad_log_alpha(const GateSample& sample, const GateParams& params) {
  const auto& h = params.hyper;
  const double width = h.zeta - h.gamma;
  Vec g(sample.s.size());
  for (Eigen::Index j = 0; j < g.size(); ++j) {
    const double s = sample.s[j];
    const double stretched = s * width + h.gamma;
    g[j] = (stretched > 0.0 && stretched < 1.0) ? width * s * (1.0 - s) / h.beta_prime : 0.0;
  }
  return g;
}

/// Draws log alpha ~ N(logit(rho_init), sigma^2).
inline GateParams init_gate_params(Eigen::Index count, double rho_init, double sigma, Rng& rng,
                                   GateHyper hyper = {}) {
  if (count <= 0) throw std::invalid_argument("gate count must be positive");
  if (!(rho_init > 0.0 && rho_init < 1.0)) throw std::invalid_argument("rho_init must lie in (0, 1)");
  if (sigma < 0.0) throw std::invalid_argument("sigma must be non-negative");
  const double mean = std::log(rho_init) - std::log1p(-rho_init);
  GateParams params{Vec(count), hyper};
  for (Eigen::Index j = 0; j < count; ++j) params.log_alpha[j] = sigma > 0.0 ? rng.normal(mean, sigma) : mean;
  return params;
}

/// Inverts the noise-free concrete map: log alpha = beta' * logit(z), z clamped first.
inline Vec log_alpha_from_z(const Vec& z, const GateHyper& hyper) {
  return z.unaryExpr([&](double v) {
    const double c = std::clamp(v, gates::kZEps, 1.0 - gates::kZEps);
    return hyper.beta_prime * std::log(c / (1.0 - c));
  });
}

/// Forward of log_alpha_from_z: sigmoid(log alpha / beta').
inline Vec z_from_log_alpha(const Vec& log_alpha, const GateHyper& hyper) {
  return log_alpha.unaryExpr([&](double la) { return gates::sigmoid(la / hyper.beta_prime); });
}

}  // namespace flops

#endif  // FLOPS_GATES_HPP
