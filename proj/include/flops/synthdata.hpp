// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_SYNTHDATA_HPP
#define FLOPS_SYNTHDATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "flops/constraint.hpp"
#include "flops/dataset.hpp"
#include "flops/models.hpp"
#include "flops/rng.hpp"

namespace flops {

/// Sparse ground-truth GLM with Toeplitz-correlated Gaussian design.
struct SynthSpec {
  Eigen::Index n = 10000;
  Eigen::Index p = 1000;
  double rho_true = 0.05;
  double rho_cor = 0.2;
  double snr = 20.0;
  TaskKind task = TaskKind::linear();
  std::uint64_t seed = 0;

  Eigen::Index weight_count() const { return SparseModel::parameter_count(task, p); }
  Eigen::Index support_size() const { return top_m_count(rho_true, weight_count()); }

  void validate() const {
    task.validate();
    if (task.type == TaskType::MultiLabel) throw std::invalid_argument("synthetic multi-label data is not supported");
    if (n < 1 || p < 1) throw std::invalid_argument("synthetic n and p must be positive");
    if (!(rho_true > 0.0 && rho_true < 1.0)) throw std::invalid_argument("rho_true must lie in (0, 1)");
    if (!(rho_cor >= 0.0 && rho_cor < 1.0)) throw std::invalid_argument("rho_cor must lie in [0, 1)");
    if (!(snr > 0.0)) throw std::invalid_argument("snr must be positive");
    if (support_size() < 1) throw std::invalid_argument("rho_true * |w| must be at least 1");
  }
};

struct GroundTruth {
  Vec w;                               // class-major for MC
  std::vector<Eigen::Index> support;  // ascending
};

struct SyntheticData {
  Dataset data;
  GroundTruth truth;
  double sigma = 0.0;
};

/// Multiplies each row of iid standard normals by the Cholesky factor of the
/// AR(1) Toeplitz covariance rho^|i-j| (computed by the first-order recursion).
inline void correlate_rows(DenseRows& E, double rho_cor) {
  const double innov = std::sqrt(1.0 - rho_cor * rho_cor);
  for (Eigen::Index i = 0; i < E.rows(); ++i)
    for (Eigen::Index j = 1; j < E.cols(); ++j) E(i, j) = rho_cor * E(i, j - 1) + innov * E(i, j);
}

inline DenseRows gen_design(const SynthSpec& spec, Rng& rng) {
  spec.validate();
  DenseRows X(spec.n, spec.p);
  for (Eigen::Index i = 0; i < spec.n; ++i)
    for (Eigen::Index j = 0; j < spec.p; ++j) X(i, j) = rng.normal();
  correlate_rows(X, spec.rho_cor);
  return X;
}

inline GroundTruth gen_wtrue(const SynthSpec& spec, Rng& rng) {
  spec.validate();
  const auto size = spec.weight_count();
  const auto m = spec.support_size();
  GroundTruth gt{Vec::Zero(size), {}};
  for (auto j : rng.sample_without_replacement(static_cast<std::size_t>(size), static_cast<std::size_t>(m)))
    gt.support.push_back(static_cast<Eigen::Index>(j));
  std::sort(gt.support.begin(), gt.support.end());
  for (auto j : gt.support) gt.w[j] = rng.coin() ? 1.0 : -1.0;
  return gt;
}

struct GeneratedLabels {
  Eigen::MatrixXd Y;
  double sigma = 0.0;
};

/// Noise scale sigma = ||signal|| / (sqrt(snr) * sqrt(#entries)) from the realized signal.
inline GeneratedLabels gen_labels(const SynthSpec& spec, const DenseRows& X, const Vec& w, Rng& rng) {
  if (X.cols() != spec.p || w.size() != spec.weight_count()) throw std::invalid_argument("design or weights do not match spec");
  const Eigen::MatrixXd signal = X * glm::weights(w, spec.task, spec.p).transpose();
  const double entries = static_cast<double>(signal.size());
  GeneratedLabels out;
  out.sigma = signal.norm() / (std::sqrt(spec.snr) * std::sqrt(entries));
  Eigen::MatrixXd noisy = signal;
  // MC draws independent noise per class column with the shared sigma
  for (Eigen::Index i = 0; i < noisy.rows(); ++i)
    for (Eigen::Index k = 0; k < noisy.cols(); ++k) noisy(i, k) += rng.normal(0.0, out.sigma);
  out.Y.resize(noisy.rows(), 1);
  switch (spec.task.type) {
    case TaskType::LinearRegression: out.Y = noisy; break;
    case TaskType::LogisticRegression:
      out.Y = noisy.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
      break;
    case TaskType::MultiClass:
      for (Eigen::Index i = 0; i < noisy.rows(); ++i) {
        Eigen::Index arg = 0;
        noisy.row(i).maxCoeff(&arg);
        out.Y(i, 0) = static_cast<double>(arg);
      }
      break;
    case TaskType::MultiLabel: throw std::invalid_argument("synthetic multi-label data is not supported");
  }
  return out;
}

/// Design, ground truth and labels from independent streams of spec.seed.
inline SyntheticData make_synthetic(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  Rng design_rng = root.fork(1), w_rng = root.fork(2), noise_rng = root.fork(3);
  SyntheticData out;
  DenseRows X = gen_design(spec, design_rng);
  out.truth = gen_wtrue(spec, w_rng);
  auto labels = gen_labels(spec, X, out.truth.w, noise_rng);
  out.sigma = labels.sigma;
  out.data.X = std::move(X);
  out.data.Y = std::move(labels.Y);
  return out;
}

}  // namespace flops

#endif  // FLOPS_SYNTHDATA_HPP
