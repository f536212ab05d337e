// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Cholesky>
#include <cmath>
#include <set>

#include "flops/synthdata.hpp"
#include "support.hpp"

namespace flops {
namespace {

SynthSpec spec_of(Eigen::Index n, Eigen::Index p, double rho_cor, TaskKind task = TaskKind::linear()) {
  SynthSpec s;
  s.n = n;
  s.p = p;
  s.rho_cor = rho_cor;
  s.task = task;
  s.rho_true = 0.2;
  return s;
}

TEST(GenDesign, RecursionEqualsDenseCholesky) {
  const Eigen::Index p = 12;
  const double rho = 0.6;
  Eigen::MatrixXd sigma(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) sigma(i, j) = std::pow(rho, std::abs(i - j));
  const Eigen::MatrixXd L = sigma.llt().matrixL();

  testing::Gen gen(1);
  DenseRows E(5, p);
  for (auto& v : E.reshaped()) v = gen.normal();
  DenseRows X = E;
  correlate_rows(X, rho);
  const DenseRows want = E * L.transpose();
  EXPECT_LT((X - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GenDesign, IndependentFeaturesHaveIdentityCovariance) {
  Rng rng(2);
  const DenseRows X = gen_design(spec_of(10000, 10, 0.0), rng);
  const Eigen::MatrixXd C = (X.transpose() * X) / 10000.0;
  for (Eigen::Index i = 0; i < 10; ++i)
    for (Eigen::Index j = 0; j < 10; ++j)
      if (i != j) {
        EXPECT_LT(std::abs(C(i, j)), 0.05);
      }
}

TEST(GenDesign, AdjacentCorrelation) {
  Rng rng(3);
  const DenseRows X = gen_design(spec_of(10000, 10, 0.7), rng);
  for (Eigen::Index j = 0; j + 1 < 10; ++j) {
    const Eigen::VectorXd a = X.col(j).array() - X.col(j).mean();
    const Eigen::VectorXd b = X.col(j + 1).array() - X.col(j + 1).mean();
    EXPECT_NEAR(a.dot(b) / (a.norm() * b.norm()), 0.7, 0.05);
  }
}

TEST(GenDesign, DeterministicPerSeed) {
  Rng a(4), b(4);
  const auto s = spec_of(50, 8, 0.3);
  EXPECT_EQ(gen_design(s, a), gen_design(s, b));
}

TEST(GenWtrue, SupportSizeAndSigns) {
  Rng rng(5);
  SynthSpec s = spec_of(10, 1000, 0.0);
  s.rho_true = 0.05;
  const GroundTruth gt = gen_wtrue(s, rng);
  EXPECT_EQ(gt.support.size(), 50u);
  EXPECT_EQ((gt.w.array() != 0.0).count(), 50);
  for (auto j : gt.support) EXPECT_EQ(std::abs(gt.w[j]), 1.0);
  s.rho_true = 0.95;
  EXPECT_EQ(gen_wtrue(s, rng).support.size(), 950u);

  int plus = 0, total = 0;
  for (int t = 0; t < 10000 / 50; ++t) {
    s.rho_true = 0.05;
    const GroundTruth g = gen_wtrue(s, rng);
    for (auto j : g.support) {
      plus += g.w[j] > 0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(plus) / total, 0.5, 3 * 0.5 / std::sqrt(total));
}

TEST(GenLabels, SigmaFromRealizedSignal) {
  // A design whose signal norm is exactly sqrt(2e5) = 447.2136
  SynthSpec s = spec_of(10000, 1, 0.0);
  s.rho_true = 0.99;
  s.snr = 20.0;
  DenseRows X = DenseRows::Constant(10000, 1, std::sqrt(20.0));
  Rng rng(6);
  const auto out = gen_labels(s, X, Vec::Ones(1), rng);
  EXPECT_NEAR(out.sigma, 1.0, 1e-12);
}

TEST(GenLabels, NoiselessLimitRecoversSupport) {
  SynthSpec s = spec_of(500, 20, 0.2);
  s.snr = 1e12;
  s.seed = 7;
  const auto d = make_synthetic(s);
  const auto& X = d.data.dense();
  Eigen::MatrixXd Xs(X.rows(), static_cast<Eigen::Index>(d.truth.support.size()));
  for (std::size_t k = 0; k < d.truth.support.size(); ++k) Xs.col(static_cast<Eigen::Index>(k)) = X.col(d.truth.support[k]);
  const Eigen::VectorXd y = d.data.Y.col(0);
  const Eigen::VectorXd coef = Xs.colPivHouseholderQr().solve(y);
  const double ss_res = (y - Xs * coef).squaredNorm();
  const double ss_tot = (y.array() - y.mean()).matrix().squaredNorm();
  EXPECT_NEAR(1.0 - ss_res / ss_tot, 1.0, 1e-3);
}

TEST(GenLabels, PureNoiseLogisticIsBalanced) {
  SynthSpec s = spec_of(10000, 5, 0.0, TaskKind::logistic());
  Rng rng(8);
  const DenseRows X = gen_design(s, rng);
  // w = 0 makes sigma 0; use a tiny signal so the noise dominates
  Vec w = Vec::Zero(5);
  w[0] = 1e-8;
  s.snr = 1e-12;
  const auto out = gen_labels(s, X, w, rng);
  EXPECT_NEAR(out.Y.mean(), 0.5, 0.02);
}

TEST(GenLabels, RealizedSnrNearTarget) {
  for (auto task : {TaskKind::linear(), TaskKind::multiclass(5)}) {
    SynthSpec s = spec_of(10000, 100, 0.2, task);
    s.rho_true = 0.05;
    s.snr = 20.0;
    Rng rng(9);
    const DenseRows X = gen_design(s, rng);
    const GroundTruth gt = gen_wtrue(s, rng);
    const Eigen::MatrixXd signal = X * glm::weights(gt.w, task, s.p).transpose();
    const auto out = gen_labels(s, X, gt.w, rng);
    const double noise_sq = out.sigma * out.sigma * static_cast<double>(signal.size());
    EXPECT_NEAR(signal.squaredNorm() / noise_sq, 20.0, 2.0);
  }
}

TEST(MakeSynthetic, SameSeedSameTriple) {
  SynthSpec s = spec_of(300, 30, 0.2, TaskKind::multiclass(3));
  s.seed = 11;
  const auto a = make_synthetic(s), b = make_synthetic(s);
  EXPECT_EQ(a.data.dense(), b.data.dense());
  EXPECT_EQ(a.data.Y, b.data.Y);
  EXPECT_EQ(a.truth.w, b.truth.w);
}

TEST(MakeSynthetic, EveryClassAppears) {
  SynthSpec s = spec_of(10000, 100, 0.2, TaskKind::multiclass(10));
  s.rho_true = 0.05;
  s.seed = 12;
  const auto d = make_synthetic(s);
  std::set<int> seen;
  for (Eigen::Index i = 0; i < d.data.Y.rows(); ++i) seen.insert(static_cast<int>(d.data.Y(i, 0)));
  EXPECT_EQ(seen.size(), 10u);
}

TEST(SynthSpec, Validation) {
  SynthSpec s = spec_of(10, 10, 0.0);
  s.rho_true = 0.05;  // floor(0.5) = 0
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = spec_of(10, 10, 1.0);
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = spec_of(10, 10, 0.0, TaskKind::multilabel(3));
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace flops
