// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "flops/gates.hpp"
#include "support.hpp"

namespace flops {
namespace {

using testing::Gen;
namespace ref = testing::ref;

GateParams params_of(std::initializer_list<double> la) {
  GateParams p;
  p.log_alpha = Vec(static_cast<Eigen::Index>(la.size()));
  Eigen::Index j = 0;
  for (double v : la) p.log_alpha[j++] = v;
  return p;
}

TEST(ExpectedGate, ReferencePoints) {
  const Vec p = expected_gate(params_of({0.0, ref::kHalfCrossing, -50.0}));
  EXPECT_NEAR(p[0], ref::kExpectedGateAtZero, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_LT(p[2], 1e-20);
}

TEST(ExpectedGate, StrictlyIncreasing) {
  Gen gen(1);
  for (int t = 0; t < 1000; ++t) {
    const double a = gen.uniform(-20, 20), b = a + gen.uniform(1e-3, 5);
    const Vec p = expected_gate(params_of({a, b}));
    EXPECT_LT(p[0], p[1]);
  }
}

TEST(ExpectedGateGrad, CrossingAndSaturation) {
  const Vec g = expected_gate_grad(params_of({ref::kHalfCrossing, 50.0, -50.0}));
  EXPECT_NEAR(g[0], 0.25, 1e-12);
  EXPECT_LT(g[1], 1e-15);
  EXPECT_LT(g[2], 1e-15);
}

TEST(ExpectedGateGrad, MatchesFiniteDifference) {
  Gen gen(2);
  for (int t = 0; t < 200; ++t) {
    GateParams p = params_of({gen.uniform(-8, 8)});
    const double fd = testing::central_difference(
        [&](const Vec& la) { return expected_gate({la, p.hyper})[0]; }, p.log_alpha, 0, 1e-5);
    EXPECT_NEAR(expected_gate_grad(p)[0], fd, 1e-6);
  }
}

TEST(GateGrad, CentreValue) {
  const GateParams p = params_of({0.0});
  const GateSample s = gate_sample_from_noise(p, Vec::Constant(1, 0.5));
  EXPECT_NEAR(s.z[0], 0.5, 1e-15);
  EXPECT_NEAR(gate_grad_log_alpha(s, p)[0], ref::kGateGradAtCentre, 1e-12);
}

TEST(GateGrad, ZeroWhenClamped) {
  const GateParams p = params_of({8.0, -8.0});
  const GateSample s = gate_sample_from_noise(p, Vec::Constant(2, 0.5));
  EXPECT_EQ(s.z[0], 1.0);
  EXPECT_EQ(s.z[1], 0.0);
  EXPECT_EQ(gate_grad_log_alpha(s, p)[0], 0.0);
  EXPECT_EQ(gate_grad_log_alpha(s, p)[1], 0.0);
}

TEST(GateGrad, MatchesFrozenNoiseFiniteDifference) {
  Gen gen(3);
  int checked = 0;
  for (int t = 0; t < 2000 && checked < 300; ++t) {
    GateParams p = params_of({gen.uniform(-4, 4)});
    const Vec u = Vec::Constant(1, gen.uniform(1e-3, 1 - 1e-3));
    const GateSample s = gate_sample_from_noise(p, u);
    const double stretched = s.s[0] * (p.hyper.zeta - p.hyper.gamma) + p.hyper.gamma;
    if (stretched < 1e-3 || stretched > 1 - 1e-3) continue;
    const double fd = testing::central_difference(
        [&](const Vec& la) { return gate_sample_from_noise({la, p.hyper}, u).z[0]; }, p.log_alpha, 0, 1e-6);
    EXPECT_LT(testing::rel_err(gate_grad_log_alpha(s, p)[0], fd), 1e-5);
    ++checked;
  }
  EXPECT_EQ(checked, 300);
}

TEST(SampleGates, BoundedAndDeterministicInNoise) {
  Gen gen(4);
  Rng rng(9);
  GateParams p;
  p.log_alpha = gen.vec(500, -6, 6);
  const GateSample s = sample_gates(p, rng);
  EXPECT_GE(s.z.minCoeff(), 0.0);
  EXPECT_LE(s.z.maxCoeff(), 1.0);
  EXPECT_GT(s.u.minCoeff(), 0.0);
  EXPECT_LT(s.u.maxCoeff(), 1.0);
  const GateSample replay = gate_sample_from_noise(p, s.u);
  EXPECT_EQ(replay.z, s.z);
}

TEST(SampleGates, EmpiricalNonZeroRateMatchesClosedForm) {
  Rng rng(5);
  for (double la : {-2.0, 0.0, 1.5}) {
    GateParams p;
    p.log_alpha = Vec::Constant(200000, la);
    const GateSample s = sample_gates(p, rng);
    const double rate = (s.z.array() > 0.0).cast<double>().mean();
    const double q = expected_gate(params_of({la}))[0];
    const double se = std::sqrt(q * (1 - q) / 200000.0);
    EXPECT_NEAR(rate, q, 4 * se) << "log alpha " << la;
  }
  EXPECT_NEAR(1.0 - expected_gate(params_of({0.0}))[0], ref::kZeroMassAtZero, 1e-12);
}

TEST(TestTimeGates, ThresholdsAndNoNoise) {
  const Vec z = test_time_gates(params_of({-ref::kLn11 - 1e-9, -ref::kLn11 + 1e-6, 0.0, 10.0, -ref::kLn11}));
  EXPECT_EQ(z[0], 0.0);
  EXPECT_LT(z[4], 1e-15);
  EXPECT_GT(z[1], 0.0);
  EXPECT_NEAR(z[2], 0.5, 1e-15);
  EXPECT_EQ(z[3], 1.0);
}

TEST(InitGateParams, MeansAndErrors) {
  Rng rng(6);
  EXPECT_TRUE(init_gate_params(10, 0.5, 0.0, rng).log_alpha.isZero());
  const Vec hi = init_gate_params(100000, 0.95, 0.1, rng).log_alpha;
  EXPECT_NEAR(hi.mean(), ref::kLn19, 3 * 0.1 / std::sqrt(1e5));
  const Vec lo = init_gate_params(100000, 0.05, 0.1, rng).log_alpha;
  EXPECT_NEAR(lo.mean(), -ref::kLn19, 3 * 0.1 / std::sqrt(1e5));
  EXPECT_THROW(init_gate_params(10, 0.0, 0.1, rng), std::invalid_argument);
  EXPECT_THROW(init_gate_params(10, 1.0, 0.1, rng), std::invalid_argument);
}

TEST(LogAlphaFromZ, ValuesAndRoundTrip) {
  const GateHyper h;
  Vec z(2);
  z << 0.5, 0.9;
  const Vec la = log_alpha_from_z(z, h);
  EXPECT_NEAR(la[0], 0.0, 1e-15);
  EXPECT_NEAR(la[1], ref::kLogAlphaAtZ09, 1e-12);

  Gen gen(7);
  const Vec zs = gen.vec(1000, 0.0, 1.0);
  const Vec back = z_from_log_alpha(log_alpha_from_z(zs, h), h);
  for (Eigen::Index j = 0; j < zs.size(); ++j)
    EXPECT_NEAR(back[j], std::clamp(zs[j], gates::kZEps, 1 - gates::kZEps), 1e-9);
  Vec edge(2);
  edge << 0.0, 1.0;
  EXPECT_TRUE(log_alpha_from_z(edge, h).allFinite());
}

TEST(Validate, RejectsBadHyperparameters) {
  GateParams p = params_of({0.0});
  p.hyper.gamma = 0.1;
  EXPECT_THROW(validate(p), std::invalid_argument);
  p = params_of({std::nan("")});
  EXPECT_THROW(validate(p), std::invalid_argument);
}

}  // namespace
}  // namespace flops
