// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

// Shared test helpers: random instance generators, finite differences and
// reference values computed offline at 30 digits.

#ifndef FLOPS_TESTS_SUPPORT_HPP
#define FLOPS_TESTS_SUPPORT_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "flops/dataset.hpp"
#include "flops/models.hpp"

namespace flops::testing {

// High-precision reference values (mpmath, 30 digits, rounded).
namespace ref {
inline constexpr double kExpectedGateAtZero = 0.829573964505328;   // sigmoid(0.66 ln 11)
inline constexpr double kHalfCrossing = -1.58261088004692;         // 0.66 ln(0.1 / 1.1)
inline constexpr double kLogAlphaAtZ09 = 1.45016822104190;         // 0.66 ln 9
inline constexpr double kGateGradAtCentre = 0.454545454545455;     // 1.2 * 0.25 / 0.66
inline constexpr double kLn19 = 2.94443897916644;
inline constexpr double kLn11 = 2.39789527279837;
inline constexpr double kZeroMassAtZero = 0.170426035494672;       // 1 - kExpectedGateAtZero
inline constexpr double kLn2 = 0.693147180559945;
inline constexpr double kLn4 = 1.38629436111989;
}  // namespace ref

/// Small hand-rolled generator, independent of the library's Rng.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }

  Vec vec(Eigen::Index n, double lo, double hi) {
    Vec v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  Vec gaussian(Eigen::Index n) {
    Vec v(n);
    for (auto& x : v) x = normal();
    return v;
  }

  /// Random labelled dataset for the task with n rows and p features.
  Dataset dataset(const TaskKind& task, Eigen::Index n, Eigen::Index p) {
    Dataset d;
    DenseRows X(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < p; ++j) X(i, j) = normal();
    d.X = std::move(X);
    d.Y = labels(task, n);
    return d;
  }

  Eigen::MatrixXd labels(const TaskKind& task, Eigen::Index n) {
    Eigen::MatrixXd Y;
    switch (task.type) {
      case TaskType::LinearRegression:
        Y.resize(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) Y(i, 0) = 2.0 * normal();
        break;
      case TaskType::LogisticRegression:
        Y.resize(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) Y(i, 0) = integer(0, 1);
        break;
      case TaskType::MultiClass:
        Y.resize(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) Y(i, 0) = integer(0, task.outputs - 1);
        break;
      case TaskType::MultiLabel:
        Y.resize(n, task.outputs);
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index k = 0; k < task.outputs; ++k) Y(i, k) = integer(0, 1);
        break;
    }
    return Y;
  }

  TaskKind task(int which) {
    switch (which % 4) {
      case 0: return TaskKind::linear();
      case 1: return TaskKind::logistic();
      case 2: return TaskKind::multiclass(integer(2, 4));
      default: return TaskKind::multilabel(integer(1, 3));
    }
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Central difference of f at x along coordinate j.
inline double central_difference(const std::function<double(const Vec&)>& f, Vec x, Eigen::Index j, double h) {
  const double x0 = x[j];
  x[j] = x0 + h;
  const double up = f(x);
  x[j] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

/// Loss written out sample by sample, without the library's vectorized path.
inline double reference_loss(const DenseRows& X, const Eigen::MatrixXd& Y, const Vec& theta, const TaskKind& task) {
  const auto n = X.rows(), p = X.cols();
  const int k = task.weight_rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> s(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < k; ++c)
      for (Eigen::Index j = 0; j < p; ++j) s[static_cast<std::size_t>(c)] += X(i, j) * theta[c * p + j];
    switch (task.type) {
      case TaskType::LinearRegression: total += (s[0] - Y(i, 0)) * (s[0] - Y(i, 0)); break;
      case TaskType::LogisticRegression: {
        const double q = 1.0 / (1.0 + std::exp(-s[0]));
        total += -(Y(i, 0) * std::log(q) + (1.0 - Y(i, 0)) * std::log(1.0 - q));
        break;
      }
      case TaskType::MultiClass: {
        double z = 0.0;
        for (double v : s) z += std::exp(v);
        total += -std::log(std::exp(s[static_cast<std::size_t>(Y(i, 0))]) / z);
        break;
      }
      case TaskType::MultiLabel: {
        double acc = 0.0;
        for (int c = 0; c < k; ++c) {
          const double q = 1.0 / (1.0 + std::exp(-s[static_cast<std::size_t>(c)]));
          acc += -(Y(i, c) * std::log(q) + (1.0 - Y(i, c)) * std::log(1.0 - q));
        }
        total += acc / k;
        break;
      }
    }
  }
  return total / static_cast<double>(n);
}

inline std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace flops::testing

#endif  // FLOPS_TESTS_SUPPORT_HPP
