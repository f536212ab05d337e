// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_METRICS_HPP
#define FLOPS_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "flops/models.hpp"

namespace flops {

using Support = std::vector<Eigen::Index>;

/// |estimated ∩ truth| / |truth|.
inline double tdr(const Support& estimated, const Support& truth) {
  if (truth.empty()) throw std::invalid_argument("true support is empty");
  const std::set<Eigen::Index> t(truth.begin(), truth.end());
  const std::set<Eigen::Index> e(estimated.begin(), estimated.end());
  std::size_t hit = 0;
  for (auto j : e) hit += t.count(j);
  return static_cast<double>(hit) / static_cast<double>(t.size());
}

/// Indices whose value is strictly positive in magnitude.
inline Support nonzero_support(const Vec& v) {
  Support s;
  for (Eigen::Index j = 0; j < v.size(); ++j)
    if (v[j] != 0.0) s.push_back(j);
  return s;
}

inline double mse(const Vec& y_true, const Vec& y_pred) {
  if (y_true.size() != y_pred.size() || y_true.size() < 1) throw std::invalid_argument("mse needs equal non-empty inputs");
  return (y_true - y_pred).squaredNorm() / static_cast<double>(y_true.size());
}

/// 1 - SS_res / SS_tot; empty when the targets are constant.
inline std::optional<double> r2(const Vec& y_true, const Vec& y_pred) {
  if (y_true.size() != y_pred.size() || y_true.size() < 2) throw std::invalid_argument("r2 needs equal inputs of length >= 2");
  const double mean = y_true.mean();
  const double ss_tot = (y_true.array() - mean).square().sum();
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - (y_true - y_pred).squaredNorm() / ss_tot;
}

/// Accuracy of class ids against scores: one column is P(y = 1) thresholded at
/// 0.5; several columns are per-class scores compared by argmax.
inline double accuracy(const Vec& y_true, const Eigen::MatrixXd& scores) {
  if (scores.rows() != y_true.size() || y_true.size() < 1) throw std::invalid_argument("accuracy needs one score row per label");
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double pred = 0.0;
    if (scores.cols() == 1) {
      pred = scores(i, 0) > 0.5 ? 1.0 : 0.0;
    } else {
      Eigen::Index arg = 0;
      scores.row(i).maxCoeff(&arg);
      pred = static_cast<double>(arg);
    }
    hit += (pred == y_true[i]);
  }
  return static_cast<double>(hit) / static_cast<double>(y_true.size());
}

/// Mean cross-entropy of probabilities: binary when one column, categorical otherwise.
inline double cross_entropy(const Vec& y_true, const Eigen::MatrixXd& probs) {
  if (probs.rows() != y_true.size() || y_true.size() < 1) throw std::invalid_argument("cross_entropy needs one row per label");
  constexpr double eps = 1e-15;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (probs.cols() == 1) {
      const double p = std::clamp(probs(i, 0), eps, 1.0 - eps);
      total -= y_true[i] * std::log(p) + (1.0 - y_true[i]) * std::log(1.0 - p);
    } else {
      total -= std::log(std::max(probs(i, static_cast<Eigen::Index>(y_true[i])), eps));
    }
  }
  return total / static_cast<double>(y_true.size());
}

/// Micro-averaged F1 with TP/FP/FN pooled over every (sample, label) pair.
inline double micro_f1(const Eigen::MatrixXd& y_true, const Eigen::MatrixXd& probs, double threshold = 0.5) {
  if (y_true.rows() != probs.rows() || y_true.cols() != probs.cols()) throw std::invalid_argument("micro_f1 shape mismatch");
  double tp = 0, fp = 0, fn = 0;
  for (Eigen::Index i = 0; i < y_true.rows(); ++i)
    for (Eigen::Index k = 0; k < y_true.cols(); ++k) {
      const bool pred = probs(i, k) > threshold, truth = y_true(i, k) > 0.5;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

/// Σ min / Σ max; two all-zero vectors count as identical.
inline double soft_iou(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("soft_iou needs equal lengths");
  const double num = a.cwiseMin(b).sum(), den = a.cwiseMax(b).sum();
  return den == 0.0 ? 1.0 : num / den;
}

inline Eigen::MatrixXd soft_iou_matrix(const std::vector<Vec>& gates) {
  if (gates.size() < 2) throw std::invalid_argument("soft IOU matrix needs at least two epochs");
  const auto T = static_cast<Eigen::Index>(gates.size());
  Eigen::MatrixXd M(T, T);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index u = t; u < T; ++u) M(t, u) = M(u, t) = soft_iou(gates[static_cast<std::size_t>(t)], gates[static_cast<std::size_t>(u)]);
  return M;
}

inline double mask_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask_iou needs equal lengths");
  std::size_t inter = 0, uni = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    inter += a[j] && b[j];
    uni += a[j] || b[j];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Eigen::MatrixXd mask_iou_matrix(const std::vector<std::vector<bool>>& masks) {
  if (masks.size() < 2) throw std::invalid_argument("mask IOU matrix needs at least two epochs");
  const auto T = static_cast<Eigen::Index>(masks.size());
  Eigen::MatrixXd M(T, T);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index u = t; u < T; ++u) M(t, u) = M(u, t) = mask_iou(masks[static_cast<std::size_t>(t)], masks[static_cast<std::size_t>(u)]);
  return M;
}

/// Task-dependent test block: `score` is R² (LR), accuracy (LG/MC) or micro-F1
/// (MLC); `loss` is MSE, CE or BCE.
struct TestMetrics {
  double score = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
};

inline TestMetrics evaluate(const Dataset& test, const Vec& theta, const TaskKind& task) {
  const Eigen::MatrixXd scores = glm::logits(test.X, theta, task, test.dim());
  TestMetrics out;
  out.loss = glm::loss_from_logits(scores, test.Y, task);
  const Eigen::MatrixXd pred = glm::predictions(scores, task);
  switch (task.type) {
    case TaskType::LinearRegression:
      if (test.rows() >= 2) out.score = r2(test.Y.col(0), pred.col(0)).value_or(std::numeric_limits<double>::quiet_NaN());
      break;
    case TaskType::LogisticRegression:
    case TaskType::MultiClass: out.score = accuracy(test.Y.col(0), pred); break;
    case TaskType::MultiLabel: out.score = micro_f1(test.Y, pred); break;
  }
  return out;
}

}  // namespace flops

#endif  // FLOPS_METRICS_HPP
