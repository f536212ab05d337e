// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_MODELS_HPP
#define FLOPS_MODELS_HPP

#include <cmath>
#include <stdexcept>
#include <variant>

#include <Eigen/Dense>

#include "flops/dataset.hpp"
#include "flops/gates.hpp"

namespace flops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Gated GLM: effective weights are theta_tilde * z. Multi-output weights are
/// flattened class-major, i.e. entry (k, j) lives at k * input_dim + j.
struct SparseModel {
  Vec theta_tilde;
  GateParams gates;
  TaskKind task;
  Eigen::Index input_dim = 0;

  Eigen::Index size() const { return theta_tilde.size(); }

  static Eigen::Index parameter_count(const TaskKind& task, Eigen::Index input_dim) {
    return static_cast<Eigen::Index>(task.weight_rows()) * input_dim;
  }

  void validate() const {
    task.validate();
    if (input_dim < 1) throw std::invalid_argument("input_dim must be positive");
    if (theta_tilde.size() != parameter_count(task, input_dim)) throw std::invalid_argument("theta_tilde has wrong length");
    if (gates.size() != theta_tilde.size()) throw std::invalid_argument("gate vector length differs from theta_tilde");
  }
};

struct GradPair {
  Vec g_theta;
  Vec g_phi;
};

namespace glm {

inline Eigen::Map<const RowMatrix> weights(const Vec& theta, const TaskKind& task, Eigen::Index input_dim) {
  return {theta.data(), task.weight_rows(), input_dim};
}

inline void check_shapes(const Features& X, const Vec& theta, const TaskKind& task, Eigen::Index input_dim) {
  const auto cols = std::visit([](const auto& m) { return static_cast<Eigen::Index>(m.cols()); }, X);
  if (cols != input_dim) throw std::invalid_argument("feature columns do not match model input_dim");
  if (theta.size() != static_cast<Eigen::Index>(task.weight_rows()) * input_dim)
    throw std::invalid_argument("weight vector length does not match task and input_dim");
}

/// n x k matrix of linear scores X W^T.
inline Eigen::MatrixXd logits(const Features& X, const Vec& theta, const TaskKind& task, Eigen::Index input_dim) {
  check_shapes(X, theta, task, input_dim);
  const auto W = weights(theta, task, input_dim);
  return std::visit([&](const auto& m) -> Eigen::MatrixXd { return m * W.transpose(); }, X);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd p(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double mx = scores.row(i).maxCoeff();
    p.row(i) = (scores.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Eigen::MatrixXd predictions(const Eigen::MatrixXd& scores, const TaskKind& task) {
  switch (task.type) {
    case TaskType::LinearRegression: return scores;
    case TaskType::LogisticRegression:
    case TaskType::MultiLabel: return scores.unaryExpr([](double v) { return gates::sigmoid(v); });
    case TaskType::MultiClass: return softmax_rows(scores);
  }
  return scores;
}

/// Mean loss over samples (MLC additionally averages over labels).
inline double loss_from_logits(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& Y, const TaskKind& task) {
  const auto n = scores.rows();
  if (n == 0) throw std::invalid_argument("loss of an empty batch");
  if (Y.rows() != n) throw std::invalid_argument("label rows do not match batch size");
  double total = 0.0;
  switch (task.type) {
    case TaskType::LinearRegression:
      total = (scores.col(0) - Y.col(0)).squaredNorm();
      return total / static_cast<double>(n);
    case TaskType::LogisticRegression:
      for (Eigen::Index i = 0; i < n; ++i) total += softplus(scores(i, 0)) - Y(i, 0) * scores(i, 0);
      return total / static_cast<double>(n);
    case TaskType::MultiLabel:
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < scores.cols(); ++k) total += softplus(scores(i, k)) - Y(i, k) * scores(i, k);
      return total / static_cast<double>(n * scores.cols());
    case TaskType::MultiClass:
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mx = scores.row(i).maxCoeff();
        const double lse = mx + std::log((scores.row(i).array() - mx).exp().sum());
        total += lse - scores(i, static_cast<Eigen::Index>(Y(i, 0)));
      }
      return total / static_cast<double>(n);
  }
  return total;
}

/// dLoss / dscores for loss_from_logits.
inline Eigen::MatrixXd score_gradient(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& Y, const TaskKind& task) {
  const auto n = static_cast<double>(scores.rows());
  if (scores.rows() == 0) throw std::invalid_argument("gradient of an empty batch");
  switch (task.type) {
    case TaskType::LinearRegression: return 2.0 * (scores - Y) / n;
    case TaskType::LogisticRegression: return (predictions(scores, task) - Y) / n;
    case TaskType::MultiLabel:
      return (predictions(scores, task) - Y) / (n * static_cast<double>(scores.cols()));
    case TaskType::MultiClass: {
      Eigen::MatrixXd g = softmax_rows(scores);
      for (Eigen::Index i = 0; i < scores.rows(); ++i) g(i, static_cast<Eigen::Index>(Y(i, 0))) -= 1.0;
      return g / n;
    }
  }
  return scores;
}

/// dLoss / dtheta for effective weights theta, flattened class-major.
inline Vec weight_gradient(const Features& X, const Eigen::MatrixXd& G, const TaskKind& task, Eigen::Index input_dim) {
  RowMatrix gw = std::visit([&](const auto& m) -> RowMatrix { return (m.transpose() * G).transpose(); }, X);
  Vec out(static_cast<Eigen::Index>(task.weight_rows()) * input_dim);
  Eigen::Map<RowMatrix>(out.data(), task.weight_rows(), input_dim) = gw;
  return out;
}

/// Loss and gradient of the un-gated GLM at effective weights theta.
inline double loss_and_gradient(const Dataset& data, const Vec& theta, const TaskKind& task, Vec* grad) {
  const Eigen::MatrixXd scores = logits(data.X, theta, task, data.dim());
  const double l = loss_from_logits(scores, data.Y, task);
  if (grad) *grad = weight_gradient(data.X, score_gradient(scores, data.Y, task), task, data.dim());
  return l;
}

}  // namespace glm

inline Vec effective_weights(const SparseModel& model, const Vec& z) {
  if (z.size() != model.size()) throw std::invalid_argument("gate vector length differs from model size");
  return model.theta_tilde.cwiseProduct(z);
}

/// Predictions per row: values for LR, probabilities for LG/MLC, class probabilities for MC.
inline Eigen::MatrixXd forward(const SparseModel& model, const Vec& z, const Features& X) {
  return glm::predictions(glm::logits(X, effective_weights(model, z), model.task, model.input_dim), model.task);
}

inline double loss(const SparseModel& model, const Vec& z, const Dataset& data) {
  return glm::loss_from_logits(glm::logits(data.X, effective_weights(model, z), model.task, model.input_dim), data.Y,
                               model.task);
}

/// Reparameterized gradients with respect to theta_tilde and log alpha for one gate sample.
inline GradPair backward(const SparseModel& model, const GateSample& sample, const Dataset& data, double* loss_out = nullptr) {
  if (sample.z.size() != model.size()) throw std::invalid_argument("gate sample length differs from model size");
  Vec dtheta;
  const double l = glm::loss_and_gradient(data, effective_weights(model, sample.z), model.task, &dtheta);
  if (loss_out) *loss_out = l;
  const Vec dz = gate_grad_log_alpha(sample, model.gates);
  return {dtheta.cwiseProduct(sample.z), dtheta.cwiseProduct(model.theta_tilde).cwiseProduct(dz)};
}

/// Average of `draws` single-sample gradients (Monte-Carlo estimate of the expected loss gradient).
inline GradPair backward_mc(const SparseModel& model, const Dataset& data, int draws, Rng& rng, double* loss_out = nullptr) {
  if (draws < 1) throw std::invalid_argument("need at least one Monte-Carlo draw");
  GradPair acc{Vec::Zero(model.size()), Vec::Zero(model.size())};
  double total = 0.0;
  for (int r = 0; r < draws; ++r) {
    double l = 0.0;
    const GradPair g = backward(model, sample_gates(model.gates, rng), data, &l);
    acc.g_theta += g.g_theta;
    acc.g_phi += g.g_phi;
    total += l;
  }
  acc.g_theta /= draws;
  acc.g_phi /= draws;
  if (loss_out) *loss_out = total / draws;
  return acc;
}

}  // namespace flops

#endif  // FLOPS_MODELS_HPP
