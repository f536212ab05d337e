// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_DATASET_HPP
#define FLOPS_DATASET_HPP

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace flops {

using DenseRows = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Features = std::variant<DenseRows, SparseRows>;

enum class TaskType { LinearRegression, LogisticRegression, MultiClass, MultiLabel };

/// GLM family plus its output width (classes for MultiClass, labels for MultiLabel).
struct TaskKind {
  TaskType type = TaskType::LinearRegression;
  int outputs = 1;

  static TaskKind linear() { return {TaskType::LinearRegression, 1}; }
  static TaskKind logistic() { return {TaskType::LogisticRegression, 1}; }
  static TaskKind multiclass(int classes) { return {TaskType::MultiClass, classes}; }
  static TaskKind multilabel(int labels) { return {TaskType::MultiLabel, labels}; }

  /// Rows of the weight matrix; the gate vector has weight_rows() * input_dim entries.
  int weight_rows() const { return (type == TaskType::MultiClass || type == TaskType::MultiLabel) ? outputs : 1; }

  void validate() const {
    if (type == TaskType::MultiClass && outputs < 2) throw std::invalid_argument("multi-class task needs at least 2 classes");
    if (type == TaskType::MultiLabel && outputs < 1) throw std::invalid_argument("multi-label task needs at least 1 label");
  }

  bool operator==(const TaskKind&) const = default;
};

inline std::string to_string(TaskType t) {
  switch (t) {
    case TaskType::LinearRegression: return "LR";
    case TaskType::LogisticRegression: return "LG";
    case TaskType::MultiClass: return "MC";
    case TaskType::MultiLabel: return "MLC";
  }
  return "?";
}

inline TaskType task_type_from_string(const std::string& s) {
  if (s == "LR") return TaskType::LinearRegression;
  if (s == "LG") return TaskType::LogisticRegression;
  if (s == "MC") return TaskType::MultiClass;
  if (s == "MLC") return TaskType::MultiLabel;
  throw std::invalid_argument("unknown task '" + s + "' (expected LR, LG, MC or MLC)");
}

/// Feature rows with their labels. Labels are an n x k matrix: one column
/// holding the target / 0-1 label / class id for LR, LG and MC, and one
/// 0-1 column per label for MLC.
struct Dataset {
  Features X = DenseRows();
  Eigen::MatrixXd Y;

  Eigen::Index rows() const {
    return std::visit([](const auto& m) { return static_cast<Eigen::Index>(m.rows()); }, X);
  }
  Eigen::Index dim() const {
    return std::visit([](const auto& m) { return static_cast<Eigen::Index>(m.cols()); }, X);
  }
  bool is_sparse() const { return std::holds_alternative<SparseRows>(X); }
  const DenseRows& dense() const { return std::get<DenseRows>(X); }
  DenseRows& dense() { return std::get<DenseRows>(X); }
  const SparseRows& sparse() const { return std::get<SparseRows>(X); }

  /// Copy of the given rows, in the given order.
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.Y.resize(static_cast<Eigen::Index>(idx.size()), Y.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.Y.row(static_cast<Eigen::Index>(i)) = Y.row(static_cast<Eigen::Index>(idx[i]));
    if (is_sparse()) {
      const auto& src = sparse();
      std::vector<Eigen::Triplet<double>> trips;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (SparseRows::InnerIterator it(src, static_cast<Eigen::Index>(idx[i])); it; ++it)
          trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), it.value());
      SparseRows m(static_cast<Eigen::Index>(idx.size()), src.cols());
      m.setFromTriplets(trips.begin(), trips.end());
      out.X = std::move(m);
    } else {
      const auto& src = dense();
      DenseRows m(static_cast<Eigen::Index>(idx.size()), src.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(idx[i]));
      out.X = std::move(m);
    }
    return out;
  }

  /// Adds a trailing all-ones feature column (an intercept that gets its own gate).
  void append_bias() {
    if (is_sparse()) {
      const auto& src = sparse();
      std::vector<Eigen::Triplet<double>> trips;
      trips.reserve(static_cast<std::size_t>(src.nonZeros() + src.rows()));
      for (Eigen::Index i = 0; i < src.outerSize(); ++i) {
        for (SparseRows::InnerIterator it(src, i); it; ++it)
          trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), it.value());
        trips.emplace_back(static_cast<int>(i), static_cast<int>(src.cols()), 1.0);
      }
      SparseRows m(src.rows(), src.cols() + 1);
      m.setFromTriplets(trips.begin(), trips.end());
      X = std::move(m);
    } else {
      DenseRows m(dense().rows(), dense().cols() + 1);
      m.leftCols(dense().cols()) = dense();
      m.col(m.cols() - 1).setOnes();
      X = std::move(m);
    }
  }

  void validate() const {
    if (rows() < 1) throw std::invalid_argument("dataset is empty");
    if (Y.rows() != rows()) throw std::invalid_argument("label count does not match row count");
  }
};

/// Checks that the label matrix is consistent with the task.
inline void validate_labels(const Dataset& d, const TaskKind& task) {
  const auto n = d.Y.rows();
  switch (task.type) {
    case TaskType::LinearRegression:
      if (d.Y.cols() != 1) throw std::invalid_argument("LR expects one target column");
      break;
    case TaskType::LogisticRegression:
      if (d.Y.cols() != 1) throw std::invalid_argument("LG expects one 0/1 label column");
      for (Eigen::Index i = 0; i < n; ++i)
        if (d.Y(i, 0) != 0.0 && d.Y(i, 0) != 1.0) throw std::invalid_argument("LG labels must be 0 or 1");
      break;
    case TaskType::MultiClass:
      if (d.Y.cols() != 1) throw std::invalid_argument("MC expects one class-id column");
      for (Eigen::Index i = 0; i < n; ++i) {
        const double c = d.Y(i, 0);
        if (c < 0 || c >= task.outputs || c != static_cast<double>(static_cast<int>(c)))
          throw std::invalid_argument("MC class id out of range");
      }
      break;
    case TaskType::MultiLabel:
      if (d.Y.cols() != task.outputs) throw std::invalid_argument("MLC label columns must equal label count");
      break;
  }
}

}  // namespace flops

#endif  // FLOPS_DATASET_HPP
