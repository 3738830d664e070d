#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "widthlab/continual.hpp"
#include "widthlab/dataset.hpp"

namespace widthlab {

/// R[i][j] = test accuracy of M_{i+1} on task j+1. Entries above the
/// diagonal may be absent.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0)
      : n_(tasks), cells_(tasks * tasks) {}
  AccuracyMatrix(std::initializer_list<std::initializer_list<std::optional<double>>> rows);

  std::size_t tasks() const { return n_; }
  std::optional<double> at(std::size_t i, std::size_t j) const { return cells_.at(i * n_ + j); }
  /// Throws PreconditionError when the entry is absent.
  double get(std::size_t i, std::size_t j) const;
  /// Throws InvalidInput outside [0,1].
  void set(std::size_t i, std::size_t j, double v);

 private:
  std::size_t n_;
  std::vector<std::optional<double>> cells_;
};

/// Evaluates every M_i on every test split j (j <= i only when
/// `lower_only`), each under the task-j mask.
AccuracyMatrix accuracy_matrix(const ExperimentRecord& rec, std::span<const TaskDataset> tests,
                               bool lower_only = false);

double average_accuracy(const AccuracyMatrix& r);
double average_forgetting(const AccuracyMatrix& r);
double learning_accuracy(const AccuracyMatrix& r);
/// R[t][t] - R[T][t] for t = 1..T; the last element is exactly 0.
std::vector<double> forgetting_curve(const AccuracyMatrix& r);

/// Fresh dense model trained once on all train splits stacked; mean test
/// accuracy over tasks. Uses the same init and first-task shuffle seeds as
/// run_sequence, so a single task reproduces R[1][1] of a dense run.
double joint_accuracy(std::span<const TaskDataset> trains, std::span<const TaskDataset> tests,
                      const ProtocolConfig& cfg);

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
double spearman(std::span<const double> x, std::span<const double> y);
double pearson(std::span<const double> x, std::span<const double> y);

}  // namespace widthlab
