#include "widthlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "widthlab/errors.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {

AccuracyMatrix::AccuracyMatrix(
    std::initializer_list<std::initializer_list<std::optional<double>>> rows)
    : AccuracyMatrix(rows.size()) {
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != n_) throw ShapeError("AccuracyMatrix: not square");
    std::size_t j = 0;
    for (const auto& v : row) {
      if (v) set(i, j, *v);
      ++j;
    }
    ++i;
  }
}

double AccuracyMatrix::get(std::size_t i, std::size_t j) const {
  const auto v = at(i, j);
  if (!v)
    throw PreconditionError("AccuracyMatrix: missing entry R[" + std::to_string(i + 1) + "][" +
                            std::to_string(j + 1) + "]");
  return *v;
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("AccuracyMatrix: entry outside [0,1]");
  cells_.at(i * n_ + j) = v;
}

AccuracyMatrix accuracy_matrix(const ExperimentRecord& rec, std::span<const TaskDataset> tests,
                               bool lower_only) {
  const std::size_t T = rec.num_tasks();
  if (tests.size() != T) throw ShapeError("accuracy_matrix: one test split per task required");
  AccuracyMatrix r(T);
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t upto = (lower_only || rec.config.swap_heads) ? i + 1 : T;
    for (std::size_t j = 0; j < upto; ++j)
      r.set(i, j, accuracy(rec.model_for_task(i, j), rec.masks[j], tests[j]));
  }
  return r;
}

double average_accuracy(const AccuracyMatrix& r) {
  const std::size_t T = r.tasks();
  if (T == 0) throw PreconditionError("average_accuracy: empty matrix");
  double s = 0.0;
  for (std::size_t j = 0; j < T; ++j) s += r.get(T - 1, j);
  return s / static_cast<double>(T);
}

std::vector<double> forgetting_curve(const AccuracyMatrix& r) {
  const std::size_t T = r.tasks();
  if (T == 0) throw PreconditionError("forgetting_curve: empty matrix");
  std::vector<double> f(T, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t) f[t] = r.get(t, t) - r.get(T - 1, t);
  return f;
}

double average_forgetting(const AccuracyMatrix& r) {
  const std::size_t T = r.tasks();
  if (T <= 1) return 0.0;
  const auto f = forgetting_curve(r);
  return std::accumulate(f.begin(), f.end() - 1, 0.0) / static_cast<double>(T - 1);
}

double learning_accuracy(const AccuracyMatrix& r) {
  const std::size_t T = r.tasks();
  if (T == 0) throw PreconditionError("learning_accuracy: empty matrix");
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) s += r.get(t, t);
  return s / static_cast<double>(T);
}

double joint_accuracy(std::span<const TaskDataset> trains, std::span<const TaskDataset> tests,
                      const ProtocolConfig& cfg) {
  if (trains.empty() || tests.empty()) throw PreconditionError("joint_accuracy: no tasks");
  const TaskDataset joint = concatenate(trains);
  ArchSpec arch{joint.d(), cfg.width, cfg.hidden_layers, joint.num_classes};
  ModelSnapshot model = init_model(arch, cfg.seed);
  const ActiveRowMask dense = ActiveRowMask::full(model);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, {stream::kShuffle, 0});
  train_epochs(model, dense, joint, tc);
  double s = 0.0;
  for (const auto& t : tests) s += accuracy(model, dense, t);
  return s / static_cast<double>(tests.size());
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}
}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw PreconditionError("pearson: need >= 2 pairs");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = ranks(x), ry = ranks(y);
  return pearson(rx, ry);
}

}  // namespace widthlab
