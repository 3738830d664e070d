#include "widthlab/optim.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

double default_lr(OptimizerKind k) { return k == OptimizerKind::sgd ? 0.01 : 0.001; }

OptimizerState OptimizerState::make(OptimizerKind kind, double lr, const ModelSnapshot& model) {
  OptimizerState s;
  s.kind = kind;
  s.lr = lr;
  if (kind == OptimizerKind::adam)
    for (const auto& a : model.layers) {
      s.m.emplace_back(a.rows(), a.cols());
      s.v.emplace_back(a.rows(), a.cols());
    }
  return s;
}

void apply_update(OptimizerState& state, ModelSnapshot& model, const std::vector<Matrix>& grads,
                  const ActiveRowMask& mask) {
  if (grads.size() != model.num_layers()) throw ShapeError("apply_update: gradient count");
  check_mask(model, mask);
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Matrix& w = model.layers[l];
    const Matrix& g = grads[l];
    if (g.rows() != w.rows() || g.cols() != w.cols())
      throw ShapeError("apply_update: gradient shape differs at layer " + std::to_string(l));
    const bool maskable = !mask.rows.empty() && l < mask.rows.size();

#pragma omp parallel for schedule(static) if (w.size() > (1u << 16))
    for (std::size_t r = 0; r < w.rows(); ++r) {
      if (maskable && !mask.rows[l][r]) continue;
      auto wr = w.row(r);
      const auto gr = g.row(r);
      if (state.kind == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < wr.size(); ++j) wr[j] -= state.lr * gr[j];
      } else {
        auto mr = state.m[l].row(r);
        auto vr = state.v[l].row(r);
        for (std::size_t j = 0; j < wr.size(); ++j) {
          mr[j] = state.beta1 * mr[j] + (1.0 - state.beta1) * gr[j];
          vr[j] = state.beta2 * vr[j] + (1.0 - state.beta2) * gr[j] * gr[j];
          const double mhat = mr[j] / bc1;
          const double vhat = vr[j] / bc2;
          wr[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
      }
    }
    if (!all_finite(w.data()))
      throw NumericError("apply_update: non-finite weight in layer " + std::to_string(l) +
                         " at step " + std::to_string(state.step));
  }
}

namespace {

// Training works on input-major copies (in_dim x out_dim) of every layer so
// that sparse activations drive the inner loops. Each weight sees the same
// arithmetic, in the same order, as loss_and_grads followed by apply_update.
struct InputMajorNet {
  std::vector<Matrix> wt, grad, m, v;
  std::vector<Matrix> acts;  // acts[l] feeds layer l; acts[0] is unused
  Matrix delta, prev;
};

void forward_im(InputMajorNet& net, const ModelSnapshot& model, const ActiveRowMask& mask,
                const Matrix& x) {
  const std::size_t L = net.wt.size();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix& z = net.acts[l + 1];
    kernels::matmul_nn(l == 0 ? x : net.acts[l], net.wt[l], z);
    if (l + 1 < L && !mask.rows.empty()) {
      const auto& flags = mask.rows[l];
      for (std::size_t i = 0; i < z.rows(); ++i) {
        auto zr = z.row(i);
        for (std::size_t r = 0; r < zr.size(); ++r)
          if (!flags[r]) zr[r] = 0.0;
      }
    }
    if (model.specs[l].activation == Activation::relu)
      for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
  }
}

double backward_im(InputMajorNet& net, const Matrix& x, std::span<const std::uint32_t> labels) {
  const std::size_t L = net.wt.size();
  const double loss = softmax_cross_entropy(net.acts[L], labels, net.delta);
  for (std::size_t l = L; l-- > 0;) {
    const Matrix& in = l == 0 ? x : net.acts[l];
    kernels::matmul_tn(in, net.delta, net.grad[l]);
    if (l == 0) break;
    kernels::matmul_nt(net.delta, net.wt[l], net.prev);
    for (std::size_t i = 0; i < net.prev.size(); ++i)
      if (!(in.data()[i] > 0.0)) net.prev.data()[i] = 0.0;
    std::swap(net.delta, net.prev);
  }
  return loss;
}

void update_im(InputMajorNet& net, OptimizerState& state, const ActiveRowMask& mask) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < net.wt.size(); ++l) {
    Matrix& w = net.wt[l];
    const Matrix& g = net.grad[l];
    const std::uint8_t* active =
        !mask.rows.empty() && l < mask.rows.size() ? mask.rows[l].data() : nullptr;
    const std::size_t cols = w.cols();

#pragma omp parallel for schedule(static) if (w.size() > (1u << 16))
    for (std::size_t p = 0; p < w.rows(); ++p) {
      double* wr = w.row(p).data();
      const double* gr = g.row(p).data();
      if (state.kind == OptimizerKind::sgd) {
        for (std::size_t r = 0; r < cols; ++r)
          if (!active || active[r]) wr[r] -= state.lr * gr[r];
      } else {
        double* mr = net.m[l].row(p).data();
        double* vr = net.v[l].row(p).data();
        for (std::size_t r = 0; r < cols; ++r) {
          if (active && !active[r]) continue;
          mr[r] = state.beta1 * mr[r] + (1.0 - state.beta1) * gr[r];
          vr[r] = state.beta2 * vr[r] + (1.0 - state.beta2) * gr[r] * gr[r];
          const double mhat = mr[r] / bc1;
          const double vhat = vr[r] / bc2;
          wr[r] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
      }
    }
    if (!all_finite(w.data()))
      throw NumericError("apply_update: non-finite weight in layer " + std::to_string(l) +
                         " at step " + std::to_string(state.step));
  }
}

}  // namespace

TrainStats train_epochs(ModelSnapshot& model, const ActiveRowMask& mask, const TaskDataset& task,
                        const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw PreconditionError("train_epochs: epochs must be >= 1");
  if (cfg.batch_size == 0) throw PreconditionError("train_epochs: batch_size must be >= 1");
  if (task.n() == 0) throw PreconditionError("train_epochs: empty task");
  if (task.d() != model.input_dim()) throw ShapeError("train_epochs: task input dim != model");

  check_mask(model, mask);
  OptimizerState state;
  state.kind = cfg.optimizer;
  state.lr = cfg.lr;
  InputMajorNet net;
  for (const auto& a : model.layers) {
    net.wt.push_back(a.transposed());
    net.grad.emplace_back();
    if (cfg.optimizer == OptimizerKind::adam) {
      net.m.emplace_back(a.cols(), a.rows());
      net.v.emplace_back(a.cols(), a.rows());
    }
  }
  net.acts.resize(model.num_layers() + 1);
  TrainStats stats;
  std::vector<std::size_t> order(task.n());
  Matrix batch;
  std::vector<std::uint32_t> labels;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {stream::kShuffle, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      if (batch.rows() != len) batch = Matrix(len, task.d());
      labels.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        const auto src = task.inputs.row(order[start + i]);
        std::copy(src.begin(), src.end(), batch.row(i).begin());
        labels[i] = task.labels[order[start + i]];
      }
      try {
        forward_im(net, model, mask, batch);
        loss_sum += backward_im(net, batch, labels);
        update_im(net, state, mask);
      } catch (const NumericError& e) {
        for (std::size_t l = 0; l < net.wt.size(); ++l) model.layers[l] = net.wt[l].transposed();
        throw NumericError(std::string(e.what()) + " [epoch " + std::to_string(epoch) +
                           ", batch starting at " + std::to_string(start) + "]");
      }
      ++batches;
    }
    stats.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  for (std::size_t l = 0; l < net.wt.size(); ++l) model.layers[l] = net.wt[l].transposed();
  return stats;
}

}  // namespace widthlab
