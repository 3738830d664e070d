#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "widthlab/dataset.hpp"
#include "widthlab/linalg.hpp"
#include "widthlab/network.hpp"

namespace widthlab {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);  // throws ConfigError

/// Default learning rate per optimizer (0.01 for SGD, 0.001 for Adam).
double default_lr(OptimizerKind k);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Matrix> m;  // first moments (Adam only)
  std::vector<Matrix> v;  // second moments (Adam only)
  std::uint64_t step = 0;

  static OptimizerState make(OptimizerKind kind, double lr, const ModelSnapshot& model);
};

/// One update in place. Rows inactive under `mask` are not touched, and their
/// Adam moments do not advance. Throws NumericError on a non-finite weight.
void apply_update(OptimizerState& state, ModelSnapshot& model, const std::vector<Matrix>& grads,
                  const ActiveRowMask& mask);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 0.01;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
  double final_loss() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

/// Seeded per-epoch shuffling, minibatches in shuffle order, fresh optimizer
/// state. Throws PreconditionError for epochs == 0 and NumericError (with
/// epoch and batch) on divergence.
TrainStats train_epochs(ModelSnapshot& model, const ActiveRowMask& mask, const TaskDataset& task,
                        const TrainConfig& cfg);

}  // namespace widthlab
