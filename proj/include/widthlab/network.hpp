#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "widthlab/dataset.hpp"
#include "widthlab/linalg.hpp"

namespace widthlab {

enum class Activation : std::uint8_t { identity = 0, relu = 1 };

/// Layer l maps in_dim -> out_dim, then applies `activation` (identity on the
/// output layer). Both shipped activations are 1-Lipschitz with phi(0) = 0.
struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::relu;
  double lipschitz = 1.0;

  bool operator==(const LayerSpec&) const = default;
};

struct ArchSpec {
  std::size_t input_dim = 0;
  std::size_t width = 0;
  std::size_t hidden_layers = 1;  // L = hidden_layers + 1 weight matrices
  std::size_t num_classes = 0;
};

/// Weights A_1 .. A_L of a bias-free feed-forward net. Layers 0..L-2 (zero
/// based) have `width` rows and are maskable; layer L-1 has K rows.
struct ModelSnapshot {
  std::vector<Matrix> layers;
  std::vector<LayerSpec> specs;
  std::size_t width = 0;
  std::size_t task_id = 0;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t hidden_layers() const { return layers.size() - 1; }
  std::size_t input_dim() const { return layers.front().cols(); }
  std::size_t num_classes() const { return layers.back().rows(); }
  ArchSpec arch() const { return {input_dim(), width, hidden_layers(), num_classes()}; }

  bool same_architecture(const ModelSnapshot& other) const;
  bool operator==(const ModelSnapshot&) const = default;
};

/// Per hidden layer, 1 = active row. The output layer is never masked.
struct ActiveRowMask {
  std::vector<std::vector<std::uint8_t>> rows;
  double alpha = 1.0;

  static ActiveRowMask full(const ModelSnapshot& model);
  bool active(std::size_t layer, std::size_t row) const {
    return layer >= rows.size() || rows[layer][row] != 0;
  }
  RowIndexSet active_set(std::size_t layer) const;
  bool operator==(const ActiveRowMask&) const = default;
};

/// pre[l] = A_l h_{l-1} after masking, post[l] = phi_l(pre[l]); post.back()
/// equals logits.
struct ForwardTrace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
  std::vector<double> logits;
};

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
ModelSnapshot init_model(const ArchSpec& arch, std::uint64_t seed);

/// Throws ShapeError when the mask does not fit the model.
void check_mask(const ModelSnapshot& model, const ActiveRowMask& mask);

ForwardTrace forward(const ModelSnapshot& model, const ActiveRowMask& mask,
                     std::span<const double> x);

/// Batched forward: returns b x K logits.
Matrix forward_batch(const ModelSnapshot& model, const ActiveRowMask& mask, const Matrix& x);

/// Activations of a batched forward pass; acts[0] is the input batch and
/// acts[l+1] the post-activation output of layer l.
struct BatchTrace {
  std::vector<Matrix> acts;
};
BatchTrace forward_batch_trace(const ModelSnapshot& model, const ActiveRowMask& mask,
                               const Matrix& x);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Matrix> grads;  // shaped like model.layers
};

/// Mean cross-entropy of max-shifted softmax; `delta` receives
/// (softmax - onehot) / rows. Throws NumericError on a non-finite loss.
double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels,
                             Matrix& delta);

/// Mean softmax cross-entropy and its gradient. Throws NumericError on a
/// non-finite loss.
LossAndGrads loss_and_grads(const ModelSnapshot& model, const ActiveRowMask& mask,
                            const Matrix& inputs, std::span<const std::uint32_t> labels);

/// Index of the largest logit, lowest index on ties.
std::size_t argmax(std::span<const double> logits);

double accuracy(const ModelSnapshot& model, const ActiveRowMask& mask, const TaskDataset& data);

// Snapshot files: "WLSNAP" v1, little-endian. Header {version, L, W,
// layer dims, task_id, alpha}, then layer matrices row-major as float64, then
// one bitmap per hidden layer (LSB-first bits).
inline constexpr std::uint32_t kSnapshotVersion = 1;
void write_snapshot(std::ostream& out, const ModelSnapshot& model, const ActiveRowMask& mask);
void read_snapshot(std::istream& in, ModelSnapshot& model, ActiveRowMask& mask);
void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& model,
                   const ActiveRowMask& mask);
void load_snapshot(const std::filesystem::path& path, ModelSnapshot& model, ActiveRowMask& mask);

}  // namespace widthlab
