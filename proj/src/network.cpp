#include "widthlab/network.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <type_traits>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {
namespace {

constexpr std::size_t kEvalChunk = 256;

void apply_row_mask(Matrix& z, const std::vector<std::uint8_t>& flags) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    for (std::size_t j = 0; j < row.size(); ++j)
      if (!flags[j]) row[j] = 0.0;
  }
}

void relu_inplace(Matrix& z) {
  for (double& v : z.data())
    if (v < 0.0) v = 0.0;
}

bool is_hidden(const ModelSnapshot& m, std::size_t l) { return l + 1 < m.num_layers(); }

}  // namespace

bool ModelSnapshot::same_architecture(const ModelSnapshot& other) const {
  if (layers.size() != other.layers.size() || width != other.width) return false;
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (layers[l].rows() != other.layers[l].rows() || layers[l].cols() != other.layers[l].cols())
      return false;
  return specs == other.specs;
}

ActiveRowMask ActiveRowMask::full(const ModelSnapshot& model) {
  ActiveRowMask m;
  m.alpha = 1.0;
  for (std::size_t l = 0; l + 1 < model.num_layers(); ++l)
    m.rows.emplace_back(model.layers[l].rows(), std::uint8_t{1});
  return m;
}

RowIndexSet ActiveRowMask::active_set(std::size_t layer) const {
  if (layer >= rows.size()) throw IndexError("active_set: layer is not maskable");
  return RowIndexSet::from_flags(rows[layer]);
}

ModelSnapshot init_model(const ArchSpec& arch, std::uint64_t seed) {
  if (arch.input_dim == 0 || arch.num_classes == 0 || (arch.hidden_layers > 0 && arch.width == 0))
    throw PreconditionError("init_model: dimensions must be positive");
  ModelSnapshot m;
  m.width = arch.width;
  Rng rng(derive_seed(seed, {stream::kInit}));
  std::size_t in = arch.input_dim;
  for (std::size_t l = 0; l <= arch.hidden_layers; ++l) {
    const bool last = l == arch.hidden_layers;
    const std::size_t out = last ? arch.num_classes : arch.width;
    Matrix a(out, in);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : a.data()) w = uniform(rng, -bound, bound);
    m.layers.push_back(std::move(a));
    m.specs.push_back({in, out, last ? Activation::identity : Activation::relu, 1.0});
    in = out;
  }
  return m;
}

void check_mask(const ModelSnapshot& model, const ActiveRowMask& mask) {
  if (mask.rows.empty()) return;  // empty mask = dense
  if (mask.rows.size() != model.hidden_layers())
    throw ShapeError("mask has " + std::to_string(mask.rows.size()) + " layers, model has " +
                     std::to_string(model.hidden_layers()) + " hidden layers");
  for (std::size_t l = 0; l < mask.rows.size(); ++l)
    if (mask.rows[l].size() != model.layers[l].rows())
      throw ShapeError("mask length differs from layer rows at layer " + std::to_string(l));
}

ForwardTrace forward(const ModelSnapshot& model, const ActiveRowMask& mask,
                     std::span<const double> x) {
  if (x.size() != model.input_dim())
    throw ShapeError("forward: input length " + std::to_string(x.size()) + " != " +
                     std::to_string(model.input_dim()));
  check_mask(model, mask);
  ForwardTrace tr;
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const Matrix& a = model.layers[l];
    std::vector<double> z(a.rows(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      if (!mask.rows.empty() && is_hidden(model, l) && !mask.rows[l][r]) continue;
      double s = 0.0;
      const auto row = a.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) s += row[j] * h[j];
      z[r] = s;
    }
    std::vector<double> post = z;
    if (model.specs[l].activation == Activation::relu)
      for (double& v : post) v = std::max(v, 0.0);
    tr.pre.push_back(std::move(z));
    tr.post.push_back(post);
    h = std::move(post);
  }
  tr.logits = h;
  return tr;
}

BatchTrace forward_batch_trace(const ModelSnapshot& model, const ActiveRowMask& mask,
                               const Matrix& x) {
  if (x.cols() != model.input_dim()) throw ShapeError("forward_batch: input width mismatch");
  check_mask(model, mask);
  BatchTrace tr;
  tr.acts.reserve(model.num_layers() + 1);
  tr.acts.push_back(x);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Matrix z;
    kernels::matmul_nt(tr.acts.back(), model.layers[l], z);
    if (is_hidden(model, l) && !mask.rows.empty()) apply_row_mask(z, mask.rows[l]);
    if (model.specs[l].activation == Activation::relu) relu_inplace(z);
    tr.acts.push_back(std::move(z));
  }
  return tr;
}

Matrix forward_batch(const ModelSnapshot& model, const ActiveRowMask& mask, const Matrix& x) {
  return std::move(forward_batch_trace(model, mask, x).acts.back());
}

double softmax_cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels,
                             Matrix& delta) {
  const std::size_t b = logits.rows(), k = logits.cols();
  if (b == 0 || labels.size() != b) throw ShapeError("softmax_cross_entropy: label count != rows");
  if (delta.rows() != b || delta.cols() != k) delta = Matrix(b, k);
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    loss += lse - z[labels[i]];
    auto d = delta.row(i);
    for (std::size_t c = 0; c < k; ++c) d[c] = std::exp(z[c] - lse) * inv_b;
    d[labels[i]] -= inv_b;
  }
  loss *= inv_b;
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "loss_and_grads: non-finite loss " << loss << " on batch of " << b
        << " (max |logit| = ";
    double mx = 0.0;
    for (double v : logits.data()) mx = std::max(mx, std::abs(v));
    msg << mx << ")";
    throw NumericError(msg.str());
  }
  return loss;
}

LossAndGrads loss_and_grads(const ModelSnapshot& model, const ActiveRowMask& mask,
                            const Matrix& inputs, std::span<const std::uint32_t> labels) {
  const std::size_t b = inputs.rows();
  if (b == 0) throw PreconditionError("loss_and_grads: empty batch");
  if (labels.size() != b) throw ShapeError("loss_and_grads: label count != batch rows");
  const std::size_t k = model.num_classes();
  for (auto y : labels)
    if (y >= k) throw PreconditionError("loss_and_grads: label out of range");

  BatchTrace tr = forward_batch_trace(model, mask, inputs);
  const Matrix& logits = tr.acts.back();

  Matrix delta;
  const double loss = softmax_cross_entropy(logits, labels, delta);

  LossAndGrads out;
  out.loss = loss;
  out.grads.resize(model.num_layers());
  for (std::size_t l = model.num_layers(); l-- > 0;) {
    kernels::matmul_tn(delta, tr.acts[l], out.grads[l]);
    if (is_hidden(model, l) && !mask.rows.empty()) {
      const auto& flags = mask.rows[l];
      for (std::size_t r = 0; r < flags.size(); ++r)
        if (!flags[r]) std::fill(out.grads[l].row(r).begin(), out.grads[l].row(r).end(), 0.0);
    }
    if (l == 0) break;
    Matrix prev;
    kernels::matmul_nn(delta, model.layers[l], prev);
    // acts[l] is the ReLU output of layer l-1; masked units are exactly 0.
    const Matrix& h = tr.acts[l];
    for (std::size_t i = 0; i < prev.size(); ++i)
      if (!(h.data()[i] > 0.0)) prev.data()[i] = 0.0;
    delta = std::move(prev);
  }
  return out;
}

std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

double accuracy(const ModelSnapshot& model, const ActiveRowMask& mask, const TaskDataset& data) {
  if (data.n() == 0) throw PreconditionError("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.n(); start += kEvalChunk) {
    const std::size_t len = std::min(kEvalChunk, data.n() - start);
    Matrix chunk(len, data.d());
    std::copy_n(data.inputs.row(start).begin(), len * data.d(), chunk.data().begin());
    const Matrix logits = forward_batch(model, mask, chunk);
    for (std::size_t i = 0; i < len; ++i)
      if (argmax(logits.row(i)) == data.labels[start + i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.n());
}

// ---- snapshot files ----

namespace {

constexpr char kSnapMagic[6] = {'W', 'L', 'S', 'N', 'A', 'P'};

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw LengthError("snapshot: truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace

void write_snapshot(std::ostream& out, const ModelSnapshot& model, const ActiveRowMask& mask) {
  check_mask(model, mask);
  out.write(kSnapMagic, sizeof kSnapMagic);
  put_le<std::uint32_t>(out, kSnapshotVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.num_layers()));
  put_le<std::uint64_t>(out, model.width);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    put_le<std::uint64_t>(out, model.layers[l].rows());
    put_le<std::uint64_t>(out, model.layers[l].cols());
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(model.specs[l].activation));
    put_le<double>(out, model.specs[l].lipschitz);
  }
  put_le<std::uint64_t>(out, model.task_id);
  put_le<double>(out, mask.alpha);
  put_le<std::uint8_t>(out, mask.rows.empty() ? 0 : 1);
  for (const auto& a : model.layers)
    for (double v : a.data()) put_le<double>(out, v);
  for (const auto& flags : mask.rows) {
    std::vector<std::uint8_t> bits((flags.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  }
  if (!out) throw IoError("snapshot: write failed");
}

void read_snapshot(std::istream& in, ModelSnapshot& model, ActiveRowMask& mask) {
  char magic[sizeof kSnapMagic];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kSnapMagic))
    throw FormatError("snapshot: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kSnapshotVersion)
    throw FormatError("snapshot: unsupported version " + std::to_string(version));
  const auto num_layers = get_le<std::uint32_t>(in);
  if (num_layers == 0) throw FormatError("snapshot: zero layers");
  ModelSnapshot m;
  m.width = get_le<std::uint64_t>(in);
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    const auto r = get_le<std::uint64_t>(in);
    const auto c = get_le<std::uint64_t>(in);
    const auto act = get_le<std::uint8_t>(in);
    const auto lip = get_le<double>(in);
    if (act > 1) throw FormatError("snapshot: unknown activation");
    dims.emplace_back(r, c);
    m.specs.push_back({c, r, static_cast<Activation>(act), lip});
  }
  m.task_id = get_le<std::uint64_t>(in);
  ActiveRowMask mk;
  mk.alpha = get_le<double>(in);
  const bool has_mask = get_le<std::uint8_t>(in) != 0;
  for (auto [r, c] : dims) {
    Matrix a(r, c);
    for (double& v : a.data()) v = get_le<double>(in);
    m.layers.push_back(std::move(a));
  }
  if (has_mask) {
    for (std::uint32_t l = 0; l + 1 < num_layers; ++l) {
      const std::size_t n = dims[l].first;
      std::vector<std::uint8_t> bits((n + 7) / 8);
      if (!in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size())))
        throw LengthError("snapshot: truncated mask");
      std::vector<std::uint8_t> flags(n);
      for (std::size_t i = 0; i < n; ++i) flags[i] = (bits[i / 8] >> (i % 8)) & 1u;
      mk.rows.push_back(std::move(flags));
    }
  }
  model = std::move(m);
  mask = std::move(mk);
}

void save_snapshot(const std::filesystem::path& path, const ModelSnapshot& model,
                   const ActiveRowMask& mask) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  write_snapshot(f, model, mask);
}

void load_snapshot(const std::filesystem::path& path, ModelSnapshot& model, ActiveRowMask& mask) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  read_snapshot(f, model, mask);
}

}  // namespace widthlab
