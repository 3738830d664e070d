#include "widthlab/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include "widthlab/errors.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {
namespace {

std::uint32_t read_be32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw LengthError(std::string("IDX: truncated header in ") + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void read_payload(std::istream& in, std::uint8_t* dst, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw LengthError(std::string("IDX: payload of ") + what + " truncated: expected " +
                      std::to_string(n) + " bytes, got " + std::to_string(in.gcount()));
}

std::vector<std::uint8_t> read_labels(std::istream& labels, std::size_t& count) {
  const std::uint32_t magic = read_be32(labels, "labels");
  if (magic != kIdxLabelMagic)
    throw FormatError("IDX labels: bad magic " + std::to_string(magic));
  count = read_be32(labels, "labels");
  std::vector<std::uint8_t> out(count);
  read_payload(labels, out.data(), count, "labels");
  return out;
}

std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

// cos/sin with exact values on the axes so quarter turns are permutations.
std::pair<double, double> exact_cos_sin(double angle_deg) {
  double a = std::fmod(angle_deg, 360.0);
  if (a < 0) a += 360.0;
  if (a == 0.0) return {1.0, 0.0};
  if (a == 90.0) return {0.0, 1.0};
  if (a == 180.0) return {-1.0, 0.0};
  if (a == 270.0) return {0.0, -1.0};
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  return {std::cos(a * kDegToRad), std::sin(a * kDegToRad)};
}

}  // namespace

void TaskDataset::validate() const {
  if (n() == 0) throw ConsistencyError("TaskDataset: empty");
  if (labels.size() != n()) throw ConsistencyError("TaskDataset: label count != input rows");
  for (auto y : labels)
    if (y >= num_classes) throw ConsistencyError("TaskDataset: label out of range");
  for (double x : inputs.data())
    if (!(x >= 0.0 && x <= 1.0)) throw ConsistencyError("TaskDataset: input outside [0,1]");
}

RawCorpus parse_idx(std::istream& images, std::istream& labels) {
  const std::uint32_t magic = read_be32(images, "images");
  if (magic != kIdxImageMagic)
    throw FormatError("IDX images: bad magic " + std::to_string(magic));
  RawCorpus c;
  c.count = read_be32(images, "images");
  c.height = read_be32(images, "images");
  c.width = read_be32(images, "images");

  std::size_t label_count = 0;
  c.labels = read_labels(labels, label_count);
  if (label_count != c.count)
    throw ConsistencyError("IDX: " + std::to_string(c.count) + " images but " +
                           std::to_string(label_count) + " labels");

  c.pixels.resize(c.count * c.height * c.width);
  read_payload(images, c.pixels.data(), c.pixels.size(), "images");
  return c;
}

RawCorpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  auto fi = open_or_throw(images);
  auto fl = open_or_throw(labels);
  return parse_idx(fi, fl);
}

std::vector<double> rotate_image(std::span<const double> img, std::size_t h, std::size_t w,
                                 double angle_deg) {
  if (img.size() != h * w) throw ShapeError("rotate_image: size != h*w");
  const auto [cs, sn] = exact_cos_sin(angle_deg);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;

  auto at = [&](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) return 0.0;
    return img[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  };

  std::vector<double> out(h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      // Output offset with y pointing up, mapped back through the inverse rotation.
      const double x = static_cast<double>(c) - cx;
      const double y = cy - static_cast<double>(r);
      const double sx = cx + (x * cs + y * sn);
      const double sy = cy - (-x * sn + y * cs);
      const double fx = std::floor(sx), fy = std::floor(sy);
      const long c0 = static_cast<long>(fx), r0 = static_cast<long>(fy);
      const double ax = sx - fx, ay = sy - fy;
      double v = (1.0 - ay) * ((1.0 - ax) * at(r0, c0) + ax * at(r0, c0 + 1)) +
                 ay * ((1.0 - ax) * at(r0 + 1, c0) + ax * at(r0 + 1, c0 + 1));
      out[r * w + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

std::vector<TaskDataset> build_task_sequence(const RawCorpus& corpus,
                                             std::span<const double> angles,
                                             std::optional<std::size_t> subsample,
                                             std::uint64_t seed) {
  if (corpus.count == 0) throw PreconditionError("build_task_sequence: empty corpus");
  if (angles.empty()) throw PreconditionError("build_task_sequence: no angles");
  const std::size_t m = subsample.value_or(corpus.count);
  if (m == 0 || m > corpus.count)
    throw PreconditionError("build_task_sequence: subsample " + std::to_string(m) +
                            " exceeds corpus size " + std::to_string(corpus.count));

  std::vector<std::size_t> picked(corpus.count);
  std::iota(picked.begin(), picked.end(), std::size_t{0});
  if (m < corpus.count) {
    Rng rng(derive_seed(seed, {stream::kSubsample}));
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (corpus.count - i));
      std::swap(picked[i], picked[j]);
    }
    picked.resize(m);
    std::sort(picked.begin(), picked.end());
  }

  const std::size_t classes =
      std::size_t{*std::max_element(corpus.labels.begin(), corpus.labels.end())} + 1;
  const std::size_t hw = corpus.height * corpus.width;

  std::vector<TaskDataset> tasks(angles.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t t = 0; t < angles.size(); ++t) {
    TaskDataset& task = tasks[t];
    task.task_id = t;
    task.rotation_deg = angles[t];
    task.num_classes = classes;
    task.inputs = Matrix(m, hw);
    task.labels.resize(m);
    std::vector<double> img(hw);
    for (std::size_t i = 0; i < m; ++i) {
      const auto src = corpus.image(picked[i]);
      for (std::size_t p = 0; p < hw; ++p) img[p] = src[p] / 255.0;
      const auto rot = rotate_image(img, corpus.height, corpus.width, angles[t]);
      std::copy(rot.begin(), rot.end(), task.inputs.row(i).begin());
      task.labels[i] = corpus.labels[picked[i]];
    }
  }
  return tasks;
}

std::vector<TaskDataset> synthetic_tasks(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.tasks == 0 || spec.n == 0 || spec.d == 0 || spec.classes == 0)
    throw PreconditionError("synthetic_tasks: counts must be positive");
  if (spec.classes > spec.n) throw PreconditionError("synthetic_tasks: classes > n");

  std::vector<TaskDataset> tasks;
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    Rng rng(derive_seed(seed, {stream::kSynthetic, t}));
    Matrix means(spec.classes, spec.d);
    for (double& v : means.data()) v = 2.0 * standard_normal(rng);

    std::vector<std::uint32_t> labels(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) labels[i] = static_cast<std::uint32_t>(i % spec.classes);
    for (std::size_t i = spec.n; i > 1; --i) std::swap(labels[i - 1], labels[rng() % i]);

    TaskDataset task;
    task.task_id = t;
    task.num_classes = spec.classes;
    task.inputs = Matrix(spec.n, spec.d);
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t j = 0; j < spec.d; ++j) {
        const double z = means(labels[i], j) + 0.5 * standard_normal(rng);
        task.inputs(i, j) = 1.0 / (1.0 + std::exp(-z));
      }
    task.labels = std::move(labels);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

TaskDataset concatenate(std::span<const TaskDataset> tasks) {
  if (tasks.empty()) throw PreconditionError("concatenate: no tasks");
  const std::size_t d = tasks.front().d();
  std::size_t n = 0, classes = 0;
  for (const auto& t : tasks) {
    if (t.d() != d) throw ShapeError("concatenate: input dims differ");
    n += t.n();
    classes = std::max(classes, t.num_classes);
  }
  TaskDataset out;
  out.num_classes = classes;
  out.inputs = Matrix(n, d);
  out.labels.reserve(n);
  std::size_t r = 0;
  for (const auto& t : tasks) {
    std::copy(t.inputs.data().begin(), t.inputs.data().end(), out.inputs.row(r).begin());
    r += t.n();
    out.labels.insert(out.labels.end(), t.labels.begin(), t.labels.end());
  }
  return out;
}

void write_task_idx(const TaskDataset& task, std::size_t height, std::size_t width,
                    const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (height * width != task.d()) throw ShapeError("write_task_idx: h*w != d");
  std::ofstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  if (!fi || !fl) throw IoError("cannot write task files under " + images.parent_path().string());
  write_be32(fi, kIdxFloatImageMagic);
  write_be32(fi, static_cast<std::uint32_t>(task.n()));
  write_be32(fi, static_cast<std::uint32_t>(height));
  write_be32(fi, static_cast<std::uint32_t>(width));
  for (double v : task.inputs.data()) write_be32(fi, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  write_be32(fl, kIdxLabelMagic);
  write_be32(fl, static_cast<std::uint32_t>(task.n()));
  for (auto y : task.labels) fl.put(static_cast<char>(y));
}

TaskDataset read_task_idx(const std::filesystem::path& images,
                          const std::filesystem::path& labels, std::size_t num_classes) {
  auto fi = open_or_throw(images);
  auto fl = open_or_throw(labels);
  const std::uint32_t magic = read_be32(fi, "images");
  std::size_t n = read_be32(fi, "images");
  const std::size_t h = read_be32(fi, "images");
  const std::size_t w = read_be32(fi, "images");

  TaskDataset task;
  task.num_classes = num_classes;
  task.inputs = Matrix(n, h * w);
  if (magic == kIdxFloatImageMagic) {
    std::vector<std::uint8_t> raw(n * h * w * 4);
    read_payload(fi, raw.data(), raw.size(), "images");
    for (std::size_t i = 0; i < n * h * w; ++i) {
      const std::uint8_t* b = raw.data() + 4 * i;
      const std::uint32_t bits = (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
                                 (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
      task.inputs.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  } else if (magic == kIdxImageMagic) {
    std::vector<std::uint8_t> raw(n * h * w);
    read_payload(fi, raw.data(), raw.size(), "images");
    for (std::size_t i = 0; i < raw.size(); ++i) task.inputs.data()[i] = raw[i] / 255.0;
  } else {
    throw FormatError("task images: bad magic " + std::to_string(magic));
  }
  std::size_t label_count = 0;
  auto raw_labels = read_labels(fl, label_count);
  if (label_count != n) throw ConsistencyError("task files: image/label count mismatch");
  task.labels.assign(raw_labels.begin(), raw_labels.end());
  if (num_classes == 0)
    task.num_classes = std::size_t{*std::max_element(task.labels.begin(), task.labels.end())} + 1;
  task.validate();
  return task;
}

}  // namespace widthlab
