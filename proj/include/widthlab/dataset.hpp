#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <vector>

#include "widthlab/linalg.hpp"

namespace widthlab {

/// One supervised task: n x d inputs in [0,1] and n labels in [0, K).
struct TaskDataset {
  Matrix inputs;
  std::vector<std::uint32_t> labels;
  std::size_t task_id = 0;
  double rotation_deg = 0.0;
  std::size_t num_classes = 0;

  std::size_t n() const { return inputs.rows(); }
  std::size_t d() const { return inputs.cols(); }

  /// Throws ConsistencyError when an invariant is broken.
  void validate() const;
};

/// Raw byte images as stored in IDX files.
struct RawCorpus {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // count * height * width, row-major per image
  std::vector<std::uint8_t> labels;

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * height * width, height * width};
  }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxFloatImageMagic = 0x00000D03;

RawCorpus parse_idx(std::istream& images, std::istream& labels);
RawCorpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Counterclockwise rotation about the image center, bilinear, zero fill,
/// clamped to [0,1]. `img` is h x w row-major.
std::vector<double> rotate_image(std::span<const double> img, std::size_t h, std::size_t w,
                                 double angle_deg);

/// One task per angle over a shared seeded subsample; pixels scaled by 1/255.
std::vector<TaskDataset> build_task_sequence(const RawCorpus& corpus,
                                             std::span<const double> angles,
                                             std::optional<std::size_t> subsample,
                                             std::uint64_t seed);

struct SyntheticSpec {
  std::size_t tasks = 1;
  std::size_t n = 10;
  std::size_t d = 4;
  std::size_t classes = 2;
};

/// Seeded Gaussian class clusters squashed into [0,1]; labels balanced.
std::vector<TaskDataset> synthetic_tasks(const SyntheticSpec& spec, std::uint64_t seed);

/// Rows of all tasks stacked (used for joint training).
TaskDataset concatenate(std::span<const TaskDataset> tasks);

/// Rotated task splits on disk: float32 IDX images (magic 0x00000D03) plus
/// ubyte IDX labels.
void write_task_idx(const TaskDataset& task, std::size_t height, std::size_t width,
                    const std::filesystem::path& images, const std::filesystem::path& labels);
TaskDataset read_task_idx(const std::filesystem::path& images,
                          const std::filesystem::path& labels, std::size_t num_classes);

}  // namespace widthlab
