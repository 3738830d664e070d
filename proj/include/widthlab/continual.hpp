#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "widthlab/dataset.hpp"
#include "widthlab/network.hpp"
#include "widthlab/optim.hpp"

namespace widthlab {

/// Each row of each of `hidden_layers` layers is active independently with
/// probability alpha; the stream depends only on (seed, task_id).
/// Throws ConfigError unless 0 < alpha <= 1.
ActiveRowMask sample_mask(double alpha, std::size_t width, std::size_t hidden_layers,
                          std::uint64_t seed, std::size_t task_id);

struct ProtocolConfig {
  std::size_t width = 256;
  std::size_t hidden_layers = 1;
  double alpha = 1.0;
  TrainConfig train;       // train.seed is ignored; per-task seeds derive from `seed`
  std::uint64_t seed = 0;
  bool swap_heads = false;
  std::size_t gap_probe_limit = 500;      // rows of D_t used for output gaps; 0 = all
  std::size_t snapshot_budget_bytes = 0;  // 0 = keep every snapshot in memory
  std::filesystem::path spill_dir;        // where snapshots go once over budget
};

struct GapStats {
  double max_gap = 0.0;
  double mean_gap = 0.0;
};

struct GapEntry {
  std::size_t t = 0;        // 1-based task indices, t <= t_prime
  std::size_t t_prime = 0;
  GapStats gap;
};

struct TaskHeads {
  Matrix input;
  Matrix output;
};

/// Snapshots M_1..M_T (0-based storage: snapshot(t-1) is M_t) with their masks.
class ExperimentRecord {
 public:
  ProtocolConfig config;
  std::vector<ActiveRowMask> masks;
  std::vector<TaskHeads> heads;        // per task, swap_heads mode only
  std::vector<GapEntry> gaps;
  std::vector<double> train_loss;      // final-epoch loss per task
  std::vector<double> stage_seconds;   // wall clock per task; not part of the content

  std::size_t num_tasks() const { return entries_.size(); }
  /// Weights of M_{i+1}, loaded from disk when spilled.
  ModelSnapshot snapshot(std::size_t i) const;
  /// M_{i+1} prepared for inference on task j (heads of task j when swapping).
  ModelSnapshot model_for_task(std::size_t i, std::size_t j) const;

  void add_snapshot(ModelSnapshot s);
  std::size_t resident_bytes() const;

 private:
  struct Entry {
    std::optional<ModelSnapshot> memory;
    std::filesystem::path file;
  };
  std::vector<Entry> entries_;
  std::size_t resident_bytes_ = 0;
};

/// Sequential protocol. Throws ConfigError when tasks disagree on d or K and
/// heads are not swapped.
ExperimentRecord run_sequence(std::span<const TaskDataset> tasks, const ProtocolConfig& cfg);

/// Max / mean l2 logit distance over the probe rows, both models under `mask`.
GapStats output_gap(const ModelSnapshot& a, const ModelSnapshot& b, const TaskDataset& probe,
                    const ActiveRowMask& mask, std::size_t probe_limit = 0);

/// Directory of snapshot_<t>.wlsnap files plus manifest.json.
void write_record(const ExperimentRecord& rec, const std::filesystem::path& dir);
ExperimentRecord read_record(const std::filesystem::path& dir);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace widthlab
