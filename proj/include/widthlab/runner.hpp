#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "widthlab/dataset.hpp"
#include "widthlab/optim.hpp"
#include "widthlab/theory.hpp"

namespace widthlab {

inline constexpr const char* kResultsSchema = "widthlab.results/1";

struct SweepConfig {
  // Data. Either IDX files under data_root or a synthetic task family.
  std::filesystem::path data_root;
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::vector<double> angles{0.0, 22.5, 45.0, 67.5, 90.0};
  std::optional<std::size_t> subsample_train = 5000;  // nullopt = whole split
  std::optional<std::size_t> subsample_test = 1000;
  bool synthetic = false;
  std::size_t synthetic_tasks = 3;
  std::size_t synthetic_train = 64;
  std::size_t synthetic_test = 32;
  std::size_t synthetic_dim = 8;
  std::size_t synthetic_classes = 3;

  // Grid.
  std::vector<std::size_t> widths{256};
  std::vector<std::size_t> depths{1};
  std::vector<double> alphas{1.0};
  std::vector<OptimizerKind> optimizers{OptimizerKind::sgd};
  std::vector<std::uint64_t> seeds{0};
  std::uint64_t master_seed = 0;

  // Training and protocol.
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  std::optional<double> lr;  // nullopt = per-optimizer default
  bool swap_heads = false;
  bool joint = true;
  std::size_t gap_probe_limit = 500;
  std::size_t snapshot_budget_bytes = 0;

  // Output.
  std::filesystem::path out_dir = "widthlab-out";
  bool save_records = false;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

/// Flat JSON keys mirror the struct fields; unknown keys are a ConfigError.
/// Relative data_root resolves against `base_dir`.
SweepConfig sweep_config_from_json(const std::string& text,
                                   const std::filesystem::path& base_dir = {});
SweepConfig load_sweep_config(const std::filesystem::path& path);
std::string sweep_config_to_json(const SweepConfig& cfg);
/// Throws ConfigError; returns warnings for legal but unusual settings.
std::vector<std::string> validate(const SweepConfig& cfg);

struct Cell {
  std::size_t index = 0;  // position in grid order
  std::size_t width = 0;
  std::size_t depth = 0;
  double alpha = 1.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::uint64_t seed = 0;       // user seed from the seeds list
  std::uint64_t cell_seed = 0;  // derived from master seed and the cell key only
};

std::vector<Cell> expand_grid(const SweepConfig& cfg);
std::uint64_t cell_seed(std::uint64_t master, std::size_t width, std::size_t depth, double alpha,
                        OptimizerKind opt, std::uint64_t seed);
std::string cell_name(const Cell& c);

struct DriftRow {
  std::size_t cell = 0;
  std::size_t task = 0;  // 1-based; drift from M_{task-1} (init for task 1) to M_task
  DriftObservation obs;
};

struct ResultRow {
  Cell cell;
  double AA = 0.0, AF = 0.0, LA = 0.0;
  std::optional<double> JA;
  std::vector<double> curve;
  std::vector<double> drift_per_layer;  // mean over tasks
  double seconds = 0.0;
};

struct TaskData {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
  std::string source;
};

/// Loads or generates the task family. Missing files raise IoError.
TaskData prepare_tasks(const SweepConfig& cfg);

struct SweepResult {
  std::vector<ResultRow> rows;  // grid order
  std::vector<DriftRow> drift;  // grid order, then task, then layer
  std::optional<DriftFit> fit;
  std::vector<std::string> warnings;
  std::size_t num_tasks = 0;
  std::string data_source;
};

using ProgressFn = std::function<void(const ResultRow&, std::size_t done, std::size_t total)>;

/// Runs every cell on a worker pool and merges in grid order. A NumericError
/// is rethrown naming the first failing cell.
SweepResult run_sweep(const SweepConfig& cfg, const TaskData& data, ProgressFn progress = {});

/// Drift rows with this task index (M_1 to M_2) feed the power-law fit.
inline constexpr std::size_t kFitTask = 2;

/// Fit over the kFitTask rows of every cell; nullopt when fewer than two
/// active counts.
std::optional<DriftFit> fit_drift(const std::vector<DriftRow>& drift);

std::string results_csv(const SweepResult& r);
std::string drift_csv(const SweepResult& r);
std::string timings_csv(const SweepResult& r);
std::string manifest_json(const SweepConfig& cfg, const SweepResult& r);
std::string drift_fit_json(const DriftFit& fit);
/// (active_count, gamma * count^-beta) samples, log-spaced over [lo, hi].
std::string drift_curve_csv(const DriftFit& fit, double lo, double hi, std::size_t samples = 64);

/// results.csv, manifest.json, drift.csv, timings.csv and, when available,
/// drift_fit.json and drift_curve.csv.
void write_sweep_outputs(const SweepConfig& cfg, const SweepResult& r,
                         const std::filesystem::path& dir);

// ---- reporting ----

struct CsvRow {
  std::size_t width = 0, depth = 0;
  double alpha = 1.0;
  std::string optimizer;
  std::uint64_t seed = 0;
  double AA = 0.0, AF = 0.0, LA = 0.0;
  std::optional<double> JA;
  std::vector<double> curve;
};

/// Throws FormatError on a wrong header or malformed field.
std::vector<CsvRow> parse_results_csv(const std::string& text);

struct ChartPoint {
  double x = 0.0, y = 0.0;
};
struct ChartSeries {
  std::string name;
  std::vector<ChartPoint> points;
};
struct Chart {
  std::string title, x_label, y_label;
  std::vector<ChartSeries> series;
};

/// Plain SVG; every plotted point is repeated in a comment
/// `<!-- point series="..." x=... y=... -->`.
std::string render_svg(const Chart& chart);
std::vector<std::pair<std::string, ChartPoint>> parse_svg_points(const std::string& svg);

Chart chart_af_vs_width(const std::vector<CsvRow>& rows);
Chart chart_forgetting_vs_task(const std::vector<CsvRow>& rows);
Chart chart_af_vs_depth(const std::vector<CsvRow>& rows);
/// From drift.csv text; mean kFitTask drift per width over cells and layers.
Chart chart_drift_vs_width(const std::string& drift_csv_text);

struct Report {
  std::string summary;  // plain-text table plus trend flags
  std::vector<std::pair<std::string, std::string>> files;  // name -> contents
  bool depth_trend_flagged = false;
};

Report build_report(const std::string& results_csv_text,
                    const std::optional<std::string>& drift_csv_text);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace widthlab
