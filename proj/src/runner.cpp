#include "widthlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "widthlab/continual.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/metrics.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {

using nlohmann::json;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---- config ----

namespace {

const std::set<std::string> kConfigKeys = {
    "data_root",       "train_images",      "train_labels",     "test_images",
    "test_labels",     "angles",            "subsample_train",  "subsample_test",
    "synthetic",       "synthetic_tasks",   "synthetic_train",  "synthetic_test",
    "synthetic_dim",   "synthetic_classes", "widths",           "depths",
    "alphas",          "optimizers",        "seeds",            "master_seed",
    "epochs",          "batch_size",        "lr",               "swap_heads",
    "joint",           "gap_probe_limit",   "snapshot_budget_bytes",
    "out",             "save_records",      "workers"};

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void take_optional_count(const json& j, const char* key, std::optional<std::size_t>& dst) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null())
    dst.reset();
  else
    dst = j.at(key).get<std::size_t>();
}

json optional_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

SweepConfig sweep_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [k, v] : j.items())
    if (!kConfigKeys.count(k)) throw ConfigError("config: unknown key '" + k + "'");

  SweepConfig c;
  try {
    std::string root;
    take(j, "data_root", root);
    c.data_root = root;
    if (!c.data_root.empty() && c.data_root.is_relative() && !base_dir.empty())
      c.data_root = base_dir / c.data_root;
    take(j, "train_images", c.train_images);
    take(j, "train_labels", c.train_labels);
    take(j, "test_images", c.test_images);
    take(j, "test_labels", c.test_labels);
    take(j, "angles", c.angles);
    take_optional_count(j, "subsample_train", c.subsample_train);
    take_optional_count(j, "subsample_test", c.subsample_test);
    take(j, "synthetic", c.synthetic);
    take(j, "synthetic_tasks", c.synthetic_tasks);
    take(j, "synthetic_train", c.synthetic_train);
    take(j, "synthetic_test", c.synthetic_test);
    take(j, "synthetic_dim", c.synthetic_dim);
    take(j, "synthetic_classes", c.synthetic_classes);
    take(j, "widths", c.widths);
    take(j, "depths", c.depths);
    take(j, "alphas", c.alphas);
    if (j.contains("optimizers")) {
      c.optimizers.clear();
      for (const auto& s : j.at("optimizers").get<std::vector<std::string>>())
        c.optimizers.push_back(parse_optimizer(s));
    }
    take(j, "seeds", c.seeds);
    take(j, "master_seed", c.master_seed);
    take(j, "epochs", c.epochs);
    take(j, "batch_size", c.batch_size);
    if (j.contains("lr")) {
      if (j.at("lr").is_null())
        c.lr.reset();
      else
        c.lr = j.at("lr").get<double>();
    }
    take(j, "swap_heads", c.swap_heads);
    take(j, "joint", c.joint);
    take(j, "gap_probe_limit", c.gap_probe_limit);
    take(j, "snapshot_budget_bytes", c.snapshot_budget_bytes);
    std::string out;
    take(j, "out", out);
    if (!out.empty()) c.out_dir = out;
    take(j, "save_records", c.save_records);
    take(j, "workers", c.workers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

SweepConfig load_sweep_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return sweep_config_from_json(ss.str(), path.parent_path());
}

namespace {

json config_json(const SweepConfig& c, bool with_execution) {
  std::vector<std::string> opts;
  for (auto o : c.optimizers) opts.push_back(to_string(o));
  json j{{"data_root", c.data_root.string()},
         {"train_images", c.train_images},
         {"train_labels", c.train_labels},
         {"test_images", c.test_images},
         {"test_labels", c.test_labels},
         {"angles", c.angles},
         {"subsample_train", optional_json(c.subsample_train)},
         {"subsample_test", optional_json(c.subsample_test)},
         {"synthetic", c.synthetic},
         {"synthetic_tasks", c.synthetic_tasks},
         {"synthetic_train", c.synthetic_train},
         {"synthetic_test", c.synthetic_test},
         {"synthetic_dim", c.synthetic_dim},
         {"synthetic_classes", c.synthetic_classes},
         {"widths", c.widths},
         {"depths", c.depths},
         {"alphas", c.alphas},
         {"optimizers", opts},
         {"seeds", c.seeds},
         {"master_seed", c.master_seed},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr", c.lr ? json(*c.lr) : json(nullptr)},
         {"swap_heads", c.swap_heads},
         {"joint", c.joint},
         {"gap_probe_limit", c.gap_probe_limit},
         {"snapshot_budget_bytes", c.snapshot_budget_bytes},
         {"save_records", c.save_records}};
  if (with_execution) {
    j["out"] = c.out_dir.string();
    j["workers"] = c.workers;
  }
  return j;
}

}  // namespace

std::string sweep_config_to_json(const SweepConfig& cfg) { return config_json(cfg, true).dump(2); }

std::vector<std::string> validate(const SweepConfig& c) {
  if (c.widths.empty() || c.depths.empty() || c.alphas.empty() || c.optimizers.empty() ||
      c.seeds.empty())
    throw ConfigError("config: widths, depths, alphas, optimizers and seeds must be nonempty");
  std::vector<std::string> warnings;
  for (auto w : c.widths) {
    if (w == 0) throw ConfigError("config: width must be >= 1");
    if (!std::has_single_bit(w))
      warnings.push_back("width " + std::to_string(w) + " is not a power of two");
  }
  for (double a : c.alphas)
    if (!(a > 0.0 && a <= 1.0))
      throw ConfigError("config: alpha must be in (0, 1], got " + format_double(a));
  if (c.swap_heads)
    for (auto d : c.depths)
      if (d == 0) throw ConfigError("config: swap_heads needs depth >= 1");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    throw ConfigError("config: duplicate seeds");
  if (c.epochs == 0) throw ConfigError("config: epochs must be >= 1");
  if (c.batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
  if (c.lr && !(std::isfinite(*c.lr) && *c.lr > 0.0)) throw ConfigError("config: lr must be > 0");
  if (c.synthetic) {
    if (c.synthetic_tasks == 0 || c.synthetic_train == 0 || c.synthetic_test == 0 ||
        c.synthetic_dim == 0 || c.synthetic_classes == 0)
      throw ConfigError("config: synthetic counts must be positive");
    if (c.synthetic_classes > c.synthetic_train)
      throw ConfigError("config: synthetic_classes exceeds synthetic_train");
  } else {
    if (c.angles.empty()) throw ConfigError("config: angles must be nonempty");
    for (double a : c.angles)
      if (!std::isfinite(a)) throw ConfigError("config: angles must be finite");
    if ((c.subsample_train && *c.subsample_train == 0) ||
        (c.subsample_test && *c.subsample_test == 0))
      throw ConfigError("config: subsample sizes must be >= 1");
  }
  return warnings;
}

// ---- grid ----

std::uint64_t cell_seed(std::uint64_t master, std::size_t width, std::size_t depth, double alpha,
                        OptimizerKind opt, std::uint64_t seed) {
  return derive_seed(master, {width, depth, std::bit_cast<std::uint64_t>(alpha),
                              static_cast<std::uint64_t>(opt), seed});
}

std::vector<Cell> expand_grid(const SweepConfig& cfg) {
  std::vector<Cell> cells;
  for (auto opt : cfg.optimizers)
    for (auto depth : cfg.depths)
      for (double alpha : cfg.alphas)
        for (auto width : cfg.widths)
          for (auto seed : cfg.seeds) {
            Cell c{cells.size(), width, depth, alpha, opt, seed,
                   cell_seed(cfg.master_seed, width, depth, alpha, opt, seed)};
            cells.push_back(c);
          }
  return cells;
}

std::string cell_name(const Cell& c) {
  return "w" + std::to_string(c.width) + "_d" + std::to_string(c.depth) + "_a" +
         format_double(c.alpha) + "_" + to_string(c.optimizer) + "_s" + std::to_string(c.seed);
}

// ---- data ----

TaskData prepare_tasks(const SweepConfig& cfg) {
  TaskData data;
  if (cfg.synthetic) {
    SyntheticSpec spec{cfg.synthetic_tasks, cfg.synthetic_train + cfg.synthetic_test,
                       cfg.synthetic_dim, cfg.synthetic_classes};
    auto all = synthetic_tasks(spec, derive_seed(cfg.master_seed, {stream::kSynthetic}));
    for (auto& t : all) {
      TaskDataset tr, te;
      tr.task_id = te.task_id = t.task_id;
      tr.num_classes = te.num_classes = t.num_classes;
      tr.inputs = Matrix(cfg.synthetic_train, t.d());
      te.inputs = Matrix(cfg.synthetic_test, t.d());
      const auto src = t.inputs.data();
      std::copy_n(src.begin(), tr.inputs.data().size(), tr.inputs.data().begin());
      std::copy_n(src.begin() + static_cast<long>(tr.inputs.data().size()),
                  te.inputs.data().size(), te.inputs.data().begin());
      tr.labels.assign(t.labels.begin(), t.labels.begin() + static_cast<long>(cfg.synthetic_train));
      te.labels.assign(t.labels.begin() + static_cast<long>(cfg.synthetic_train), t.labels.end());
      data.train.push_back(std::move(tr));
      data.test.push_back(std::move(te));
    }
    data.source = "synthetic";
    return data;
  }

  std::filesystem::path root = cfg.data_root;
  if (root.empty())
    if (const char* env = std::getenv("WIDTHLAB_DATA")) root = env;
  if (root.empty())
    throw ConfigError("config: no data_root given and WIDTHLAB_DATA is unset");
  for (const auto& name : {cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels})
    if (!std::filesystem::exists(root / name))
      throw IoError("missing dataset file " + (root / name).string());

  const RawCorpus train = load_idx(root / cfg.train_images, root / cfg.train_labels);
  const RawCorpus test = load_idx(root / cfg.test_images, root / cfg.test_labels);
  if (cfg.subsample_train && *cfg.subsample_train > train.count)
    throw ConfigError("config: subsample_train exceeds the " + std::to_string(train.count) +
                      " training images");
  if (cfg.subsample_test && *cfg.subsample_test > test.count)
    throw ConfigError("config: subsample_test exceeds the " + std::to_string(test.count) +
                      " test images");
  data.train = build_task_sequence(train, cfg.angles, cfg.subsample_train,
                                   derive_seed(cfg.master_seed, {stream::kSubsample, 0}));
  data.test = build_task_sequence(test, cfg.angles, cfg.subsample_test,
                                  derive_seed(cfg.master_seed, {stream::kSubsample, 1}));
  for (std::size_t t = 0; t < data.test.size(); ++t)
    data.test[t].num_classes = std::max(data.test[t].num_classes, data.train[t].num_classes);
  for (std::size_t t = 0; t < data.train.size(); ++t)
    data.train[t].num_classes = data.test[t].num_classes;
  data.source = root.string();
  return data;
}

// ---- sweep ----

namespace {

struct CellOutput {
  ResultRow row;
  std::vector<DriftRow> drift;
};

CellOutput run_cell(const SweepConfig& cfg, const TaskData& data, const Cell& cell) {
  const auto started = std::chrono::steady_clock::now();
  ProtocolConfig pc;
  pc.width = cell.width;
  pc.hidden_layers = cell.depth;
  pc.alpha = cell.alpha;
  pc.train.optimizer = cell.optimizer;
  pc.train.lr = cfg.lr ? *cfg.lr : default_lr(cell.optimizer);
  pc.train.batch_size = cfg.batch_size;
  pc.train.epochs = cfg.epochs;
  pc.seed = cell.cell_seed;
  pc.swap_heads = cfg.swap_heads;
  pc.gap_probe_limit = cfg.gap_probe_limit;
  pc.snapshot_budget_bytes = cfg.snapshot_budget_bytes;
  if (pc.snapshot_budget_bytes) pc.spill_dir = cfg.out_dir / "spill" / cell_name(cell);

  const ExperimentRecord rec = run_sequence(data.train, pc);
  const AccuracyMatrix r = accuracy_matrix(rec, data.test, cfg.swap_heads);

  CellOutput out;
  out.row.cell = cell;
  out.row.AA = average_accuracy(r);
  out.row.AF = average_forgetting(r);
  out.row.LA = learning_accuracy(r);
  out.row.curve = forgetting_curve(r);
  if (cfg.joint && !cfg.swap_heads) out.row.JA = joint_accuracy(data.train, data.test, pc);

  const auto& first = data.train.front();
  ModelSnapshot prev = init_model(ArchSpec{first.d(), cell.width, cell.depth, first.num_classes},
                                  cell.cell_seed);
  std::vector<double> sums(cell.depth, 0.0);
  std::vector<std::size_t> counts(cell.depth, 0);
  for (std::size_t t = 0; t < rec.num_tasks(); ++t) {
    ModelSnapshot next = rec.snapshot(t);
    try {
      for (const auto& o : measure_drift(prev, next, rec.masks[t])) {
        out.drift.push_back({cell.index, t + 1, o});
        sums[o.layer] += o.drift;
        ++counts[o.layer];
      }
    } catch (const DegenerateError&) {
      // No active rows on this task; nothing moved.
    }
    prev = std::move(next);
  }
  for (std::size_t l = 0; l < cell.depth; ++l)
    out.row.drift_per_layer.push_back(counts[l] ? sums[l] / static_cast<double>(counts[l]) : 0.0);

  if (cfg.save_records) write_record(rec, cfg.out_dir / "records" / cell_name(cell));
  out.row.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace

SweepResult run_sweep(const SweepConfig& cfg, const TaskData& data, ProgressFn progress) {
  SweepResult res;
  res.warnings = validate(cfg);
  if (data.train.empty() || data.train.size() != data.test.size())
    throw PreconditionError("run_sweep: need matching nonempty train and test tasks");
  res.num_tasks = data.train.size();
  res.data_source = data.source;

  const std::vector<Cell> cells = expand_grid(cfg);
  std::vector<CellOutput> outputs(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());

  std::size_t workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, cells.size());

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex progress_mu;
  std::size_t done = 0;
  const auto work = [&](bool single) {
    if (!single) kernels::set_threads(1);
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size() || failed.load()) return;
      try {
        outputs[i] = run_cell(cfg, data, cells[i]);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
        continue;
      }
      std::lock_guard lock(progress_mu);
      ++done;
      if (progress) progress(outputs[i].row, done, cells.size());
    }
  };
  if (workers <= 1) {
    work(true);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, false);
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericError& e) {
      throw NumericError("cell " + cell_name(cells[i]) + ": " + e.what());
    } catch (const DegenerateError& e) {
      throw DegenerateError("cell " + cell_name(cells[i]) + ": " + e.what());
    }
  }

  for (auto& o : outputs) {
    res.rows.push_back(std::move(o.row));
    for (auto& d : o.drift) res.drift.push_back(d);
  }
  res.fit = fit_drift(res.drift);
  return res;
}

std::optional<DriftFit> fit_drift(const std::vector<DriftRow>& drift) {
  std::vector<DriftPoint> pts;
  std::set<std::size_t> counts;
  for (const auto& d : drift)
    if (d.task == kFitTask && d.obs.drift > 0.0 && d.obs.active_count > 0) {
      pts.push_back({static_cast<double>(d.obs.active_count), d.obs.drift});
      counts.insert(d.obs.active_count);
    }
  if (counts.size() < 2) return std::nullopt;
  return fit_power_law(pts);
}

// ---- writers ----

namespace {

std::string cell_prefix(const Cell& c) {
  return std::to_string(c.width) + "," + std::to_string(c.depth) + "," + format_double(c.alpha) +
         "," + to_string(c.optimizer) + "," + std::to_string(c.seed);
}

std::vector<std::string> csv_header(std::size_t tasks) {
  std::vector<std::string> h{"width", "depth", "alpha", "optimizer", "seed", "AA", "AF", "LA", "JA"};
  for (std::size_t t = 1; t <= tasks; ++t) h.push_back("f" + std::to_string(t));
  return h;
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += v[i];
  }
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

json fit_to_json(const DriftFit& f) {
  return {{"gamma", f.gamma},
          {"beta", f.beta},
          {"residual", f.residual},
          {"points", f.points},
          {"log_correlation", f.log_correlation}};
}

}  // namespace

std::string results_csv(const SweepResult& r) {
  std::string s = join(csv_header(r.num_tasks), ',') + "\n";
  for (const auto& row : r.rows) {
    s += cell_prefix(row.cell) + "," + format_double(row.AA) + "," + format_double(row.AF) + "," +
         format_double(row.LA) + "," + (row.JA ? format_double(*row.JA) : std::string());
    for (double f : row.curve) s += "," + format_double(f);
    s += "\n";
  }
  return s;
}

std::string drift_csv(const SweepResult& r) {
  std::string s = "width,depth,alpha,optimizer,seed,task,layer,active_count,drift,drift_spectral\n";
  for (const auto& d : r.drift) {
    s += cell_prefix(r.rows.at(d.cell).cell) + "," + std::to_string(d.task) + "," +
         std::to_string(d.obs.layer) + "," + std::to_string(d.obs.active_count) + "," +
         format_double(d.obs.drift) + "," + format_double(d.obs.drift_spectral) + "\n";
  }
  return s;
}

std::string timings_csv(const SweepResult& r) {
  std::string s = "width,depth,alpha,optimizer,seed,seconds\n";
  for (const auto& row : r.rows) s += cell_prefix(row.cell) + "," + format_double(row.seconds) + "\n";
  return s;
}

std::string manifest_json(const SweepConfig& cfg, const SweepResult& r) {
  json cells = json::array();
  for (const auto& row : r.rows) {
    const Cell& c = row.cell;
    cells.push_back({{"name", cell_name(c)},
                     {"width", c.width},
                     {"depth", c.depth},
                     {"alpha", c.alpha},
                     {"optimizer", to_string(c.optimizer)},
                     {"seed", c.seed},
                     {"cell_seed", c.cell_seed},
                     {"drift_per_layer", row.drift_per_layer}});
  }
  json j{{"schema", kResultsSchema},
         {"csv_header", csv_header(r.num_tasks)},
         {"config", config_json(cfg, false)},
         {"data_source", r.data_source},
         {"tasks", r.num_tasks},
         {"seed_splitter",
          {{"kind", "splitmix64 counter hash"},
           {"master_seed", cfg.master_seed},
           {"key", "width, depth, alpha bits, optimizer, seed"}}},
         {"cells", cells},
         {"drift_fit", r.fit ? fit_to_json(*r.fit) : json(nullptr)},
         {"warnings", r.warnings}};
  return j.dump(2) + "\n";
}

std::string drift_fit_json(const DriftFit& fit) { return fit_to_json(fit).dump(2) + "\n"; }

std::string drift_curve_csv(const DriftFit& fit, double lo, double hi, std::size_t samples) {
  if (!(lo > 0.0) || !(hi >= lo) || samples < 2)
    throw PreconditionError("drift_curve_csv: need 0 < lo <= hi and >= 2 samples");
  std::string s = "active_count,predicted_drift\n";
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) *
                                                 static_cast<double>(i) /
                                                 static_cast<double>(samples - 1));
    s += format_double(x) + "," + format_double(fit.gamma * std::pow(x, -fit.beta)) + "\n";
  }
  return s;
}

void write_sweep_outputs(const SweepConfig& cfg, const SweepResult& r,
                         const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "results.csv", results_csv(r));
  write_file(dir / "manifest.json", manifest_json(cfg, r));
  write_file(dir / "drift.csv", drift_csv(r));
  write_file(dir / "timings.csv", timings_csv(r));
  if (r.fit) {
    write_file(dir / "drift_fit.json", drift_fit_json(*r.fit));
    double lo = 0.0, hi = 0.0;
    for (const auto& d : r.drift) {
      const double c = static_cast<double>(d.obs.active_count);
      if (c <= 0.0) continue;
      lo = lo == 0.0 ? c : std::min(lo, c);
      hi = std::max(hi, c);
    }
    write_file(dir / "drift_curve.csv", drift_curve_csv(*r.fit, lo, hi));
  }
}

// ---- CSV parsing ----

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line != "\r") lines.push_back(line);
  return lines;
}

double parse_num(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

template <typename T>
T parse_uint(const std::string& s, std::size_t line) {
  T v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("line " + std::to_string(line) + ": bad integer '" + s + "'");
  return v;
}

}  // namespace

std::vector<CsvRow> parse_results_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw FormatError("results.csv: empty");
  const auto header = split(lines[0], ',');
  if (header.size() < 9) throw FormatError("results.csv: header too short");
  const std::size_t tasks = header.size() - 9;
  if (header != csv_header(tasks)) throw FormatError("results.csv: unexpected header");

  std::vector<CsvRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    if (f.size() != header.size())
      throw FormatError("results.csv line " + std::to_string(i + 1) + ": expected " +
                        std::to_string(header.size()) + " fields");
    CsvRow r;
    r.width = parse_uint<std::size_t>(f[0], i + 1);
    r.depth = parse_uint<std::size_t>(f[1], i + 1);
    r.alpha = parse_num(f[2], i + 1);
    r.optimizer = f[3];
    if (r.optimizer.empty()) throw FormatError("results.csv: empty optimizer");
    r.seed = parse_uint<std::uint64_t>(f[4], i + 1);
    r.AA = parse_num(f[5], i + 1);
    r.AF = parse_num(f[6], i + 1);
    r.LA = parse_num(f[7], i + 1);
    if (!f[8].empty()) r.JA = parse_num(f[8], i + 1);
    for (std::size_t t = 0; t < tasks; ++t) r.curve.push_back(parse_num(f[9 + t], i + 1));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- charts ----

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::pair<double, double> padded_range(double lo, double hi) {
  if (hi - lo <= 1e-12 * std::max(1.0, std::abs(hi))) {
    const double pad = std::max(0.5, std::abs(hi) * 0.1);
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

struct Group {
  std::vector<double> values;
  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

std::string group_label(std::size_t depth, double alpha, const std::string& opt) {
  return "depth=" + std::to_string(depth) + " alpha=" + format_double(alpha) + " " + opt;
}

}  // namespace

std::string render_svg(const Chart& chart) {
  constexpr double W = 720, H = 440, left = 70, right = 200, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
  bool any = false;
  for (const auto& s : chart.series)
    for (const auto& p : s.points) {
      if (!any) {
        xlo = xhi = p.x;
        ylo = yhi = p.y;
        any = true;
      }
      xlo = std::min(xlo, p.x);
      xhi = std::max(xhi, p.x);
      ylo = std::min(ylo, p.y);
      yhi = std::max(yhi, p.y);
    }
  std::tie(xlo, xhi) = padded_range(xlo, xhi);
  std::tie(ylo, yhi) = padded_range(ylo, yhi);
  const auto sx = [&](double x) { return left + (x - xlo) / (xhi - xlo) * pw; };
  const auto sy = [&](double y) { return top + (yhi - y) / (yhi - ylo) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << xml_escape(chart.title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
     << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xlo + (xhi - xlo) * k / 4.0, yv = ylo + (yhi - ylo) * k / 4.0;
    os << "<text x=\"" << fixed(sx(xv)) << "\" y=\"" << top + ph + 16
       << "\" text-anchor=\"middle\">" << fixed(xv, 3) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fixed(sy(yv) + 4)
       << "\" text-anchor=\"end\">" << fixed(yv, 3) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">"
     << xml_escape(chart.x_label) << "</text>\n";
  os << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << top + ph / 2 << ")\">" << xml_escape(chart.y_label) << "</text>\n";

  for (std::size_t i = 0; i < chart.series.size(); ++i) {
    const auto& s = chart.series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    for (const auto& p : s.points)
      os << "<!-- point series=\"" << xml_escape(s.name) << "\" x=" << format_double(p.x)
         << " y=" << format_double(p.y) << " -->\n";
    if (s.points.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < s.points.size(); ++k)
        os << (k ? " " : "") << fixed(sx(s.points[k].x)) << ',' << fixed(sy(s.points[k].y));
      os << "\"/>\n";
    }
    for (const auto& p : s.points)
      os << "<circle cx=\"" << fixed(sx(p.x)) << "\" cy=\"" << fixed(sy(p.y))
         << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    os << "<rect x=\"" << left + pw + 14 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\""
       << color << "\"/>\n";
    os << "<text x=\"" << left + pw + 30 << "\" y=\"" << ly << "\">" << xml_escape(s.name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::pair<std::string, ChartPoint>> parse_svg_points(const std::string& svg) {
  static const std::regex re(R"re(<!-- point series="([^"]*)" x=(\S+) y=(\S+) -->)re");
  std::vector<std::pair<std::string, ChartPoint>> out;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator();
       ++it) {
    const auto& m = *it;
    out.push_back({m[1].str(), {parse_num(m[2].str(), 0), parse_num(m[3].str(), 0)}});
  }
  return out;
}

Chart chart_af_vs_width(const std::vector<CsvRow>& rows) {
  std::map<std::tuple<std::size_t, double, std::string>, std::map<std::size_t, Group>> g;
  for (const auto& r : rows) g[{r.depth, r.alpha, r.optimizer}][r.width].values.push_back(r.AF);
  Chart c{"Average forgetting vs width", "log2 width", "average forgetting", {}};
  for (const auto& [key, byw] : g) {
    ChartSeries s{group_label(std::get<0>(key), std::get<1>(key), std::get<2>(key)), {}};
    for (const auto& [w, grp] : byw) s.points.push_back({std::log2(static_cast<double>(w)), grp.mean()});
    c.series.push_back(std::move(s));
  }
  return c;
}

Chart chart_forgetting_vs_task(const std::vector<CsvRow>& rows) {
  std::map<std::tuple<std::size_t, std::size_t, double, std::string>, std::vector<Group>> g;
  for (const auto& r : rows) {
    auto& curves = g[{r.width, r.depth, r.alpha, r.optimizer}];
    if (curves.size() < r.curve.size()) curves.resize(r.curve.size());
    for (std::size_t t = 0; t < r.curve.size(); ++t) curves[t].values.push_back(r.curve[t]);
  }
  Chart c{"Forgetting vs task index", "task index", "forgetting", {}};
  for (const auto& [key, curves] : g) {
    ChartSeries s{"W=" + std::to_string(std::get<0>(key)) + " " +
                      group_label(std::get<1>(key), std::get<2>(key), std::get<3>(key)),
                  {}};
    for (std::size_t t = 0; t < curves.size(); ++t)
      s.points.push_back({static_cast<double>(t + 1), curves[t].mean()});
    c.series.push_back(std::move(s));
  }
  return c;
}

Chart chart_af_vs_depth(const std::vector<CsvRow>& rows) {
  std::map<std::tuple<std::size_t, double, std::string>, std::map<std::size_t, Group>> g;
  for (const auto& r : rows) g[{r.width, r.alpha, r.optimizer}][r.depth].values.push_back(r.AF);
  Chart c{"Average forgetting vs depth", "hidden layers", "average forgetting", {}};
  for (const auto& [key, byd] : g) {
    ChartSeries s{"W=" + std::to_string(std::get<0>(key)) + " alpha=" +
                      format_double(std::get<1>(key)) + " " + std::get<2>(key),
                  {}};
    for (const auto& [d, grp] : byd) s.points.push_back({static_cast<double>(d), grp.mean()});
    c.series.push_back(std::move(s));
  }
  return c;
}

Chart chart_drift_vs_width(const std::string& text) {
  const auto lines = lines_of(text);
  const std::string header =
      "width,depth,alpha,optimizer,seed,task,layer,active_count,drift,drift_spectral";
  if (lines.empty() || split(lines[0], ',') != split(header, ','))
    throw FormatError("drift.csv: unexpected header");
  std::map<std::tuple<std::size_t, double, std::string>, std::map<std::size_t, Group>> g;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    if (f.size() != 10) throw FormatError("drift.csv line " + std::to_string(i + 1) + ": 10 fields expected");
    if (parse_uint<std::size_t>(f[5], i + 1) != kFitTask) continue;
    g[{parse_uint<std::size_t>(f[1], i + 1), parse_num(f[2], i + 1), f[3]}]
     [parse_uint<std::size_t>(f[0], i + 1)]
         .values.push_back(parse_num(f[8], i + 1));
  }
  Chart c{"Relative drift vs width", "log2 width", "relative drift", {}};
  for (const auto& [key, byw] : g) {
    ChartSeries s{group_label(std::get<0>(key), std::get<1>(key), std::get<2>(key)), {}};
    for (const auto& [w, grp] : byw) s.points.push_back({std::log2(static_cast<double>(w)), grp.mean()});
    c.series.push_back(std::move(s));
  }
  return c;
}

Report build_report(const std::string& results_text, const std::optional<std::string>& drift_text) {
  const auto rows = parse_results_csv(results_text);
  Report rep;

  struct Agg {
    Group aa, af, la, ja;
    bool all_ja = true;
  };
  std::map<std::tuple<std::size_t, std::size_t, double, std::string>, Agg> groups;
  for (const auto& r : rows) {
    auto& a = groups[{r.width, r.depth, r.alpha, r.optimizer}];
    a.aa.values.push_back(r.AA);
    a.af.values.push_back(r.AF);
    a.la.values.push_back(r.LA);
    if (r.JA)
      a.ja.values.push_back(*r.JA);
    else
      a.all_ja = false;
  }

  std::ostringstream os;
  os << "width  depth  alpha   optimizer  seeds  AA       AF       LA       JA\n";
  for (const auto& [key, a] : groups) {
    const auto& [w, d, alpha, opt] = key;
    os << std::left;
    os.width(7);
    os << w;
    os.width(7);
    os << d;
    os.width(8);
    os << format_double(alpha);
    os.width(11);
    os << opt;
    os.width(7);
    os << a.aa.values.size();
    os << fixed(100 * a.aa.mean()) << "    " << fixed(100 * a.af.mean()) << "    "
       << fixed(100 * a.la.mean()) << "    " << (a.all_ja ? fixed(100 * a.ja.mean()) : "-") << "\n";
  }

  // Forgetting should not shrink going from one to three hidden layers.
  std::map<std::tuple<std::size_t, double, std::string>, std::map<std::size_t, double>> by_depth;
  for (const auto& [key, a] : groups)
    by_depth[{std::get<0>(key), std::get<2>(key), std::get<3>(key)}][std::get<1>(key)] = a.af.mean();
  for (const auto& [key, m] : by_depth) {
    if (!m.count(1) || !m.count(3)) continue;
    const bool ok = m.at(3) >= m.at(1);
    if (!ok) rep.depth_trend_flagged = true;
    os << (ok ? "depth trend ok" : "FLAG depth trend violated") << ": W=" << std::get<0>(key)
       << " alpha=" << format_double(std::get<1>(key)) << " " << std::get<2>(key)
       << " AF(depth 1)=" << fixed(100 * m.at(1)) << " AF(depth 3)=" << fixed(100 * m.at(3))
       << "\n";
  }
  rep.summary = os.str();
  rep.files.push_back({"summary.txt", rep.summary});
  rep.files.push_back({"af_vs_width.svg", render_svg(chart_af_vs_width(rows))});
  rep.files.push_back({"forgetting_vs_task.svg", render_svg(chart_forgetting_vs_task(rows))});
  rep.files.push_back({"af_vs_depth.svg", render_svg(chart_af_vs_depth(rows))});
  if (drift_text) rep.files.push_back({"drift_vs_width.svg", render_svg(chart_drift_vs_width(*drift_text))});
  return rep;
}

}  // namespace widthlab
