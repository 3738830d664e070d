#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "widthlab/continual.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/network.hpp"
#include "widthlab/runner.hpp"
#include "widthlab/theory.hpp"

namespace fs = std::filesystem;
using namespace widthlab;

namespace {

struct GridFlags {
  std::string config;
  std::string out;
  std::size_t workers = 0;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> widths, depths;
  std::vector<double> alphas;
  std::string optimizer;
  std::optional<std::size_t> epochs;
  bool swap_heads = false;
  bool quiet = false;
};

void add_grid_flags(CLI::App* app, GridFlags& f) {
  app->add_option("--config", f.config, "JSON sweep config")->required();
  app->add_option("--out", f.out, "Output directory (overrides config)");
  app->add_option("--workers", f.workers, "Parallel sweep cells (0 = core count)");
  app->add_option("--seed", f.seed, "Master seed");
  app->add_option("--widths", f.widths, "Comma-separated widths")->delimiter(',');
  app->add_option("--alphas", f.alphas, "Comma-separated active-row probabilities")->delimiter(',');
  app->add_option("--depths", f.depths, "Comma-separated hidden-layer counts")->delimiter(',');
  app->add_option("--optimizer", f.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
  app->add_option("--epochs", f.epochs, "Epochs per task");
  app->add_flag("--swap-heads", f.swap_heads, "Fresh input and output layers per task");
  app->add_flag("-q,--quiet", f.quiet, "No progress output");
}

SweepConfig resolve_config(const GridFlags& f) {
  SweepConfig cfg = load_sweep_config(f.config);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.workers) cfg.workers = f.workers;
  if (f.seed) cfg.master_seed = *f.seed;
  if (!f.widths.empty()) cfg.widths = f.widths;
  if (!f.alphas.empty()) cfg.alphas = f.alphas;
  if (!f.depths.empty()) cfg.depths = f.depths;
  if (!f.optimizer.empty()) cfg.optimizers = {parse_optimizer(f.optimizer)};
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.swap_heads) cfg.swap_heads = true;
  for (const auto& w : validate(cfg)) std::cerr << "warning: " << w << "\n";
  return cfg;
}

SweepResult sweep(const SweepConfig& cfg, bool quiet) {
  const TaskData data = prepare_tasks(cfg);
  ProgressFn progress;
  if (!quiet)
    progress = [](const ResultRow& r, std::size_t done, std::size_t total) {
      std::cerr << "[" << done << "/" << total << "] " << cell_name(r.cell)
                << " AA=" << r.AA << " AF=" << r.AF << " (" << r.seconds << " s)\n";
    };
  return run_sweep(cfg, data, progress);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path data_default(const std::string& name) {
  if (const char* env = std::getenv("WIDTHLAB_DATA")) return fs::path(env) / name;
  return {};
}

int cmd_run(const GridFlags& f) {
  const SweepConfig cfg = resolve_config(f);
  const SweepResult r = sweep(cfg, f.quiet);
  write_sweep_outputs(cfg, r, cfg.out_dir);
  std::cout << "wrote " << r.rows.size() << " rows to " << (cfg.out_dir / "results.csv").string()
            << "\n";
  return 0;
}

int cmd_drift(const GridFlags& f) {
  const SweepConfig cfg = resolve_config(f);
  const SweepResult r = sweep(cfg, f.quiet);
  if (!r.fit) throw ConfigError("drift fit needs at least two distinct active-row counts");
  write_sweep_outputs(cfg, r, cfg.out_dir);
  std::cout << drift_fit_json(*r.fit);
  return 0;
}

struct CertifyFlags {
  std::string a, b, images, labels, fit, out;
  std::optional<double> gamma, beta;
  std::size_t probe_limit = 1000;
};

int cmd_certify(const CertifyFlags& f) {
  ModelSnapshot ma, mb;
  ActiveRowMask ka, kb;
  load_snapshot(f.a, ma, ka);
  load_snapshot(f.b, mb, kb);
  if (!ma.same_architecture(mb)) throw ShapeError("snapshots have different architectures");

  double gamma = 0.0, beta = 0.0;
  if (!f.fit.empty()) {
    try {
      const auto j = nlohmann::json::parse(read_text(f.fit));
      gamma = j.at("gamma").get<double>();
      beta = j.at("beta").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad fit file: ") + e.what());
    }
  }
  if (f.gamma) gamma = *f.gamma;
  if (f.beta) beta = *f.beta;
  if (f.fit.empty() && !(f.gamma && f.beta))
    throw ConfigError("certify needs --fit or both --gamma and --beta");

  const fs::path images = f.images.empty() ? data_default("t10k-images-idx3-ubyte") : fs::path(f.images);
  const fs::path labels = f.labels.empty() ? data_default("t10k-labels-idx1-ubyte") : fs::path(f.labels);
  if (images.empty() || labels.empty())
    throw ConfigError("certify needs --probe-images/--probe-labels or WIDTHLAB_DATA");
  const TaskDataset probe = read_task_idx(images, labels, ma.num_classes());
  if (probe.d() != ma.input_dim()) throw ShapeError("probe dimension does not match the snapshots");

  const BoundReport rep = bound_report(ma, ka, mb, kb, probe, gamma, beta, f.probe_limit);
  const std::string text = bound_report_json(rep) + "\n";
  if (f.out.empty())
    std::cout << text;
  else
    write_text(f.out, text);
  std::cerr << "certificate " << (rep.certificate.holds ? "holds" : "FAILS")
            << "; bound (theorem) " << (rep.theorem1_holds ? "holds" : "fails")
            << "; bound (noise stability) " << (rep.noise_stability_holds ? "holds" : "fails")
            << "\n";
  return rep.certificate.holds ? 0 : 3;
}

struct ReportFlags {
  std::string csv, drift, out;
};

int cmd_report(const ReportFlags& f) {
  const fs::path csv = f.csv;
  std::optional<std::string> drift;
  const fs::path drift_path = f.drift.empty() ? csv.parent_path() / "drift.csv" : fs::path(f.drift);
  if (!f.drift.empty() || fs::exists(drift_path)) drift = read_text(drift_path);
  const Report rep = build_report(read_text(csv), drift);
  const fs::path out = f.out.empty() ? csv.parent_path() : fs::path(f.out);
  if (!out.empty()) fs::create_directories(out);
  for (const auto& [name, text] : rep.files) write_text(out / name, text);
  std::cout << rep.summary;
  return 0;
}

struct DatagenFlags {
  std::string images, labels, out = "tasks";
  std::vector<double> angles{0.0, 22.5, 45.0, 67.5, 90.0};
  std::optional<std::size_t> subsample;
  std::uint64_t seed = 0;
};

int cmd_datagen(const DatagenFlags& f) {
  const fs::path images = f.images.empty() ? data_default("train-images-idx3-ubyte") : fs::path(f.images);
  const fs::path labels = f.labels.empty() ? data_default("train-labels-idx1-ubyte") : fs::path(f.labels);
  if (images.empty() || labels.empty())
    throw ConfigError("datagen needs --images/--labels or WIDTHLAB_DATA");
  const RawCorpus corpus = load_idx(images, labels);
  if (f.subsample && *f.subsample > corpus.count)
    throw ConfigError("subsample exceeds corpus size");
  const auto tasks = build_task_sequence(corpus, f.angles, f.subsample, f.seed);
  fs::create_directories(f.out);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::string stem = "task" + std::to_string(t + 1);
    write_task_idx(tasks[t], corpus.height, corpus.width, fs::path(f.out) / (stem + "-images.idx"),
                   fs::path(f.out) / (stem + "-labels.idx"));
  }
  std::cout << "wrote " << tasks.size() << " tasks of " << tasks.front().n() << " images to "
            << f.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Width and forgetting experiments on rotated-digit task sequences"};
  app.require_subcommand(1);

  GridFlags run_flags, drift_flags;
  auto* run = app.add_subcommand("run", "Run a sweep and write results.csv and manifest.json");
  add_grid_flags(run, run_flags);
  auto* drift = app.add_subcommand("drift", "Run a sweep and fit drift against active width");
  add_grid_flags(drift, drift_flags);

  CertifyFlags cf;
  auto* certify = app.add_subcommand("certify", "Evaluate bounds between two snapshots");
  certify->add_option("snapshot_a", cf.a, "Earlier snapshot")->required();
  certify->add_option("snapshot_b", cf.b, "Later snapshot")->required();
  certify->add_option("--probe-images", cf.images, "Probe images (IDX)");
  certify->add_option("--probe-labels", cf.labels, "Probe labels (IDX)");
  certify->add_option("--probe-limit", cf.probe_limit, "Probe rows used (0 = all)");
  certify->add_option("--fit", cf.fit, "drift_fit.json with gamma and beta");
  certify->add_option("--gamma", cf.gamma, "Drift scale");
  certify->add_option("--beta", cf.beta, "Drift exponent");
  certify->add_option("--out", cf.out, "Write the JSON report here instead of stdout");

  ReportFlags rf;
  auto* report = app.add_subcommand("report", "Summary table and SVG charts from results.csv");
  report->add_option("results", rf.csv, "results.csv")->required();
  report->add_option("--drift", rf.drift, "drift.csv (default: next to results.csv)");
  report->add_option("--out", rf.out, "Output directory (default: next to results.csv)");

  DatagenFlags df;
  auto* datagen = app.add_subcommand("datagen", "Write rotated task files from IDX images");
  datagen->add_option("--images", df.images, "IDX images");
  datagen->add_option("--labels", df.labels, "IDX labels");
  datagen->add_option("--angles", df.angles, "Comma-separated degrees")->delimiter(',');
  datagen->add_option("--subsample", df.subsample, "Images per task");
  datagen->add_option("--seed", df.seed, "Subsample seed");
  datagen->add_option("--out", df.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*drift) return cmd_drift(drift_flags);
    if (*certify) return cmd_certify(cf);
    if (*report) return cmd_report(rf);
    if (*datagen) return cmd_datagen(df);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DegenerateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
