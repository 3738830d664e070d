#include "widthlab/continual.hpp"

#include <chrono>
#include <fstream>
#include <string>

#include "record_json.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {

using nlohmann::json;

ActiveRowMask sample_mask(double alpha, std::size_t width, std::size_t hidden_layers,
                          std::uint64_t seed, std::size_t task_id) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  ActiveRowMask mask;
  mask.alpha = alpha;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    std::vector<std::uint8_t> flags(width, 1);
    if (alpha < 1.0) {
      Rng rng(derive_seed(seed, {stream::kMask, task_id, l}));
      for (auto& f : flags) f = uniform01(rng) < alpha ? 1 : 0;
    }
    mask.rows.push_back(std::move(flags));
  }
  return mask;
}

// ---- ExperimentRecord ----

namespace {
std::size_t snapshot_bytes(const ModelSnapshot& s) {
  std::size_t n = 0;
  for (const auto& a : s.layers) n += a.size() * sizeof(double);
  return n;
}
}  // namespace

void ExperimentRecord::add_snapshot(ModelSnapshot s) {
  Entry e;
  const std::size_t bytes = snapshot_bytes(s);
  const bool spill = config.snapshot_budget_bytes > 0 && !config.spill_dir.empty() &&
                     resident_bytes_ + bytes > config.snapshot_budget_bytes;
  if (spill) {
    std::filesystem::create_directories(config.spill_dir);
    e.file = config.spill_dir / ("spill_" + std::to_string(entries_.size() + 1) + ".wlsnap");
    save_snapshot(e.file, s, masks.at(entries_.size()));
  } else {
    resident_bytes_ += bytes;
    e.memory = std::move(s);
  }
  entries_.push_back(std::move(e));
}

std::size_t ExperimentRecord::resident_bytes() const { return resident_bytes_; }

ModelSnapshot ExperimentRecord::snapshot(std::size_t i) const {
  const Entry& e = entries_.at(i);
  if (e.memory) return *e.memory;
  ModelSnapshot s;
  ActiveRowMask ignored;
  load_snapshot(e.file, s, ignored);
  return s;
}

ModelSnapshot ExperimentRecord::model_for_task(std::size_t i, std::size_t j) const {
  ModelSnapshot s = snapshot(i);
  if (config.swap_heads) {
    if (j > i) throw PreconditionError("model_for_task: heads for task not trained yet");
    s.layers.front() = heads.at(j).input;
    s.layers.back() = heads.at(j).output;
    s.specs.front().in_dim = s.layers.front().cols();
    s.specs.back().out_dim = s.layers.back().rows();
  }
  return s;
}

// ---- protocol ----

GapStats output_gap(const ModelSnapshot& a, const ModelSnapshot& b, const TaskDataset& probe,
                    const ActiveRowMask& mask, std::size_t probe_limit) {
  if (a.input_dim() != b.input_dim() || a.num_classes() != b.num_classes())
    throw ShapeError("output_gap: incompatible models");
  if (probe.d() != a.input_dim()) throw ShapeError("output_gap: probe dim != model input dim");
  const std::size_t n = probe_limit ? std::min(probe_limit, probe.n()) : probe.n();
  GapStats g;
  if (n == 0) return g;
  Matrix x(n, probe.d());
  std::copy_n(probe.inputs.data().begin(), n * probe.d(), x.data().begin());
  const Matrix ya = forward_batch(a, mask, x);
  const Matrix yb = forward_batch(b, mask, x);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < ya.cols(); ++c) {
      const double d = ya(i, c) - yb(i, c);
      s += d * d;
    }
    const double gap = std::sqrt(s);
    g.max_gap = std::max(g.max_gap, gap);
    sum += gap;
  }
  g.mean_gap = sum / static_cast<double>(n);
  return g;
}

ExperimentRecord run_sequence(std::span<const TaskDataset> tasks, const ProtocolConfig& cfg) {
  if (tasks.empty()) throw PreconditionError("run_sequence: no tasks");
  if (!cfg.swap_heads)
    for (const auto& t : tasks)
      if (t.d() != tasks.front().d() || t.num_classes != tasks.front().num_classes)
        throw ConfigError("run_sequence: tasks differ in input or class dimension; "
                          "enable swap_heads to train them in sequence");
  if (cfg.swap_heads && cfg.hidden_layers == 0)
    throw ConfigError("run_sequence: swap_heads needs at least one hidden layer");

  ExperimentRecord rec;
  rec.config = cfg;
  ArchSpec arch{tasks.front().d(), cfg.width, cfg.hidden_layers, tasks.front().num_classes};
  ModelSnapshot model = init_model(arch, cfg.seed);

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto started = std::chrono::steady_clock::now();
    if (cfg.swap_heads && t > 0) {
      ArchSpec task_arch{tasks[t].d(), cfg.width, cfg.hidden_layers, tasks[t].num_classes};
      ModelSnapshot fresh = init_model(task_arch, derive_seed(cfg.seed, {stream::kHeads, t}));
      model.layers.front() = std::move(fresh.layers.front());
      model.layers.back() = std::move(fresh.layers.back());
      model.specs.front() = fresh.specs.front();
      model.specs.back() = fresh.specs.back();
    }
    rec.masks.push_back(sample_mask(cfg.alpha, cfg.width, cfg.hidden_layers, cfg.seed, t));

    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, {stream::kShuffle, t});
    const TrainStats stats = train_epochs(model, rec.masks.back(), tasks[t], tc);
    model.task_id = t + 1;
    rec.train_loss.push_back(stats.final_loss());
    if (cfg.swap_heads) rec.heads.push_back({model.layers.front(), model.layers.back()});
    rec.add_snapshot(model);
    rec.stage_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
  }

  // Continual-learning error table on D_t, every model under the task-t mask.
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const ModelSnapshot base = rec.model_for_task(t, t);
    for (std::size_t tp = t; tp < tasks.size(); ++tp) {
      GapStats g;
      if (tp != t)
        g = output_gap(base, rec.model_for_task(tp, t), tasks[t], rec.masks[t],
                       cfg.gap_probe_limit);
      rec.gaps.push_back({t + 1, tp + 1, g});
    }
  }
  return rec;
}

// ---- serialization ----

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& flags) {
  std::vector<std::uint8_t> bits((flags.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return bits;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int q[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=') {
        q[k] = 0;
        ++pad;
      } else if ((q[k] = val(c)) < 0) {
        throw FormatError("base64: invalid character");
      }
    }
    const std::uint32_t v = (q[0] << 18) | (q[1] << 12) | (q[2] << 6) | q[3];
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

json protocol_to_json(const ProtocolConfig& c) {
  return json{{"width", c.width},
              {"hidden_layers", c.hidden_layers},
              {"alpha", c.alpha},
              {"optimizer", to_string(c.train.optimizer)},
              {"lr", c.train.lr},
              {"batch_size", c.train.batch_size},
              {"epochs", c.train.epochs},
              {"seed", c.seed},
              {"swap_heads", c.swap_heads},
              {"gap_probe_limit", c.gap_probe_limit}};
}

ProtocolConfig protocol_from_json(const json& j) {
  ProtocolConfig c;
  c.width = j.at("width").get<std::size_t>();
  c.hidden_layers = j.at("hidden_layers").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  c.train.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  c.train.lr = j.at("lr").get<double>();
  c.train.batch_size = j.at("batch_size").get<std::size_t>();
  c.train.epochs = j.at("epochs").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.swap_heads = j.at("swap_heads").get<bool>();
  c.gap_probe_limit = j.at("gap_probe_limit").get<std::size_t>();
  return c;
}

void write_record(const ExperimentRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["schema"] = "widthlab.record/1";
  manifest["config"] = protocol_to_json(rec.config);
  manifest["tasks"] = rec.num_tasks();
  json masks = json::array();
  for (const auto& m : rec.masks) {
    json layers = json::array();
    for (const auto& flags : m.rows) layers.push_back(base64_encode(pack_bits(flags)));
    masks.push_back(layers);
  }
  manifest["masks"] = masks;
  json gaps = json::array();
  for (const auto& g : rec.gaps)
    gaps.push_back({{"t", g.t}, {"t_prime", g.t_prime}, {"max_gap", g.gap.max_gap},
                    {"mean_gap", g.gap.mean_gap}});
  manifest["gaps"] = gaps;
  manifest["train_loss"] = rec.train_loss;
  json snaps = json::array();
  for (std::size_t i = 0; i < rec.num_tasks(); ++i) {
    const std::string name = "snapshot_" + std::to_string(i + 1) + ".wlsnap";
    save_snapshot(dir / name, rec.snapshot(i), rec.masks.at(i));
    snaps.push_back(name);
  }
  manifest["snapshots"] = snaps;
  if (rec.config.swap_heads) {
    json heads = json::array();
    for (std::size_t i = 0; i < rec.heads.size(); ++i) {
      // Heads live inside snapshot i already; only the file reference is needed.
      heads.push_back(snaps[i]);
    }
    manifest["heads"] = heads;
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

ExperimentRecord read_record(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(std::string("record manifest: ") + e.what());
  }
  ExperimentRecord rec;
  rec.config = protocol_from_json(manifest.at("config"));
  for (const auto& name : manifest.at("snapshots")) {
    ModelSnapshot s;
    ActiveRowMask m;
    load_snapshot(dir / name.get<std::string>(), s, m);
    rec.masks.push_back(m);
    if (rec.config.swap_heads) rec.heads.push_back({s.layers.front(), s.layers.back()});
    rec.config.snapshot_budget_bytes = 0;
    rec.add_snapshot(std::move(s));
  }
  for (const auto& g : manifest.at("gaps"))
    rec.gaps.push_back({g.at("t").get<std::size_t>(), g.at("t_prime").get<std::size_t>(),
                        {g.at("max_gap").get<double>(), g.at("mean_gap").get<double>()}});
  rec.train_loss = manifest.at("train_loss").get<std::vector<double>>();
  return rec;
}

}  // namespace widthlab
