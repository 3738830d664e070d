#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/runner.hpp"

namespace fs = std::filesystem;
using namespace widthlab;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("widthlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

int cli(const std::string& args) {
  const std::string cmd = std::string(WIDTHLAB_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSynthetic = R"({
  "synthetic": true, "synthetic_tasks": 3, "synthetic_train": 48, "synthetic_test": 24,
  "synthetic_dim": 8, "synthetic_classes": 3,
  "widths": [16], "seeds": [0], "epochs": 2, "batch_size": 8, "lr": 0.1
})";

SweepConfig synthetic_config() { return sweep_config_from_json(kSynthetic); }

}  // namespace

TEST_CASE("config parsing and validation") {
  const SweepConfig c = synthetic_config();
  CHECK(c.synthetic);
  CHECK(c.widths == std::vector<std::size_t>{16});
  CHECK(c.lr == 0.1);
  CHECK(validate(c).empty());

  CHECK_THROWS_AS(sweep_config_from_json(R"({"widths": [16], "colour": 3})"), ConfigError);
  CHECK_THROWS_AS(sweep_config_from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(sweep_config_from_json(R"({"widths": "wide"})"), ConfigError);

  SweepConfig bad = c;
  bad.alphas = {1.5};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.widths.clear();
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.seeds = {1, 1};
  CHECK_THROWS_AS(validate(bad), ConfigError);

  SweepConfig odd = c;
  odd.widths = {24};
  CHECK(validate(odd).size() == 1);

  const SweepConfig rel = sweep_config_from_json(R"({"data_root": "mnist"})", "/base/dir");
  CHECK(rel.data_root == fs::path("/base/dir/mnist"));

  const SweepConfig back = sweep_config_from_json(sweep_config_to_json(c));
  CHECK(sweep_config_to_json(back) == sweep_config_to_json(c));
}

TEST_CASE("grid expansion and cell seeds") {
  SweepConfig c = synthetic_config();
  c.widths = {8, 16};
  c.alphas = {0.5, 1.0};
  c.seeds = {0, 1};
  const auto grid = expand_grid(c);
  REQUIRE(grid.size() == 8);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(grid[i].index == i);
  // seed varies fastest, then width, then alpha
  CHECK(grid[0].seed == 0);
  CHECK(grid[1].seed == 1);
  CHECK(grid[2].width == 16);
  CHECK(grid[4].alpha == 1.0);
  CHECK(cell_name(grid[5]) == "w8_d1_a1_sgd_s1");

  // adding cells never changes the seed of an existing cell
  SweepConfig more = c;
  more.widths = {4, 8, 16, 32};
  for (const auto& cell : grid) {
    bool found = false;
    for (const auto& other : expand_grid(more))
      if (other.width == cell.width && other.alpha == cell.alpha && other.seed == cell.seed) {
        CHECK(other.cell_seed == cell.cell_seed);
        found = true;
      }
    CHECK(found);
  }
  CHECK(cell_seed(0, 8, 1, 0.5, OptimizerKind::sgd, 0) != cell_seed(0, 8, 1, 0.5, OptimizerKind::adam, 0));
}

TEST_CASE("synthetic sweep produces a frozen CSV layout") {
  SweepConfig c = synthetic_config();
  c.workers = 1;
  const TaskData data = prepare_tasks(c);
  CHECK(data.train.size() == 3);
  const SweepResult r = run_sweep(c, data);
  REQUIRE(r.rows.size() == 1);
  const std::string csv = results_csv(r);
  CHECK(csv.rfind("width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1,f2,f3\n", 0) == 0);
  const auto parsed = parse_results_csv(csv);
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].AF == r.rows[0].AF);
  CHECK(parsed[0].curve.back() == 0.0);
  CHECK(parsed[0].JA.has_value());

  // worker count does not change the bytes
  SweepConfig wide = c;
  wide.widths = {8, 16};
  wide.seeds = {0, 1};
  wide.workers = 1;
  const std::string one = results_csv(run_sweep(wide, data));
  wide.workers = 3;
  CHECK(results_csv(run_sweep(wide, data)) == one);
}

TEST_CASE("drift fit needs two active counts") {
  std::vector<DriftRow> rows;
  DriftObservation o;
  o.active_count = 16;
  o.drift = 0.5;
  rows.push_back({0, kFitTask, o});
  CHECK_FALSE(fit_drift(rows).has_value());
  o.active_count = 64;
  o.drift = 0.25;
  rows.push_back({1, kFitTask, o});
  rows.push_back({1, kFitTask + 1, DriftObservation{64, 1.0, 0, 9.0, 9.0, 64}});
  const auto f = fit_drift(rows);
  REQUIRE(f.has_value());
  CHECK(f->beta == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(f->points == 2);
}

TEST_CASE("synthetic exact power law is echoed by the fit") {
  std::vector<DriftRow> rows;
  for (std::size_t n : {16u, 64u, 256u, 1024u}) {
    DriftObservation o;
    o.active_count = n;
    o.drift = 0.8 * std::pow(static_cast<double>(n), -0.3);
    rows.push_back({0, kFitTask, o});
  }
  const auto f = fit_drift(rows);
  REQUIRE(f.has_value());
  CHECK(f->gamma == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(f->beta == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("SVG charts") {
  const std::string csv =
      "width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1,f2\n"
      "128,1,1,sgd,0,0.7,0.2,0.9,,0.2,0\n"
      "32,1,1,sgd,0,0.6,0.3,0.9,,0.3,0\n"
      "32,1,1,sgd,1,0.6,0.25,0.9,,0.25,0\n";
  const auto rows = parse_results_csv(csv);
  const Chart c = chart_af_vs_width(rows);
  REQUIRE(c.series.size() == 1);
  REQUIRE(c.series[0].points.size() == 2);
  CHECK(c.series[0].points[0].x == 5.0);
  CHECK(c.series[0].points[1].x == 7.0);
  CHECK(c.series[0].points[0].y == doctest::Approx(0.275).epsilon(1e-15));

  const auto pts = parse_svg_points(render_svg(c));
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].second.x == c.series[0].points[0].x);
  CHECK(pts[0].second.y == c.series[0].points[0].y);
  CHECK(pts[1].second.y == 0.2);

  const auto single = parse_results_csv("width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1\n64,1,1,sgd,0,0.5,0,0.5,,0\n");
  const Report rep = build_report("width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1\n64,1,1,sgd,0,0.5,0,0.5,,0\n",
                                  std::nullopt);
  CHECK_FALSE(rep.files.empty());
  for (const auto& [name, text] : rep.files)
    if (name.ends_with(".svg")) CHECK(text.find("<svg") != std::string::npos);
  CHECK(parse_svg_points(render_svg(chart_af_vs_width(single))).size() == 1);

  CHECK_THROWS_AS(parse_results_csv("width,AF\n1,2\n"), FormatError);
  CHECK_THROWS_AS(parse_results_csv("width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1\n64,1,x,sgd,0,0.5,0,0.5,,0\n"),
                  FormatError);
}

TEST_CASE("report flags a depth trend violation") {
  const std::string csv =
      "width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1,f2\n"
      "256,1,1,sgd,0,0.7,0.3,0.9,,0.3,0\n"
      "256,3,1,sgd,0,0.7,0.2,0.9,,0.2,0\n";
  const Report rep = build_report(csv, std::nullopt);
  CHECK(rep.depth_trend_flagged);
  CHECK(rep.summary.find("FLAG depth trend violated") != std::string::npos);

  const std::string ok =
      "width,depth,alpha,optimizer,seed,AA,AF,LA,JA,f1,f2\n"
      "256,1,1,sgd,0,0.7,0.2,0.9,,0.2,0\n"
      "256,3,1,sgd,0,0.7,0.3,0.9,,0.3,0\n";
  CHECK_FALSE(build_report(ok, std::nullopt).depth_trend_flagged);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 0.0, -2.5e-17, 12345.678}) CHECK(std::stod(format_double(v)) == v);
  CHECK(format_double(1.0) == "1");
}

TEST_CASE("CLI run, rerun, report and certify") {
  const fs::path dir = scratch_dir("cli");
  spit(dir / "syn.json", kSynthetic);
  const std::string cfg = (dir / "syn.json").string();

  REQUIRE(cli("run --config " + cfg + " --out " + (dir / "a").string() + " -q") == 0);
  REQUIRE(cli("run --config " + cfg + " --out " + (dir / "b").string() + " -q --workers 2") == 0);
  const std::string a = slurp(dir / "a" / "results.csv");
  CHECK(std::count(a.begin(), a.end(), '\n') == 2);
  CHECK(a == slurp(dir / "b" / "results.csv"));
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(manifest["schema"] == kResultsSchema);

  SUBCASE("report") {
    REQUIRE(cli("report " + (dir / "a" / "results.csv").string() + " --out " + (dir / "rep").string()) == 0);
    CHECK(fs::exists(dir / "rep" / "af_vs_width.svg"));
    CHECK(fs::exists(dir / "rep" / "summary.txt"));
    const auto pts = parse_svg_points(slurp(dir / "rep" / "af_vs_width.svg"));
    const auto rows = parse_results_csv(a);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].second.y == rows[0].AF);
    spit(dir / "bad.csv", "width,depth\n1,2\n");
    CHECK(cli("report " + (dir / "bad.csv").string()) == 1);
  }
  SUBCASE("flags override the config") {
    REQUIRE(cli("run --config " + cfg + " --out " + (dir / "c").string() +
                " -q --widths 8,16 --alphas 0.5 --seed 4 --epochs 1") == 0);
    const auto rows = parse_results_csv(slurp(dir / "c" / "results.csv"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].width == 8);
    CHECK(rows[1].alpha == 0.5);
  }
  SUBCASE("drift") {
    CHECK(cli("drift --config " + cfg + " --out " + (dir / "d1").string() + " -q") == 1);
    REQUIRE(cli("drift --config " + cfg + " --out " + (dir / "d2").string() + " -q --widths 8,32") == 0);
    const auto fit = nlohmann::json::parse(slurp(dir / "d2" / "drift_fit.json"));
    CHECK(fit["points"] == 2);
    CHECK(fs::exists(dir / "d2" / "drift_curve.csv"));
  }
  SUBCASE("errors map to exit codes") {
    spit(dir / "alpha.json", R"({"synthetic": true, "alphas": [1.5]})");
    CHECK(cli("run --config " + (dir / "alpha.json").string() + " -q --out " + (dir / "x").string()) == 1);
    spit(dir / "missing.json", R"({"data_root": "/nonexistent/mnist"})");
    CHECK(cli("run --config " + (dir / "missing.json").string() + " -q --out " + (dir / "x").string()) == 2);
    CHECK(cli("run --config " + (dir / "nope.json").string()) == 2);
    CHECK(cli("run") == 1);
    CHECK(cli("frobnicate") == 1);
  }
  SUBCASE("certify") {
    spit(dir / "rec.json", R"({
      "synthetic": true, "synthetic_tasks": 3, "synthetic_train": 48, "synthetic_test": 24,
      "synthetic_dim": 8, "synthetic_classes": 3, "widths": [16], "alphas": [0.5],
      "epochs": 2, "batch_size": 8, "lr": 0.1, "save_records": true, "joint": false})");
    REQUIRE(cli("run --config " + (dir / "rec.json").string() + " -q --out " + (dir / "r").string()) == 0);
    const fs::path rec = dir / "r" / "records" / "w16_d1_a0.5_sgd_s0";
    REQUIRE(fs::exists(rec / "snapshot_1.wlsnap"));

    const auto tasks = synthetic_tasks({1, 10, 8, 3}, 1);
    write_task_idx(tasks[0], 2, 4, dir / "probe-images", dir / "probe-labels");
    const std::string probe = " --probe-images " + (dir / "probe-images").string() +
                              " --probe-labels " + (dir / "probe-labels").string();
    const std::string s1 = (rec / "snapshot_1.wlsnap").string(), s3 = (rec / "snapshot_3.wlsnap").string();

    REQUIRE(cli("certify " + s1 + " " + s1 + probe + " --gamma 0.5 --beta 0.2 --out " +
                (dir / "same.json").string()) == 0);
    const auto same = nlohmann::json::parse(slurp(dir / "same.json"));
    CHECK(same["certificate"]["holds"] == true);
    CHECK(same["measured_max_gap"] == 0.0);

    REQUIRE(cli("certify " + s1 + " " + s3 + probe + " --gamma 0.5 --beta 0.2 --out " +
                (dir / "pair.json").string()) == 0);
    const auto pair = nlohmann::json::parse(slurp(dir / "pair.json"));
    CHECK(pair["certificate"]["holds"] == true);
    CHECK(pair["measured_max_gap"].get<double>() > 0.0);

    CHECK(cli("certify " + s1 + " " + s3 + probe) == 1);

    ModelSnapshot other = init_model({8, 12, 1, 3}, 0);
    save_snapshot(dir / "other.wlsnap", other, ActiveRowMask::full(other));
    CHECK(cli("certify " + s1 + " " + (dir / "other.wlsnap").string() + probe +
              " --gamma 0.5 --beta 0.2") == 1);
    CHECK(cli("certify " + s1 + " " + (dir / "absent.wlsnap").string() + probe +
              " --gamma 0.5 --beta 0.2") == 2);
  }
  SUBCASE("datagen") {
    const auto tasks = synthetic_tasks({1, 10, 4, 2}, 3);
    // raw byte IDX corpus written by hand
    std::string img, lab;
    auto put = [](std::string& s, std::uint32_t v) {
      for (int sh = 24; sh >= 0; sh -= 8) s.push_back(static_cast<char>((v >> sh) & 0xff));
    };
    put(img, kIdxImageMagic);
    put(img, 6);
    put(img, 2);
    put(img, 2);
    for (int i = 0; i < 24; ++i) img.push_back(static_cast<char>(i * 10));
    put(lab, kIdxLabelMagic);
    put(lab, 6);
    for (int i = 0; i < 6; ++i) lab.push_back(static_cast<char>(i % 2));
    spit(dir / "img", img);
    spit(dir / "lab", lab);
    REQUIRE(cli("datagen --images " + (dir / "img").string() + " --labels " + (dir / "lab").string() +
                " --angles 0,90 --subsample 4 --out " + (dir / "gen").string()) == 0);
    const TaskDataset t2 = read_task_idx(dir / "gen" / "task2-images.idx", dir / "gen" / "task2-labels.idx", 2);
    CHECK(t2.n() == 4);
    CHECK(cli("datagen --images " + (dir / "img").string() + " --labels " + (dir / "lab").string() +
              " --subsample 7 --out " + (dir / "gen2").string()) == 1);
  }
  fs::remove_all(dir);
}
