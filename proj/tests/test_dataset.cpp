#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "widthlab/dataset.hpp"
#include "widthlab/errors.hpp"

using namespace widthlab;

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xff));
}

std::string image_stream(std::uint32_t magic, std::uint32_t n, std::uint32_t h, std::uint32_t w,
                         const std::vector<std::uint8_t>& px) {
  std::string s;
  put_u32(s, magic);
  put_u32(s, n);
  put_u32(s, h);
  put_u32(s, w);
  s.append(px.begin(), px.end());
  return s;
}

std::string label_stream(std::uint32_t magic, const std::vector<std::uint8_t>& y) {
  std::string s;
  put_u32(s, magic);
  put_u32(s, static_cast<std::uint32_t>(y.size()));
  s.append(y.begin(), y.end());
  return s;
}

RawCorpus corpus_of(std::size_t n, std::size_t h, std::size_t w) {
  RawCorpus c;
  c.count = n;
  c.height = h;
  c.width = w;
  for (std::size_t i = 0; i < n * h * w; ++i) c.pixels.push_back(static_cast<std::uint8_t>(i * 37 % 256));
  for (std::size_t i = 0; i < n; ++i) c.labels.push_back(static_cast<std::uint8_t>(i % 10));
  return c;
}

}  // namespace

TEST_CASE("parse_idx reads a hand-assembled stream") {
  std::istringstream img(image_stream(kIdxImageMagic, 1, 2, 2, {0, 128, 255, 64}));
  std::istringstream lab(label_stream(kIdxLabelMagic, {7}));
  const RawCorpus c = parse_idx(img, lab);
  CHECK(c.count == 1);
  CHECK(c.height == 2);
  CHECK(c.width == 2);
  CHECK(c.pixels == std::vector<std::uint8_t>{0, 128, 255, 64});
  CHECK(c.labels == std::vector<std::uint8_t>{7});
}

TEST_CASE("parse_idx errors") {
  SUBCASE("wrong label magic") {
    std::istringstream img(image_stream(kIdxImageMagic, 1, 2, 2, {0, 1, 2, 3}));
    std::istringstream lab(label_stream(0x00000802, {1}));
    CHECK_THROWS_AS(parse_idx(img, lab), FormatError);
  }
  SUBCASE("wrong image magic") {
    std::istringstream img(image_stream(0x00000801, 1, 2, 2, {0, 1, 2, 3}));
    std::istringstream lab(label_stream(kIdxLabelMagic, {1}));
    CHECK_THROWS_AS(parse_idx(img, lab), FormatError);
  }
  SUBCASE("truncated payload") {
    std::istringstream img(image_stream(kIdxImageMagic, 2, 2, 2, {0, 1, 2, 3, 4}));
    std::istringstream lab(label_stream(kIdxLabelMagic, {1, 2}));
    CHECK_THROWS_AS(parse_idx(img, lab), LengthError);
  }
  SUBCASE("count mismatch") {
    std::istringstream img(image_stream(kIdxImageMagic, 10, 1, 1, std::vector<std::uint8_t>(10, 3)));
    std::istringstream lab(label_stream(kIdxLabelMagic, std::vector<std::uint8_t>(9, 1)));
    CHECK_THROWS_AS(parse_idx(img, lab), ConsistencyError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx("/nonexistent/images", "/nonexistent/labels"), IoError);
  }
}

TEST_CASE("rotate_image") {
  SUBCASE("zero angle is the identity") {
    std::vector<double> img(28 * 28);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 11) / 10.0;
    CHECK(rotate_image(img, 28, 28, 0.0) == img);
  }
  SUBCASE("90 degrees moves (1,2) to (0,1)") {
    std::vector<double> img(9, 0.0);
    img[1 * 3 + 2] = 1.0;
    const auto out = rotate_image(img, 3, 3, 90.0);
    std::vector<double> want(9, 0.0);
    want[0 * 3 + 1] = 1.0;
    for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  SUBCASE("radially symmetric image is unchanged") {
    const std::size_t n = 15;
    const double c = (n - 1) / 2.0;
    std::vector<double> img(n * n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t q = 0; q < n; ++q) {
        const double d = std::hypot(r - c, q - c);
        img[r * n + q] = d <= 3.0 ? 1.0 : 0.0;
      }
    // bilinear weights reach at most sqrt(2) from the sample point
    for (double angle : {13.0, 45.0, 90.0, 180.0, 270.0, 301.7}) {
      const auto out = rotate_image(img, n, n, angle);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t q = 0; q < n; ++q) {
          const double d = std::hypot(r - c, q - c);
          if (d < 1.5 || d > 4.5) CHECK(std::abs(out[r * n + q] - img[r * n + q]) <= 1e-6);
        }
    }
  }
  SUBCASE("constant image on a centered grid rotates onto itself at right angles") {
    std::vector<double> img(16, 0.5);
    const auto out = rotate_image(img, 4, 4, 180.0);
    for (double v : out) CHECK(std::abs(v - 0.5) <= 1e-6);
  }
  CHECK_THROWS_AS(rotate_image(std::vector<double>(5), 2, 2, 0.0), ShapeError);
}

TEST_CASE("radial function of distance only is preserved under rotation") {
  const std::size_t n = 21;
  const double c = (n - 1) / 2.0;
  std::vector<double> img(n * n);
  // right angles map the pixel grid onto itself
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t q = 0; q < n; ++q) {
      const double d2 = (r - c) * (r - c) + (q - c) * (q - c);
      img[r * n + q] = std::max(0.0, 1.0 - d2 / 400.0);
    }
  for (double angle : {90.0, 180.0, 270.0}) {
    const auto out = rotate_image(img, n, n, angle);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(out[i] - img[i]) <= 1e-6);
  }
}

TEST_CASE("build_task_sequence") {
  const RawCorpus c = corpus_of(20, 4, 4);
  SUBCASE("five default angles") {
    const double angles[] = {0, 22.5, 45, 67.5, 90};
    const auto tasks = build_task_sequence(c, angles, 8, 3);
    REQUIRE(tasks.size() == 5);
    for (std::size_t t = 0; t < 5; ++t) {
      CHECK(tasks[t].task_id == t);
      CHECK(tasks[t].rotation_deg == angles[t]);
      CHECK(tasks[t].n() == 8);
      CHECK(tasks[t].labels == tasks[0].labels);
      tasks[t].validate();
    }
  }
  SUBCASE("single unrotated task equals the scaled corpus") {
    const double angles[] = {0};
    const auto tasks = build_task_sequence(c, angles, std::nullopt, 1);
    REQUIRE(tasks.size() == 1);
    REQUIRE(tasks[0].n() == 20);
    std::vector<std::uint32_t> got = tasks[0].labels, want(c.labels.begin(), c.labels.end());
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    CHECK(got == want);
    for (std::size_t i = 0; i < 20; ++i) {
      // locate the source image by label and content
      bool found = false;
      for (std::size_t j = 0; j < 20 && !found; ++j) {
        bool same = true;
        for (std::size_t p = 0; p < 16; ++p)
          same = same && tasks[0].inputs(i, p) == c.image(j)[p] / 255.0;
        found = same && tasks[0].labels[i] == c.labels[j];
      }
      CHECK(found);
    }
  }
  SUBCASE("replay is identical") {
    const double angles[] = {0, 45};
    const auto a = build_task_sequence(c, angles, 10, 9);
    const auto b = build_task_sequence(c, angles, 10, 9);
    for (std::size_t t = 0; t < 2; ++t) {
      CHECK(a[t].inputs == b[t].inputs);
      CHECK(a[t].labels == b[t].labels);
    }
  }
  SUBCASE("errors") {
    const double angles[] = {0};
    CHECK_THROWS(build_task_sequence(RawCorpus{}, angles, std::nullopt, 0));
    CHECK_THROWS(build_task_sequence(c, angles, 21, 0));
  }
}

TEST_CASE("synthetic_tasks") {
  const auto one = synthetic_tasks({1, 10, 4, 2}, 7);
  REQUIRE(one.size() == 1);
  CHECK(one[0].n() == 10);
  CHECK(std::count(one[0].labels.begin(), one[0].labels.end(), 0u) == 5);
  CHECK(std::count(one[0].labels.begin(), one[0].labels.end(), 1u) == 5);
  one[0].validate();

  const auto again = synthetic_tasks({1, 10, 4, 2}, 7);
  CHECK(again[0].inputs == one[0].inputs);
  CHECK(again[0].labels == one[0].labels);

  const auto two = synthetic_tasks({2, 10, 4, 2}, 7);
  REQUIRE(two.size() == 2);
  CHECK_FALSE(two[0].inputs == two[1].inputs);

  CHECK_THROWS(synthetic_tasks({1, 2, 4, 3}, 0));
}

TEST_CASE("concatenate stacks rows") {
  const auto tasks = synthetic_tasks({3, 6, 2, 2}, 1);
  const TaskDataset all = concatenate(tasks);
  CHECK(all.n() == 18);
  CHECK(all.inputs(6, 1) == tasks[1].inputs(0, 1));
  CHECK(all.labels[17] == tasks[2].labels[5]);
}

TEST_CASE("task IDX files round-trip") {
  const auto tasks = synthetic_tasks({1, 6, 4, 3}, 2);
  const auto dir = std::filesystem::temp_directory_path() / "widthlab_test_taskidx";
  std::filesystem::create_directories(dir);
  write_task_idx(tasks[0], 2, 2, dir / "img", dir / "lab");
  const TaskDataset back = read_task_idx(dir / "img", dir / "lab", 3);
  CHECK(back.labels == tasks[0].labels);
  for (std::size_t i = 0; i < back.inputs.size(); ++i)
    CHECK(back.inputs.data()[i] == doctest::Approx(tasks[0].inputs.data()[i]).epsilon(1e-7));
  std::filesystem::remove_all(dir);
}
