#include <doctest.h>

#include <cmath>
#include <numeric>

#include "widthlab/continual.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/optim.hpp"
#include "widthlab/rng.hpp"

using namespace widthlab;

namespace {

ModelSnapshot one_weight(double w) {
  ModelSnapshot m;
  m.layers.push_back(Matrix{{w}});
  m.specs.push_back({1, 1, Activation::identity, 1.0});
  return m;
}

// Two clusters split by the sign of x0 - x1 with a margin of 0.1.
TaskDataset separable(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  TaskDataset t;
  t.inputs = Matrix(n, 4);
  t.num_classes = 2;
  for (std::size_t i = 0; i < n;) {
    double x[4];
    for (double& v : x) v = uniform01(rng);
    const double s = x[0] - x[1];
    if (std::abs(s) < 0.1) continue;
    for (int j = 0; j < 4; ++j) t.inputs(i, j) = x[j];
    t.labels.push_back(s > 0 ? 0 : 1);
    ++i;
  }
  return t;
}

// Logistic regression by full-batch gradient descent on the same inputs.
double logistic_oracle_accuracy(const TaskDataset& t) {
  std::vector<double> w(t.d() + 1, 0.0);
  for (int it = 0; it < 3000; ++it) {
    std::vector<double> g(w.size(), 0.0);
    for (std::size_t i = 0; i < t.n(); ++i) {
      double z = w.back();
      for (std::size_t j = 0; j < t.d(); ++j) z += w[j] * t.inputs(i, j);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double e = p - (t.labels[i] == 1 ? 1.0 : 0.0);
      for (std::size_t j = 0; j < t.d(); ++j) g[j] += e * t.inputs(i, j);
      g.back() += e;
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= 1.0 * g[j] / static_cast<double>(t.n());
  }
  std::size_t ok = 0;
  for (std::size_t i = 0; i < t.n(); ++i) {
    double z = w.back();
    for (std::size_t j = 0; j < t.d(); ++j) z += w[j] * t.inputs(i, j);
    ok += (z > 0) == (t.labels[i] == 1);
  }
  return static_cast<double>(ok) / static_cast<double>(t.n());
}

}  // namespace

TEST_CASE("SGD single step") {
  ModelSnapshot m = one_weight(1.0);
  auto st = OptimizerState::make(OptimizerKind::sgd, 0.1, m);
  apply_update(st, m, {Matrix{{0.5}}}, {});
  CHECK(m.layers[0](0, 0) == 0.95);
  CHECK(st.step == 1);
}

TEST_CASE("Adam first step has magnitude lr") {
  // the step is lr |g| / (|g| + eps), so |g| >= 0.01 keeps it within 1e-6 lr
  for (double g : {0.01, 0.5, -7.0, 250.0}) {
    ModelSnapshot m = one_weight(2.0);
    auto st = OptimizerState::make(OptimizerKind::adam, 0.001, m);
    apply_update(st, m, {Matrix{{g}}}, {});
    const double step = 2.0 - m.layers[0](0, 0);
    CHECK(std::abs(std::abs(step) - 0.001) <= 1e-6 * 0.001);
    CHECK((step > 0) == (g > 0));
  }
}

TEST_CASE("zero gradient leaves the model unchanged") {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    const ModelSnapshot m0 = init_model({3, 4, 1, 2}, 1);
    ModelSnapshot m = m0;
    auto st = OptimizerState::make(kind, 0.1, m);
    std::vector<Matrix> zero{Matrix(4, 3), Matrix(2, 4)};
    for (int i = 0; i < 3; ++i) apply_update(st, m, zero, {});
    CHECK(m == m0);
  }
}

TEST_CASE("apply_update skips inactive rows and their moments") {
  const ModelSnapshot m0 = init_model({3, 4, 1, 2}, 1);
  ModelSnapshot m = m0;
  ActiveRowMask mask = ActiveRowMask::full(m);
  mask.rows[0][2] = 0;
  auto st = OptimizerState::make(OptimizerKind::adam, 0.01, m);
  std::vector<Matrix> g{Matrix(4, 3, 1.0), Matrix(2, 4, 1.0)};
  apply_update(st, m, g, mask);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(m.layers[0](2, c) == m0.layers[0](2, c));
    CHECK(st.m[0](2, c) == 0.0);
    CHECK(st.v[0](2, c) == 0.0);
    CHECK(m.layers[0](1, c) != m0.layers[0](1, c));
  }
  CHECK_THROWS_AS(apply_update(st, m, {Matrix(4, 3)}, mask), ShapeError);
}

TEST_CASE("non-finite update raises NumericError") {
  ModelSnapshot m = one_weight(1.0);
  auto st = OptimizerState::make(OptimizerKind::sgd, 1.0, m);
  CHECK_THROWS_AS(apply_update(st, m, {Matrix{{INFINITY}}}, {}), NumericError);
}

TEST_CASE("optimizer names and defaults") {
  CHECK(parse_optimizer("sgd") == OptimizerKind::sgd);
  CHECK(parse_optimizer("adam") == OptimizerKind::adam);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
  CHECK(to_string(OptimizerKind::adam) == "adam");
  CHECK(default_lr(OptimizerKind::sgd) == 0.01);
  CHECK(default_lr(OptimizerKind::adam) == 0.001);
}

TEST_CASE("train_epochs equals loss_and_grads plus apply_update, bitwise") {
  const auto tasks = synthetic_tasks({1, 70, 6, 3}, 4);
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam})
    for (std::size_t depth : {std::size_t{1}, std::size_t{2}}) {
      const ModelSnapshot m0 = init_model({6, 16, depth, 3}, 8);
      const ActiveRowMask mask = sample_mask(0.6, 16, depth, 5, 0);
      TrainConfig cfg;
      cfg.optimizer = kind;
      cfg.lr = kind == OptimizerKind::sgd ? 0.1 : 0.01;
      cfg.batch_size = 16;
      cfg.epochs = 3;
      cfg.seed = 21;

      ModelSnapshot fast = m0;
      const TrainStats stats = train_epochs(fast, mask, tasks[0], cfg);

      ModelSnapshot ref = m0;
      auto st = OptimizerState::make(kind, cfg.lr, ref);
      std::vector<double> losses;
      for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::vector<std::size_t> order(tasks[0].n());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {stream::kShuffle, e}));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
          const std::size_t len = std::min(cfg.batch_size, order.size() - s);
          Matrix x(len, 6);
          std::vector<std::uint32_t> y(len);
          for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = 0; j < 6; ++j) x(i, j) = tasks[0].inputs(order[s + i], j);
            y[i] = tasks[0].labels[order[s + i]];
          }
          const auto lg = loss_and_grads(ref, mask, x, y);
          sum += lg.loss;
          ++batches;
          apply_update(st, ref, lg.grads, mask);
        }
        losses.push_back(sum / static_cast<double>(batches));
      }
      CHECK(fast == ref);
      CHECK(stats.epoch_loss == losses);
    }
}

TEST_CASE("train_epochs preconditions and replay") {
  const auto tasks = synthetic_tasks({1, 20, 4, 2}, 1);
  ModelSnapshot m = init_model({4, 8, 1, 2}, 0);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_epochs(m, {}, tasks[0], cfg), PreconditionError);
  cfg.epochs = 2;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_epochs(m, {}, tasks[0], cfg), PreconditionError);
  cfg.batch_size = 4;
  ModelSnapshot wrong = init_model({5, 8, 1, 2}, 0);
  CHECK_THROWS_AS(train_epochs(wrong, {}, tasks[0], cfg), ShapeError);

  ModelSnapshot a = m, b = m;
  train_epochs(a, {}, tasks[0], cfg);
  train_epochs(b, {}, tasks[0], cfg);
  CHECK(a == b);
  CHECK_FALSE(a == m);
}

TEST_CASE("inactive rows never move during training") {
  const auto tasks = synthetic_tasks({1, 40, 4, 2}, 3);
  const ModelSnapshot m0 = init_model({4, 12, 2, 2}, 6);
  const ActiveRowMask mask = sample_mask(0.5, 12, 2, 9, 0);
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    ModelSnapshot m = m0;
    TrainConfig cfg;
    cfg.optimizer = kind;
    cfg.lr = 0.05;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    train_epochs(m, mask, tasks[0], cfg);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t r = 0; r < 12; ++r)
        if (!mask.rows[l][r]) CHECK(std::equal(m.layers[l].row(r).begin(), m.layers[l].row(r).end(),
                                               m0.layers[l].row(r).begin()));
  }
}

TEST_CASE("divergence reports epoch and batch") {
  const auto tasks = synthetic_tasks({1, 32, 4, 2}, 3);
  ModelSnapshot m = init_model({4, 8, 1, 2}, 0);
  TrainConfig cfg;
  cfg.lr = 1e300;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  try {
    train_epochs(m, {}, tasks[0], cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
}

TEST_CASE("a separable task is learned") {
  const TaskDataset t = separable(200, 42);
  REQUIRE(logistic_oracle_accuracy(t) >= 0.95);
  ModelSnapshot m = init_model({4, 32, 1, 2}, 1);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.batch_size = 8;
  cfg.epochs = 5;
  cfg.seed = 2;
  train_epochs(m, {}, t, cfg);
  CHECK(accuracy(m, {}, t) >= 0.95);
}
