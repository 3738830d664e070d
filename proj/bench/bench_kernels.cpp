#include <benchmark/benchmark.h>

#include "widthlab/kernels.hpp"
#include "widthlab/linalg.hpp"
#include "widthlab/rng.hpp"

using namespace widthlab;

namespace {

// Inputs look like digit batches: mostly zeros, the rest in (0,1].
Matrix sparse_batch(std::size_t rows, std::size_t cols, double density, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = uniform01(rng) < density ? uniform01(rng) : 0.0;
  return m;
}

Matrix dense(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = uniform(rng, -0.05, 0.05);
  return m;
}

constexpr std::size_t kBatch = 64, kInput = 784;

template <auto Fn>
void nt(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const Matrix x = sparse_batch(kBatch, kInput, 0.2, 1), w = dense(width, kInput, 2);
  Matrix out;
  for (auto _ : state) {
    Fn(x, w, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(kBatch * width * kInput));
}

template <auto Fn>
void tn(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const Matrix d = dense(kBatch, width, 3), x = sparse_batch(kBatch, kInput, 0.2, 1);
  Matrix out;
  for (auto _ : state) {
    Fn(d, x, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(kBatch * width * kInput));
}

template <auto Fn>
void nn(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const Matrix d = dense(kBatch, 10, 3), w = dense(10, width, 4);
  Matrix out;
  for (auto _ : state) {
    Fn(d, w, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(kBatch * width * 10));
}

template <auto Fn>
void mv(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix m = dense(n, n, 5);
  std::vector<double> v(n, 1.0), y(n);
  for (auto _ : state) {
    Fn(m, v, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(nt<kernels::matmul_nt>)->Name("matmul_nt/parallel")->Arg(128)->Arg(512)->Arg(2048);
BENCHMARK(nt<kernels::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(128)->Arg(512)->Arg(2048);
BENCHMARK(tn<kernels::matmul_tn>)->Name("matmul_tn/parallel")->Arg(128)->Arg(512)->Arg(2048);
BENCHMARK(tn<kernels::serial::matmul_tn>)->Name("matmul_tn/serial")->Arg(128)->Arg(512)->Arg(2048);
BENCHMARK(nn<kernels::matmul_nn>)->Name("matmul_nn/parallel")->Arg(512)->Arg(2048);
BENCHMARK(nn<kernels::serial::matmul_nn>)->Name("matmul_nn/serial")->Arg(512)->Arg(2048);
BENCHMARK(mv<kernels::matvec>)->Name("matvec/parallel")->Arg(256)->Arg(1024);
BENCHMARK(mv<kernels::serial::matvec>)->Name("matvec/serial")->Arg(256)->Arg(1024);
BENCHMARK(mv<kernels::matvec_t>)->Name("matvec_t/parallel")->Arg(256)->Arg(1024);
BENCHMARK(mv<kernels::serial::matvec_t>)->Name("matvec_t/serial")->Arg(256)->Arg(1024);

BENCHMARK_MAIN();
