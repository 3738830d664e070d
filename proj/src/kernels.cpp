#include "widthlab/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <vector>

#include "widthlab/errors.hpp"

namespace widthlab::kernels {
namespace {

thread_local int g_threads = 0;

int team() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

void check(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

// Rows below this size are not worth a parallel region.
constexpr std::size_t kMinParallelWork = 1 << 15;

bool go_parallel(std::size_t work) { return work >= kMinParallelWork && team() > 1; }

constexpr std::size_t kColBlock = 256;

// Reused per calling thread so hot loops do not fault in fresh pages.
std::vector<double>& scratch(int slot) {
  thread_local std::vector<double> buf[2];
  return buf[slot];
}

const double* transpose_into(const Matrix& m, std::vector<double>& buf) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (buf.size() < rows * cols) buf.resize(rows * cols);
  const double* src = m.data().data();
  double* dst = buf.data();
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile)
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  return dst;
}

}  // namespace

void set_threads(int n) { g_threads = std::max(0, n); }
int threads() { return team(); }

void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out) {
  check(x.cols() == w.cols(), "matmul_nt: inner dimensions differ");
  const std::size_t b = x.rows(), n = w.rows(), k = x.cols();
  if (out.rows() != b || out.cols() != n) out = Matrix(b, n);
  const double* wt = transpose_into(w, scratch(0));
  const double* xt = transpose_into(x, scratch(1));
  double* op = out.data().data();
  const std::size_t blocks = (n + kColBlock - 1) / kColBlock;

  // Each output element sums over p in ascending order whatever the blocking.
#pragma omp parallel for schedule(static) num_threads(team()) if (go_parallel(b * n * k))
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t lo = blk * kColBlock, len = std::min(n, lo + kColBlock) - lo;
    for (std::size_t i = 0; i < b; ++i) std::fill_n(op + i * n + lo, len, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double* wrow = wt + p * n + lo;
      const double* xcol = xt + p * b;
      for (std::size_t i = 0; i < b; ++i) {
        const double a = xcol[i];
        if (a == 0.0) continue;
        double* orow = op + i * n + lo;
        for (std::size_t j = 0; j < len; ++j) orow[j] += a * wrow[j];
      }
    }
  }
}

void matmul_nn(const Matrix& d, const Matrix& w, Matrix& out) {
  check(d.cols() == w.rows(), "matmul_nn: inner dimensions differ");
  const std::size_t b = d.rows(), n = w.rows(), k = w.cols();
  if (out.rows() != b || out.cols() != k) out = Matrix(b, k);
  const double* dt = transpose_into(d, scratch(1));
  const double* wp = w.data().data();
  double* op = out.data().data();
  const std::size_t blocks = (k + kColBlock - 1) / kColBlock;

#pragma omp parallel for schedule(static) num_threads(team()) if (go_parallel(b * n * k))
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t lo = blk * kColBlock, len = std::min(k, lo + kColBlock) - lo;
    for (std::size_t i = 0; i < b; ++i) std::fill_n(op + i * k + lo, len, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      const double* wrow = wp + p * k + lo;
      const double* dcol = dt + p * b;
      for (std::size_t i = 0; i < b; ++i) {
        const double a = dcol[i];
        if (a == 0.0) continue;
        double* orow = op + i * k + lo;
        for (std::size_t j = 0; j < len; ++j) orow[j] += a * wrow[j];
      }
    }
  }
}

void matmul_tn(const Matrix& d, const Matrix& x, Matrix& out) {
  check(d.rows() == x.rows(), "matmul_tn: batch dimensions differ");
  const std::size_t b = d.rows(), n = d.cols(), k = x.cols();
  if (out.rows() != n || out.cols() != k) out = Matrix(n, k);
  const double* dt = transpose_into(d, scratch(0));
  const double* xp = x.data().data();
  double* op = out.data().data();

  // Row r of the result is sum_i d[i][r] x_i; rows are independent.
#pragma omp parallel for schedule(static) num_threads(team()) if (go_parallel(b * n * k))
  for (std::size_t r = 0; r < n; ++r) {
    double* orow = op + r * k;
    std::fill_n(orow, k, 0.0);
    const double* dcol = dt + r * b;
    for (std::size_t i = 0; i < b; ++i) {
      const double a = dcol[i];
      if (a == 0.0) continue;
      const double* xrow = xp + i * k;
      for (std::size_t j = 0; j < k; ++j) orow[j] += a * xrow[j];
    }
  }
}

void matvec(const Matrix& m, std::span<const double> v, std::span<double> y) {
  check(v.size() == m.cols() && y.size() == m.rows(), "matvec: shape mismatch");
  const std::size_t rows = m.rows(), cols = m.cols();
  const double* mp = m.data().data();

#pragma omp parallel for schedule(static) num_threads(team()) if (go_parallel(rows * cols))
  for (std::size_t r = 0; r < rows; ++r) {
    const double* mrow = mp + r * cols;
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += mrow[j] * v[j];
    y[r] = s;
  }
}

void matvec_t(const Matrix& m, std::span<const double> v, std::span<double> y) {
  check(v.size() == m.rows() && y.size() == m.cols(), "matvec_t: shape mismatch");
  const std::size_t rows = m.rows(), cols = m.cols();
  const double* mp = m.data().data();
  std::fill(y.begin(), y.end(), 0.0);

  // Column blocks are independent; within a block rows are summed in order.
  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (cols + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static) num_threads(team()) if (go_parallel(rows * cols))
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t lo = blk * kBlock, hi = std::min(cols, lo + kBlock);
    for (std::size_t r = 0; r < rows; ++r) {
      const double a = v[r];
      const double* mrow = mp + r * cols;
      for (std::size_t j = lo; j < hi; ++j) y[j] += a * mrow[j];
    }
  }
}

namespace serial {

void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out) {
  check(x.cols() == w.cols(), "matmul_nt: inner dimensions differ");
  out = Matrix(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < x.cols(); ++p) s += x(i, p) * w(j, p);
      out(i, j) = s;
    }
}

void matmul_nn(const Matrix& d, const Matrix& w, Matrix& out) {
  check(d.cols() == w.rows(), "matmul_nn: inner dimensions differ");
  out = Matrix(d.rows(), w.cols());
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.cols(); ++p) s += d(i, p) * w(p, j);
      out(i, j) = s;
    }
}

void matmul_tn(const Matrix& d, const Matrix& x, Matrix& out) {
  check(d.rows() == x.rows(), "matmul_tn: batch dimensions differ");
  out = Matrix(d.cols(), x.cols());
  for (std::size_t r = 0; r < d.cols(); ++r)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < d.rows(); ++i) s += d(i, r) * x(i, j);
      out(r, j) = s;
    }
}

void matvec(const Matrix& m, std::span<const double> v, std::span<double> y) {
  check(v.size() == m.cols() && y.size() == m.rows(), "matvec: shape mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += m(r, j) * v[j];
    y[r] = s;
  }
}

void matvec_t(const Matrix& m, std::span<const double> v, std::span<double> y) {
  check(v.size() == m.rows() && y.size() == m.cols(), "matvec_t: shape mismatch");
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) s += m(r, j) * v[r];
    y[j] = s;
  }
}

}  // namespace serial
}  // namespace widthlab::kernels
