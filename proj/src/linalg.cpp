#include "widthlab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>

#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/rng.hpp"

namespace widthlab {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_)
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows_; r0 += kTile)
    for (std::size_t c0 = 0; c0 < cols_; c0 += kTile) {
      const std::size_t r1 = std::min(rows_, r0 + kTile), c1 = std::min(cols_, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) t.data_[c * rows_ + r] = data_[r * cols_ + c];
    }
  return t;
}

RowIndexSet::RowIndexSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
  std::sort(indices_.begin(), indices_.end());
  indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
}

RowIndexSet RowIndexSet::all(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RowIndexSet s;
  s.indices_ = std::move(idx);
  return s;
}

RowIndexSet RowIndexSet::from_flags(std::span<const std::uint8_t> flags) {
  RowIndexSet s;
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) s.indices_.push_back(i);
  return s;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal a and
// off-diagonal b, by bisection on Sturm counts.
double top_eigenvalue(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double lo = a[0], hi = a[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (i > 0 ? std::abs(b[i - 1]) : 0.0) + (i + 1 < n ? std::abs(b[i]) : 0.0);
    lo = std::min(lo, a[i] - r);
    hi = std::max(hi, a[i] + r);
  }
  const double tiny = std::numeric_limits<double>::min();
  auto below = [&](double x) {
    std::size_t count = 0;
    double d = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      d = a[i] - x - (i > 0 ? b[i - 1] * b[i - 1] / d : 0.0);
      if (d == 0.0) d = -tiny;
      count += d < 0.0;
    }
    return count;
  };
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (below(mid) == n) hi = mid;
    else lo = mid;
  }
  return hi;
}

// |last component| of the unit eigenvector for theta, by two rounds of
// inverse iteration with a row-pivoted tridiagonal solve.
double last_component(const std::vector<double>& a, const std::vector<double>& b, double theta) {
  const std::size_t n = a.size();
  if (n == 1) return 1.0;
  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::abs(v));
  for (double v : b) scale = std::max(scale, std::abs(v));
  const double floor = std::max(scale, 1e-300) * std::numeric_limits<double>::epsilon();

  std::vector<double> y(n, 1.0 / std::sqrt(static_cast<double>(n)));
  for (int round = 0; round < 2; ++round) {
    std::vector<double> d(n), dl(b), du(b), du2(n, 0.0), r = y;
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - theta;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (std::abs(d[i]) >= std::abs(dl[i])) {
        if (d[i] == 0.0) d[i] = floor;
        const double f = dl[i] / d[i];
        d[i + 1] -= f * du[i];
        r[i + 1] -= f * r[i];
      } else {
        const double f = d[i] / dl[i];
        d[i] = dl[i];
        const double t = d[i + 1];
        d[i + 1] = du[i] - f * t;
        if (i + 2 < n) {
          du2[i] = du[i + 1];
          du[i + 1] = -f * du2[i];
        }
        du[i] = t;
        std::swap(r[i], r[i + 1]);
        r[i + 1] -= f * r[i];
      }
    }
    if (d[n - 1] == 0.0) d[n - 1] = floor;
    r[n - 1] /= d[n - 1];
    r[n - 2] = (r[n - 2] - du[n - 2] * r[n - 1]) / d[n - 2];
    for (std::size_t i = n - 2; i-- > 0;) r[i] = (r[i] - du[i] * r[i + 1] - du2[i] * r[i + 2]) / d[i];
    const double norm = l2_norm(r);
    for (std::size_t i = 0; i < n; ++i) y[i] = r[i] / norm;
  }
  return std::abs(y[n - 1]);
}

}  // namespace

double spectral_norm(const Matrix& m, const SpectralNormOptions& opts) {
  if (!all_finite(m.data())) throw InvalidInput("spectral_norm: non-finite entry");
  if (m.empty()) return 0.0;
  if (std::all_of(m.data().begin(), m.data().end(), [](double x) { return x == 0.0; }))
    return 0.0;

  // Lanczos on the Gram operator of the smaller side, fully reorthogonalized.
  const bool gram_cols = m.cols() <= m.rows();
  const std::size_t n = gram_cols ? m.cols() : m.rows();
  std::vector<double> tmp(gram_cols ? m.rows() : m.cols()), w(n);
  auto apply = [&](const std::vector<double>& v) {
    if (gram_cols) {
      kernels::matvec(m, v, tmp);
      kernels::matvec_t(m, tmp, w);
    } else {
      kernels::matvec_t(m, v, tmp);
      kernels::matvec(m, tmp, w);
    }
  };

  Rng rng(opts.seed);
  std::vector<double> q(n);
  for (double& x : q) x = standard_normal(rng);
  const double qn = l2_norm(q);
  for (double& x : q) x /= qn;

  const std::size_t steps = std::min<std::size_t>(n, std::max(opts.max_iter, 1));
  std::vector<std::vector<double>> basis;
  std::vector<double> alpha, beta;
  double theta = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    basis.push_back(q);
    apply(q);
    alpha.push_back(dot(w, q));
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& v : basis) {
        const double c = dot(w, v);
        for (std::size_t i = 0; i < n; ++i) w[i] -= c * v[i];
      }
    const double b = l2_norm(w);
    theta = top_eigenvalue(alpha, beta);
    // The Ritz residual b |y_k| bounds the distance to an eigenvalue.
    if (b * last_component(alpha, beta, theta) <= opts.rel_tol * theta || b == 0.0) break;
    beta.push_back(b);
    for (std::size_t i = 0; i < n; ++i) q[i] = w[i] / b;
  }
  return std::sqrt(std::max(theta, 0.0));
}

double frobenius_norm(const Matrix& m) {
  if (!all_finite(m.data())) throw InvalidInput("frobenius_norm: non-finite entry");
  return l2_norm(m.data());
}

Matrix row_submatrix(const Matrix& m, const RowIndexSet& s) {
  Matrix out(s.size(), m.cols());
  std::size_t r = 0;
  for (std::size_t i : s) {
    if (i >= m.rows())
      throw IndexError("row_submatrix: index " + std::to_string(i) + " >= rows " +
                       std::to_string(m.rows()));
    std::copy(m.row(i).begin(), m.row(i).end(), out.row(r++).begin());
  }
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("matrix difference: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

Matrix operator*(double s, const Matrix& m) {
  Matrix out = m;
  for (double& x : out.data()) x *= s;
  return out;
}

double standard_normal(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace widthlab
