#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace widthlab {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Sorted, duplicate-free set of row indices.
class RowIndexSet {
 public:
  RowIndexSet() = default;
  /// Sorts and deduplicates.
  explicit RowIndexSet(std::vector<std::size_t> indices);
  static RowIndexSet all(std::size_t n);
  /// Indices i with flags[i] != 0.
  static RowIndexSet from_flags(std::span<const std::uint8_t> flags);

  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  std::span<const std::size_t> indices() const { return indices_; }
  auto begin() const { return indices_.begin(); }
  auto end() const { return indices_.end(); }

 private:
  std::vector<std::size_t> indices_;
};

struct SpectralNormOptions {
  double rel_tol = 1e-12;  // Ritz residual relative to the eigenvalue of m^T m
  int max_iter = 500;      // Lanczos steps, capped by the smaller dimension
  std::uint64_t seed = 0x5eed;
};

/// Largest singular value via Lanczos on the smaller Gram matrix. Zero
/// matrix gives 0.
/// Throws InvalidInput on non-finite entries.
double spectral_norm(const Matrix& m, const SpectralNormOptions& opts = {});

double frobenius_norm(const Matrix& m);

/// |s| x cols matrix of the selected rows. Throws IndexError when an index
/// is out of range.
Matrix row_submatrix(const Matrix& m, const RowIndexSet& s);

Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);

double l2_norm(std::span<const double> v);
bool all_finite(std::span<const double> v);

}  // namespace widthlab
