#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "widthlab/errors.hpp"
#include "widthlab/kernels.hpp"
#include "widthlab/linalg.hpp"

using namespace widthlab;

TEST_CASE("spectral_norm small cases") {
  CHECK(spectral_norm(Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(spectral_norm(Matrix{{3, 0}, {0, 1}}) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(spectral_norm(Matrix(4, 3)) == 0.0);
  CHECK(spectral_norm(Matrix{}) == 0.0);
}

TEST_CASE("spectral_norm matches SVD on a seeded 5x4 matrix") {
  Rng rng(11);
  const Matrix m = oracle::random_matrix(5, 4, rng);
  CHECK(std::abs(spectral_norm(m) - oracle::svd_norm(m)) <= 1e-8);
}

TEST_CASE("spectral_norm with nearly tied singular values") {
  const Matrix d{{1.0, 0, 0}, {0, 0.99999, 0}, {0, 0, 0.5}, {0, 0, 0}};
  CHECK(std::abs(spectral_norm(d) - 1.0) <= 1e-12);
  Rng rng(29);
  for (int i = 0; i < 20; ++i) {
    const Matrix m = oracle::random_matrix(64, 64, rng);
    CHECK(std::abs(spectral_norm(m) - oracle::svd_norm(m)) <= 1e-10);
  }
}

TEST_CASE("spectral_norm rejects non-finite entries") {
  Matrix m{{1, 2}, {3, 4}};
  m(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(spectral_norm(m), InvalidInput);
  m(1, 0) = INFINITY;
  CHECK_THROWS_AS(spectral_norm(m), InvalidInput);
}

TEST_CASE("spectral_norm of a rank-one matrix is the product of vector norms") {
  Matrix m(3, 2);
  const double u[3] = {1, -2, 2}, v[2] = {3, 4};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) m(i, j) = u[i] * v[j];
  CHECK(spectral_norm(m) == doctest::Approx(15.0).epsilon(1e-10));
}

TEST_CASE("spectral_norm is deterministic and scale-equivariant") {
  Rng rng(5);
  const Matrix m = oracle::random_matrix(7, 9, rng);
  CHECK(spectral_norm(m) == spectral_norm(m));
  CHECK(spectral_norm(-2.5 * m) == doctest::Approx(2.5 * spectral_norm(m)).epsilon(1e-9));
  CHECK(spectral_norm(m.transposed()) == doctest::Approx(spectral_norm(m)).epsilon(1e-9));
}

TEST_CASE("frobenius_norm") {
  CHECK(frobenius_norm(Matrix(2, 2)) == 0.0);
  CHECK(frobenius_norm(Matrix{{3, 4}}) == 5.0);
  Rng rng(2);
  const Matrix m = oracle::random_matrix(4, 4, rng);
  double trace = 0.0;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 4; ++i) trace += m(i, j) * m(i, j);
  CHECK(std::abs(frobenius_norm(m) - std::sqrt(trace)) <= 1e-12);
  CHECK(frobenius_norm(m) >= spectral_norm(m));
}

TEST_CASE("row_submatrix") {
  const Matrix m{{1, 2}, {3, 4}, {5, 6}};
  CHECK(row_submatrix(m, RowIndexSet::all(3)) == m);
  const Matrix e = row_submatrix(m, RowIndexSet{});
  CHECK(e.rows() == 0);
  CHECK(e.cols() == 2);
  CHECK(row_submatrix(m, RowIndexSet({2, 0})) == Matrix{{1, 2}, {5, 6}});
  CHECK_THROWS_AS(row_submatrix(m, RowIndexSet({3})), IndexError);
}

TEST_CASE("RowIndexSet sorts and deduplicates") {
  const RowIndexSet s({4, 1, 4, 0});
  REQUIRE(s.size() == 3);
  CHECK(s.indices()[0] == 0);
  CHECK(s.indices()[2] == 4);
  const std::uint8_t flags[] = {0, 1, 1, 0, 1};
  const RowIndexSet f = RowIndexSet::from_flags(flags);
  CHECK(std::vector<std::size_t>(f.begin(), f.end()) == std::vector<std::size_t>{1, 2, 4});
}

TEST_CASE("submatrix norm never exceeds the full norm") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 12, c = 1 + rng() % 12;
    const Matrix m = oracle::random_matrix(r, c, rng);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < r; ++i)
      if (rng() % 2) idx.push_back(i);
    CHECK(spectral_norm(row_submatrix(m, RowIndexSet(idx))) <= spectral_norm(m) * (1 + 1e-9));
  }
}

TEST_CASE("matrix arithmetic") {
  const Matrix a{{1, 2}, {3, 4}}, b{{1, 1}, {1, 1}};
  CHECK(a - b == Matrix{{0, 1}, {2, 3}});
  CHECK(2.0 * a == Matrix{{2, 4}, {6, 8}});
  CHECK_THROWS_AS(a - Matrix(2, 3), ShapeError);
  CHECK(a.transposed() == Matrix{{1, 3}, {2, 4}});
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>(3)), ShapeError);
  const double v[] = {3, 4};
  CHECK(l2_norm(v) == 5.0);
}

namespace {

Matrix sparse_batch(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng() % 3 == 0 ? uniform(rng, 0.0, 1.0) : 0.0;
  return m;
}

}  // namespace

TEST_CASE("parallel kernels equal the serial reference bitwise") {
  Rng rng(23);
  for (const auto& [b, n, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 1},
                               {3, 5, 7},
                               {64, 300, 97},
                               {17, 513, 260}}) {
    const Matrix x = sparse_batch(b, k, rng);
    const Matrix w = oracle::random_matrix(n, k, rng);
    const Matrix d = sparse_batch(b, n, rng);
    for (int threads : {1, 2, 4}) {
      kernels::set_threads(threads);
      Matrix p, s;
      kernels::matmul_nt(x, w, p);
      kernels::serial::matmul_nt(x, w, s);
      CHECK(p == s);
      kernels::matmul_nn(d, w, p);
      kernels::serial::matmul_nn(d, w, s);
      CHECK(p == s);
      kernels::matmul_tn(d, x, p);
      kernels::serial::matmul_tn(d, x, s);
      CHECK(p == s);

      std::vector<double> vk(k), vn(n), yp(n), ys(n), zp(k), zs(k);
      for (double& v : vk) v = uniform(rng, -1, 1);
      for (double& v : vn) v = uniform(rng, -1, 1);
      kernels::matvec(w, vk, yp);
      kernels::serial::matvec(w, vk, ys);
      CHECK(yp == ys);
      kernels::matvec_t(w, vn, zp);
      kernels::serial::matvec_t(w, vn, zs);
      CHECK(zp == zs);
    }
  }
  kernels::set_threads(0);
}

TEST_CASE("kernels reject mismatched shapes") {
  Matrix out;
  CHECK_THROWS_AS(kernels::matmul_nt(Matrix(2, 3), Matrix(4, 2), out), ShapeError);
  CHECK_THROWS_AS(kernels::matmul_nn(Matrix(2, 3), Matrix(4, 2), out), ShapeError);
  CHECK_THROWS_AS(kernels::matmul_tn(Matrix(2, 3), Matrix(3, 2), out), ShapeError);
}
