#pragma once

// Dense products used by training, evaluation and the norm routines.
//
// Each kernel in `widthlab::kernels` is OpenMP-parallel over output rows. A
// single thread owns each output row and accumulates it in a fixed order, so
// results are bit-identical for any thread count. `widthlab::kernels::serial`
// holds naive triple-loop versions kept as the testing reference.

#include <cstddef>
#include <span>

#include "widthlab/linalg.hpp"

namespace widthlab::kernels {

// out (b x n) = x (b x k) * w^T, with w stored n x k.
void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out);

// out (b x k) = d (b x n) * w, with w stored n x k.
void matmul_nn(const Matrix& d, const Matrix& w, Matrix& out);

// out (n x k) = d^T (n x b) * x (b x k).
void matmul_tn(const Matrix& d, const Matrix& x, Matrix& out);

// y = m v and y = m^T v.
void matvec(const Matrix& m, std::span<const double> v, std::span<double> y);
void matvec_t(const Matrix& m, std::span<const double> v, std::span<double> y);

// Worker threads used by the kernels; 0 restores the OpenMP default.
void set_threads(int n);
int threads();

namespace serial {

void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out);
void matmul_nn(const Matrix& d, const Matrix& w, Matrix& out);
void matmul_tn(const Matrix& d, const Matrix& x, Matrix& out);
void matvec(const Matrix& m, std::span<const double> v, std::span<double> y);
void matvec_t(const Matrix& m, std::span<const double> v, std::span<double> y);

}  // namespace serial

}  // namespace widthlab::kernels
