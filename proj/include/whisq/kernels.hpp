#pragma once

#include <cstddef>
#include <span>

namespace whisq::kernels {

// Dense kernels on row-major buffers. Every output element is reduced by a
// single thread in ascending index order, so the OpenMP versions are
// bit-identical to the serial references regardless of thread count.

/// Extents of a product C(m x n) = op(A) op(B) with inner dimension k.
struct GemmDims {
  std::size_t m;
  std::size_t n;
  std::size_t k;
};

namespace serial {

/// C = A B with A m x k, B k x n.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
/// C = A B^T with A m x k, B n x k.
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
/// C = A^T B with A k x m, B k x n.
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
/// C_ij = |x_i - y_j|^2 / 2 with X n x d, Y m x d.
void half_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> c,
                  std::size_t n, std::size_t m, std::size_t d);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims);
void half_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> c,
                  std::size_t n, std::size_t m, std::size_t d);

}  // namespace parallel

/// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace whisq::kernels
