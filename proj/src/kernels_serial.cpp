#include "whisq/kernels.hpp"

namespace whisq::kernels::serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void half_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> c,
                  std::size_t n, std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = x[i * d + p] - y[j * d + p];
        s += diff * diff;
      }
      c[i * m + j] = 0.5 * s;
    }
  }
}

}  // namespace whisq::kernels::serial
