#include <algorithm>
#include <vector>

#include "whisq/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace whisq::kernels {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 15;
}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  // Rows are processed in pairs so each row of b is loaded once per pair.
  const auto pairs = static_cast<std::ptrdiff_t>((m + 1) / 2);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t pi = 0; pi < pairs; ++pi) {
    const auto i0 = 2 * static_cast<std::size_t>(pi);
    double* c0 = c.data() + i0 * n;
    std::fill(c0, c0 + n, 0.0);
    if (i0 + 1 < m) {
      double* c1 = c0 + n;
      std::fill(c1, c1 + n, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a[i0 * k + p];
        const double a1 = a[(i0 + 1) * k + p];
        const double* bp = b.data() + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) {
          c0[j] += a0 * bp[j];
          c1[j] += a1 * bp[j];
        }
      }
    } else {
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a[i0 * k + p];
        const double* bp = b.data() + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) c0[j] += a0 * bp[j];
      }
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  const auto mi = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t ii = 0; ii < mi; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims dims) {
  const auto [m, n, k] = dims;
  const auto mi = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t ii = 0; ii < mi; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* ci = c.data() + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double api = a[p * m + i];
      const double* bp = b.data() + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void half_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> c,
                  std::size_t n, std::size_t m, std::size_t d) {
  const auto ni = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n * m * d > kParallelWork)
  for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* xi = x.data() + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double* yj = y.data() + j * d;
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = xi[p] - yj[p];
        s += diff * diff;
      }
      c[i * m + j] = 0.5 * s;
    }
  }
}

}  // namespace parallel
}  // namespace whisq::kernels
