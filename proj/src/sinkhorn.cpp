#include "whisq/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "whisq/errors.hpp"
#include "whisq/kernels.hpp"

namespace whisq::ot {

namespace {

using Vec = std::vector<double>;

// Soft-min over columns: out_i = -eps * log sum_j exp(w_log + (h_j - C_ij) / eps).
Vec softmin(double eps, std::span<const double> cost, std::size_t rows, std::size_t cols,
            std::span<const double> h, double w_log) {
  Vec out(rows);
  Vec z(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      z[j] = w_log + (h[j] - cost[i * cols + j]) / eps;
      mx = std::max(mx, z[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(z[j] - mx);
    out[i] = -eps * (mx + std::log(s));
  }
  return out;
}

// Same as softmin but over rows of C (i.e. softmin on C^T): out_j over i.
Vec softmin_t(double eps, std::span<const double> cost, std::size_t rows, std::size_t cols,
              std::span<const double> h, double w_log) {
  Vec ct(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) ct[j * rows + i] = cost[i * cols + j];
  }
  return softmin(eps, ct, cols, rows, h, w_log);
}

// Reverse of softmin: given out_bar, accumulate into h_bar and cost_bar.
// d out_i / d h_j = -P_ij, d out_i / d C_ij = P_ij with P the row softmax.
void softmin_backward(double eps, std::span<const double> cost, std::size_t rows, std::size_t cols,
                      std::span<const double> h, double w_log, std::span<const double> out_bar,
                      std::span<double> h_bar, std::span<double> cost_bar, bool transposed) {
  Vec z(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (out_bar[i] == 0.0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      const double c = transposed ? cost[j * rows + i] : cost[i * cols + j];
      z[j] = w_log + (h[j] - c) / eps;
      mx = std::max(mx, z[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      z[j] = std::exp(z[j] - mx);
      s += z[j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const double w = out_bar[i] * z[j] / s;
      if (!h_bar.empty()) h_bar[j] -= w;
      if (transposed) {
        cost_bar[j * rows + i] += w;
      } else {
        cost_bar[i * cols + j] += w;
      }
    }
  }
}

double max_violation(std::span<const double> current, std::span<const double> updated, double eps, double weight) {
  double err = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    err = std::max(err, weight * std::abs(std::exp((current[i] - updated[i]) / eps) - 1.0));
  }
  return err;
}

double diameter(const Tensor& x, const Tensor& y) {
  const std::size_t d = x.cols();
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      lo = std::min(lo, x.at(i, k));
      hi = std::max(hi, x.at(i, k));
    }
    for (std::size_t j = 0; j < y.rows(); ++j) {
      lo = std::min(lo, y.at(j, k));
      hi = std::max(hi, y.at(j, k));
    }
    s += (hi - lo) * (hi - lo);
  }
  return std::sqrt(s);
}

// Accumulate d/dx, d/dy of C_ij = |x_i - y_j|^2 / 2.
void cost_backward(const Tensor& x, const Tensor& y, std::span<const double> cbar, Tensor* gx, Tensor* gy) {
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double w = cbar[i * m + j];
      if (w == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x.at(i, k) - y.at(j, k);
        if (gx) (*gx)[i * d + k] += w * diff;
        if (gy) (*gy)[j * d + k] -= w * diff;
      }
    }
  }
}

struct Stage {
  double eps;
  Vec f, g, faa, gbb;  // potentials entering this update
};

}  // namespace

std::vector<double> epsilon_schedule(double diam, const SinkhornOptions& opts) {
  if (!(opts.blur > 0.0)) throw std::invalid_argument("sinkhorn: blur must be positive");
  if (!(opts.scaling > 0.0 && opts.scaling < 1.0)) throw std::invalid_argument("sinkhorn: scaling must be in (0,1)");
  std::vector<double> eps;
  if (diam > 0.0) {
    double scale = std::exp2(std::ceil(std::log2(diam)));
    while (scale > opts.blur) {
      eps.push_back(std::pow(scale, opts.p));
      scale *= opts.scaling;
    }
  }
  eps.push_back(std::pow(opts.blur, opts.p));
  return eps;
}

SinkhornResult sinkhorn_divergence(const Tensor& x, const Tensor& y, const SinkhornOptions& opts,
                                   bool want_grad_x, bool want_grad_y) {
  if (opts.p != 2) throw std::invalid_argument("sinkhorn: only p = 2 is supported");
  if (x.empty() || y.empty()) throw DataError("sinkhorn: empty point set");
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) {
    throw std::invalid_argument("sinkhorn: point clouds must be matrices of equal width, got " + x.shape_string() +
                                " and " + y.shape_string());
  }
  if (opts.max_iters < 1) throw std::invalid_argument("sinkhorn: max_iters must be >= 1");
  if (opts.stage_iters < 1) throw std::invalid_argument("sinkhorn: stage_iters must be >= 1");
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  const double a_log = -std::log(static_cast<double>(n));
  const double b_log = -std::log(static_cast<double>(m));
  const double a_w = 1.0 / static_cast<double>(n);
  const double b_w = 1.0 / static_cast<double>(m);

  Vec cxy(n * m), cxx(n * n), cyy(m * m);
  kernels::parallel::half_sq_dist(x.data(), y.data(), cxy, n, m, d);
  kernels::parallel::half_sq_dist(x.data(), x.data(), cxx, n, n, d);
  kernels::parallel::half_sq_dist(y.data(), y.data(), cyy, m, m, d);

  const std::vector<double> schedule = epsilon_schedule(diameter(x, y), opts);
  const double eps_final = schedule.back();
  const bool tracking = want_grad_x || want_grad_y;

  const Vec zn(n, 0.0), zm(m, 0.0);
  const double eps0 = schedule.front();
  Vec f = softmin(eps0, cxy, n, m, zm, b_log);
  Vec g = softmin_t(eps0, cxy, n, m, zn, a_log);
  Vec faa = softmin(eps0, cxx, n, n, zn, a_log);
  Vec gbb = softmin(eps0, cyy, m, m, zm, b_log);

  std::vector<Stage> stages;
  SinkhornResult result;
  if (!(opts.anneal_share >= 0.0 && opts.anneal_share <= 1.0)) {
    throw std::invalid_argument("sinkhorn: anneal_share must be in [0,1]");
  }
  const double anneal_budget = opts.anneal_share * opts.max_iters;
  const double anneal_stages = static_cast<double>(schedule.size() - 1);
  std::size_t step = 0;
  int iters = 0, stage_iters = 0;
  while (iters < opts.max_iters) {
    const double eps = schedule[step];
    const bool last = step + 1 == schedule.size();
    Vec ft = softmin(eps, cxy, n, m, g, b_log);
    Vec gt = softmin_t(eps, cxy, n, m, f, a_log);
    Vec fat = softmin(eps, cxx, n, n, faa, a_log);
    Vec gbt = softmin(eps, cyy, m, m, gbb, b_log);
    const double err = std::max({max_violation(f, ft, eps, a_w), max_violation(g, gt, eps, b_w),
                                 max_violation(faa, fat, eps, a_w), max_violation(gbb, gbt, eps, b_w)});
    if (last) {
      result.diagnostics.marginal_error = err;
      if (err < opts.tol) {
        result.diagnostics.converged = true;
        break;
      }
    } else if (stage_iters > 0 &&
               (err < opts.stage_tol || stage_iters >= opts.stage_iters ||
                result.diagnostics.annealing_iterations >= anneal_budget * static_cast<double>(step + 1) / anneal_stages)) {
      ++step;
      stage_iters = 0;
      continue;
    }
    if (tracking) stages.push_back({eps, f, g, faa, gbb});
    for (std::size_t i = 0; i < n; ++i) f[i] = 0.5 * (f[i] + ft[i]);
    for (std::size_t j = 0; j < m; ++j) g[j] = 0.5 * (g[j] + gt[j]);
    for (std::size_t i = 0; i < n; ++i) faa[i] = 0.5 * (faa[i] + fat[i]);
    for (std::size_t j = 0; j < m; ++j) gbb[j] = 0.5 * (gbb[j] + gbt[j]);
    ++iters;
    ++stage_iters;
    if (!last) ++result.diagnostics.annealing_iterations;
  }
  result.diagnostics.iterations = iters;

  // Final extrapolation at the target temperature.
  const Vec f_fin = softmin(eps_final, cxy, n, m, g, b_log);
  const Vec g_fin = softmin_t(eps_final, cxy, n, m, f, a_log);
  const Vec faa_fin = softmin(eps_final, cxx, n, n, faa, a_log);
  const Vec gbb_fin = softmin(eps_final, cyy, m, m, gbb, b_log);

  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) sx += f_fin[i] - faa_fin[i];
  for (std::size_t j = 0; j < m; ++j) sy += g_fin[j] - gbb_fin[j];
  result.value = a_w * sx + b_w * sy;
  if (!std::isfinite(result.value)) throw NumericError("sinkhorn: non-finite divergence");

  if (!tracking) return result;

  // Reverse sweep. Adjoints of the potentials entering the final step.
  Vec fb(n, 0.0), gb(m, 0.0), faab(n, 0.0), gbbb(m, 0.0);
  Vec cxy_bar(n * m, 0.0), cxx_bar(want_grad_x ? n * n : 0, 0.0), cyy_bar(want_grad_y ? m * m : 0, 0.0);
  const Vec an(n, a_w), bm(m, b_w), man(n, -a_w), mbm(m, -b_w);

  softmin_backward(eps_final, cxy, n, m, g, b_log, an, gb, cxy_bar, false);
  softmin_backward(eps_final, cxy, m, n, f, a_log, bm, fb, cxy_bar, true);
  if (want_grad_x) softmin_backward(eps_final, cxx, n, n, faa, a_log, man, faab, cxx_bar, false);
  if (want_grad_y) softmin_backward(eps_final, cyy, m, m, gbb, b_log, mbm, gbbb, cyy_bar, false);

  Vec hf(n), hg(m), hfaa(n), hgbb(m);
  for (std::size_t k = stages.size(); k-- > 0;) {
    const Stage& s = stages[k];
    for (std::size_t i = 0; i < n; ++i) hf[i] = 0.5 * fb[i];
    for (std::size_t j = 0; j < m; ++j) hg[j] = 0.5 * gb[j];
    for (std::size_t i = 0; i < n; ++i) hfaa[i] = 0.5 * faab[i];
    for (std::size_t j = 0; j < m; ++j) hgbb[j] = 0.5 * gbbb[j];
    // State adjoints pass through the averaging with weight 1/2.
    fb = hf;
    gb = hg;
    faab = hfaa;
    gbbb = hgbb;
    softmin_backward(s.eps, cxy, n, m, s.g, b_log, hf, gb, cxy_bar, false);
    softmin_backward(s.eps, cxy, m, n, s.f, a_log, hg, fb, cxy_bar, true);
    if (want_grad_x) softmin_backward(s.eps, cxx, n, n, s.faa, a_log, hfaa, faab, cxx_bar, false);
    if (want_grad_y) softmin_backward(s.eps, cyy, m, m, s.gbb, b_log, hgbb, gbbb, cyy_bar, false);
  }
  // Initialization from zero potentials depends on the costs only.
  softmin_backward(eps0, cxy, n, m, zm, b_log, fb, {}, cxy_bar, false);
  softmin_backward(eps0, cxy, m, n, zn, a_log, gb, {}, cxy_bar, true);
  if (want_grad_x) softmin_backward(eps0, cxx, n, n, zn, a_log, faab, {}, cxx_bar, false);
  if (want_grad_y) softmin_backward(eps0, cyy, m, m, zm, b_log, gbbb, {}, cyy_bar, false);

  if (want_grad_x) result.grad_x = Tensor(x.shape());
  if (want_grad_y) result.grad_y = Tensor(y.shape());
  cost_backward(x, y, cxy_bar, want_grad_x ? &result.grad_x : nullptr, want_grad_y ? &result.grad_y : nullptr);
  if (want_grad_x) cost_backward(x, x, cxx_bar, &result.grad_x, &result.grad_x);
  if (want_grad_y) cost_backward(y, y, cyy_bar, &result.grad_y, &result.grad_y);
  if ((want_grad_x && !result.grad_x.all_finite()) || (want_grad_y && !result.grad_y.all_finite())) {
    throw NumericError("sinkhorn: non-finite gradient");
  }
  return result;
}

const SinkhornResult* SinkhornCache::find(const Tensor& x, const Tensor& y, bool want_grad_x,
                                          bool want_grad_y) const {
  for (const auto& e : entries_) {
    if (e.grad_x == want_grad_x && e.grad_y == want_grad_y && e.x == x && e.y == y) {
      ++hits_;
      return &e.result;
    }
  }
  ++misses_;
  return nullptr;
}

void SinkhornCache::insert(const Tensor& x, const Tensor& y, bool want_grad_x, bool want_grad_y,
                           SinkhornResult result) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back({x, y, want_grad_x, want_grad_y, std::move(result)});
}

namespace serial {

std::vector<SinkhornResult> sinkhorn_batch(std::span<const OtItem> items, const SinkhornOptions& opts,
                                           bool want_grad_x, bool want_grad_y) {
  std::vector<SinkhornResult> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(sinkhorn_divergence(*it.x, *it.y, opts, want_grad_x, want_grad_y));
  return out;
}

}  // namespace serial

namespace parallel {

std::vector<SinkhornResult> sinkhorn_batch(std::span<const OtItem> items, const SinkhornOptions& opts,
                                           bool want_grad_x, bool want_grad_y) {
  std::vector<SinkhornResult> out(items.size());
  const auto count = static_cast<std::ptrdiff_t>(items.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      const auto& it = items[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(i)] = sinkhorn_divergence(*it.x, *it.y, opts, want_grad_x, want_grad_y);
    } catch (...) {
#pragma omp critical(whisq_sinkhorn_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace parallel
}  // namespace whisq::ot
