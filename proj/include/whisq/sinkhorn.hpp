#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include "whisq/tensor.hpp"

namespace whisq::ot {

/// Controls for the debiased entropic divergence.
///
/// The entropic temperature is eps = blur^p and the ground cost is
/// |x - y|^p / p; only p = 2 is supported. The temperature is annealed from
/// the (power-of-two rounded) diameter of the joint point cloud down to the
/// target, dividing the length scale by `1 / scaling` per step. Each
/// intermediate temperature is kept until its marginal violation drops below
/// `stage_tol` or `stage_iters` updates have been made, and the intermediate
/// temperatures together use at most `anneal_share * max_iters` updates,
/// handed out evenly with unused updates carried forward. The target is then
/// held until every violation drops below `tol`. `max_iters` bounds the total
/// number of updates.
struct SinkhornOptions {
  double blur = 0.05;
  int p = 2;
  int max_iters = 200;
  double tol = 1e-6;
  double scaling = 0.5;
  double stage_tol = 1e-2;
  int stage_iters = 100;
  double anneal_share = 0.5;
};

struct SinkhornDiagnostics {
  int iterations = 0;
  int annealing_iterations = 0;  ///< updates made above the target temperature
  bool converged = false;
  double marginal_error = 0.0;
};

struct SinkhornResult {
  double value = 0.0;
  SinkhornDiagnostics diagnostics;
  Tensor grad_x;  ///< filled when requested, same shape as x
  Tensor grad_y;  ///< filled when requested, same shape as y
};

/// S(a, b) = OT(a, b) - OT(a, a)/2 - OT(b, b)/2 between the uniform measures
/// on the rows of x (n x d) and y (m x d), via symmetric log-domain updates.
///
/// Gradients are exact reverse-mode derivatives of the computed iterate
/// sequence (the iterations are unrolled, the potentials are not detached).
/// The annealing schedule and the iteration count are piecewise constant in
/// the inputs and receive no gradient.
SinkhornResult sinkhorn_divergence(const Tensor& x, const Tensor& y, const SinkhornOptions& opts,
                                   bool want_grad_x = false, bool want_grad_y = false);

/// One item of a batched divergence evaluation.
struct OtItem {
  const Tensor* x;
  const Tensor* y;
};

namespace serial {
std::vector<SinkhornResult> sinkhorn_batch(std::span<const OtItem> items, const SinkhornOptions& opts,
                                           bool want_grad_x, bool want_grad_y);
}  // namespace serial

namespace parallel {
/// Items are distributed over OpenMP threads; each item is computed by one
/// thread, so results match serial::sinkhorn_batch bit for bit.
std::vector<SinkhornResult> sinkhorn_batch(std::span<const OtItem> items, const SinkhornOptions& opts,
                                           bool want_grad_x, bool want_grad_y);
}  // namespace parallel

/// Small memo of recent results keyed by the exact input values. Lookups
/// compare every coordinate, so a hit returns what a fresh evaluation would.
class SinkhornCache {
 public:
  explicit SinkhornCache(std::size_t capacity = 16) : capacity_(capacity) {}

  const SinkhornResult* find(const Tensor& x, const Tensor& y, bool want_grad_x, bool want_grad_y) const;
  void insert(const Tensor& x, const Tensor& y, bool want_grad_x, bool want_grad_y, SinkhornResult result);

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  struct Entry {
    Tensor x, y;
    bool grad_x = false, grad_y = false;
    SinkhornResult result;
  };
  std::size_t capacity_;
  std::deque<Entry> entries_;
  mutable std::size_t hits_ = 0;
  mutable std::size_t misses_ = 0;
};

/// Temperatures visited by the annealing schedule for a point cloud of the
/// given diameter (last entry is blur^p).
std::vector<double> epsilon_schedule(double diameter, const SinkhornOptions& opts);

}  // namespace whisq::ot
