#pragma once

#include <cstddef>
#include <functional>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "whisq/tensor.hpp"

namespace whisq::ad {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// valid topological order, so backward is a single reverse sweep.
class Tape {
 public:
  /// Backward callback: receives the tape and the upstream gradient of the node.
  using Backward = std::function<void(Tape&, const Tensor& upstream)>;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  /// Constant leaf that refers to `value` instead of copying it; `value` must
  /// outlive the tape and stay unchanged while the tape is in use. Unlike the
  /// other leaves its value is not checked for finiteness.
  Var borrowed_constant(const Tensor& value);

  /// Records an op result. Throws NumericError if `value` is not finite.
  Var push(std::string_view op, Tensor value, std::span<const Var> parents, Backward backward);

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, std::span<const double> g);

  /// Seeds d(loss)/d(loss) = 1 and sweeps. Throws if loss is not a scalar or
  /// any gradient becomes non-finite.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Test hook: multiplies the gradient passed to parents of every node of
  /// type `op` by `factor`. Used as a negative control for gradient checks.
  void corrupt_backward(std::string op, double factor);

  /// Hash of every branch taken by piecewise ops (relu sign, huber region)
  /// in evaluation order. Two evaluations with equal signatures lie on the
  /// same smooth piece of the loss.
  std::uint64_t branch_signature() const { return branch_signature_; }
  void note_branch(bool taken) { branch_signature_ = (branch_signature_ ^ (taken ? 0x9eU : 0x3bU)) * 0x100000001b3ULL; }

  /// Smallest |x| seen by any relu on this tape (infinity if none).
  double kink_distance() const { return kink_distance_; }
  void note_kink_distance(double d) { kink_distance_ = d < kink_distance_ ? d : kink_distance_; }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::string corrupt_op_;
  double corrupt_factor_ = 1.0;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
  double kink_distance_ = std::numeric_limits<double>::infinity();
};

// Elementwise and structural ops. Shapes must match exactly; there is no
// general broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);
Var mean(Var a);

/// a (r x c) plus bias (c) broadcast over rows.
Var add_row_bias(Var a, Var bias);
/// a (m x k) times b (k x n).
Var matmul(Var a, Var b);
/// a (m x k) times b^T with b (n x k).
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

/// Row-wise softmax over columns with key_mask[c] == 0 excluded. Excluded
/// entries are exactly zero and do not take part in the max or the sum.
Var masked_softmax_rows(Var logits, std::span<const unsigned char> key_mask);
/// Mean over rows with mask[r] != 0; returns 1 x c.
Var mean_pool_masked(Var h, std::span<const unsigned char> mask);
/// Zeroes rows with mask[r] == 0.
Var mask_rows(Var a, std::span<const unsigned char> mask);
/// Keeps the listed rows in order.
Var select_rows(Var a, std::span<const std::size_t> rows);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

/// Mean Huber loss with threshold delta between pred and a constant target of
/// the same size.
Var huber(Var pred, const Tensor& target, double delta);

/// Scalar-valued computation over trainable tensors.
using LossFn = std::function<Var(Tape&, std::span<const Var> params)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Tensor> grads;
};

/// Exact reverse-mode gradient of `fn` with respect to every tensor in `params`.
ValueAndGrad value_and_grad(const LossFn& fn, std::span<const Tensor> params);

/// Central differences (f(p+h) - f(p-h)) / 2h per scalar parameter. Throws if
/// two evaluations at the same point disagree.
std::vector<Tensor> finite_difference_grad(const LossFn& fn, std::span<const Tensor> params, double h);

/// A loss given as a list of scalar terms whose sum is the objective.
using LossTermsFn = std::function<std::vector<Var>(Tape&, std::span<const Var> params)>;

struct NumericGradient {
  std::vector<Tensor> grads;
  /// Step actually used per coordinate. When f(p + h) or f(p - h) lands on a
  /// different branch of a piecewise op than f(p), the step is divided by 10
  /// up to `max_reductions` times; 0 marks a coordinate left unchecked.
  std::vector<Tensor> steps;
};

/// Central differences of the sum of terms, differencing each term on its
/// own so a large term does not swamp the rounding of a small one.
NumericGradient finite_difference_grad_terms(const LossTermsFn& fn, std::span<const Tensor> params, double h,
                                             int max_reductions = 3);

/// Evaluates `fn` without recording gradients.
double evaluate(const LossFn& fn, std::span<const Tensor> params);

struct GradEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t reduced_steps = 0;  // coordinates checked with a smaller step
  std::size_t skipped = 0;        // coordinates with no usable step
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double max_rel_err() const;
};

/// Relative error per element is |a - n| / max(|a|, |n|, denom_floor); each
/// entry reports the maximum over its tensor.
GradReport compare_gradients(std::span<const std::string> names, std::span<const Tensor> analytic,
                             std::span<const Tensor> numeric, double denom_floor = 1e-12);
/// As above, skipping coordinates whose step is 0 and counting reduced steps
/// relative to `h`.
GradReport compare_gradients(std::span<const std::string> names, std::span<const Tensor> analytic,
                             const NumericGradient& numeric, double h, double denom_floor = 1e-12);

}  // namespace whisq::ad
