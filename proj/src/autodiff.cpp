#include "whisq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "whisq/errors.hpp"
#include "whisq/kernels.hpp"

namespace whisq::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return push("constant", std::move(value), {}, nullptr); }

Var Tape::borrowed_constant(const Tensor& value) {
  Node node;
  node.op = "constant";
  node.borrowed = &value;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  Var v = push("parameter", std::move(value), {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::push(std::string_view op, Tensor value, std::span<const Var> parents, Backward backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error("Tape::push: parent from another tape");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, std::span<const double> g) {
  Node& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (node.grad.empty()) node.grad = Tensor(value(v.id()).shape());
  if (g.size() != node.grad.size()) throw std::logic_error("Tape::accumulate: size mismatch");
  auto dst = node.grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Tape::accumulate(Var v, const Tensor& g) { accumulate(v, g.data()); }

const Tensor& Tape::grad(std::size_t id) const {
  Node const& node = nodes_[id];
  if (node.grad.empty()) {
    static const Tensor kNone;
    return kNone;
  }
  return node.grad;
}

void Tape::corrupt_backward(std::string op, double factor) {
  corrupt_op_ = std::move(op);
  corrupt_factor_ = factor;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::logic_error("Tape::backward: foreign var");
  if (value(loss.id()).size() != 1) {
    throw std::invalid_argument("backward: loss is not a scalar (shape " +
                                value(loss.id()).shape_string() + ")");
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad = Tensor(value(loss.id()).shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    if (!node.grad.all_finite()) {
      throw NumericError("non-finite gradient at op '" + std::string(node.op) + "'");
    }
    Tensor upstream = node.grad;
    if (!corrupt_op_.empty() && node.op == corrupt_op_) {
      for (double& g : upstream.storage()) g *= corrupt_factor_;
    }
    node.backward(*this, upstream);
  }
  for (const auto& n : nodes_) {
    if (!n.grad.empty() && !n.grad.all_finite()) throw NumericError("non-finite gradient");
  }
}

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.value().shape() != b.value().shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_string() +
                                " vs " + b.value().shape_string());
  }
}

void require_rank2(Var a, const char* op) {
  if (a.value().rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + a.value().shape_string());
  }
}

template <typename F>
Tensor map(const Tensor& t, F f) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const Var parents[] = {a, b};
  return a.tape()->push("add", std::move(out), parents, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const Var parents[] = {a, b};
  return a.tape()->push("sub", std::move(out), parents, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, map(g, [](double x) { return -x; }));
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const Var parents[] = {a, b};
  return a.tape()->push("mul", std::move(out), parents, [a, b](Tape& t, const Tensor& g) {
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= b.value()[i];
      gb[i] *= a.value()[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Var scale(Var a, double s) {
  const Var parents[] = {a};
  return a.tape()->push("scale", map(a.value(), [s](double x) { return s * x; }), parents,
                        [a, s](Tape& t, const Tensor& g) { t.accumulate(a, map(g, [s](double x) { return s * x; })); });
}

Var relu(Var a) {
  double near = std::numeric_limits<double>::infinity();
  for (double x : a.value().data()) {
    a.tape()->note_branch(x > 0.0);
    near = std::min(near, std::abs(x));
  }
  a.tape()->note_kink_distance(near);
  const Var parents[] = {a};
  return a.tape()->push("relu", map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), parents,
                        [a](Tape& t, const Tensor& g) {
                          Tensor ga = g;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (!(a.value()[i] > 0.0)) ga[i] = 0.0;
                          }
                          t.accumulate(a, ga);
                        });
}

Var exp(Var a) {
  const Var parents[] = {a};
  Tensor out = map(a.value(), [](double x) { return std::exp(x); });
  return a.tape()->push("exp", out, parents, [a, out](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] *= out[i];
    t.accumulate(a, ga);
  });
}

Var log(Var a) {
  const Var parents[] = {a};
  return a.tape()->push("log", map(a.value(), [](double x) { return std::log(x); }), parents,
                        [a](Tape& t, const Tensor& g) {
                          Tensor ga = g;
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] /= a.value()[i];
                          t.accumulate(a, ga);
                        });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Var parents[] = {a};
  return a.tape()->push("sum", Tensor::scalar(s), parents, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor(a.value().shape(), g.item()));
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var add_row_bias(Var a, Var bias) {
  require_rank2(a, "add_row_bias");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (bias.value().size() != c) throw std::invalid_argument("add_row_bias: bias length mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias.value()[j];
  }
  const Var parents[] = {a, bias};
  return a.tape()->push("add_row_bias", std::move(out), parents, [a, bias, r, c](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (!bias.requires_grad()) return;
    std::vector<double> gb(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
    t.accumulate(bias, gb);
  });
}

Var matmul(Var a, Var b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + a.value().shape_string() + " * " +
                                b.value().shape_string());
  }
  Tensor out({m, n});
  kernels::parallel::matmul(a.value().data(), b.value().data(), out.data(), {m, n, k});
  const Var parents[] = {a, b};
  return a.tape()->push("matmul", std::move(out), parents, [a, b, m, n, k](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga({m, k});  // g (m x n) * b^T
      kernels::parallel::matmul_nt(g.data(), b.value().data(), ga.data(), {m, k, n});
      t.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb({k, n});  // a^T * g
      kernels::parallel::matmul_tn(a.value().data(), g.data(), gb.data(), {k, n, m});
      t.accumulate(b, gb);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch " + a.value().shape_string() + " * " +
                                b.value().shape_string() + "^T");
  }
  Tensor out({m, n});
  kernels::parallel::matmul_nt(a.value().data(), b.value().data(), out.data(), {m, n, k});
  const Var parents[] = {a, b};
  return a.tape()->push("matmul_nt", std::move(out), parents, [a, b, m, n, k](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga({m, k});  // g (m x n) * b (n x k)
      kernels::parallel::matmul(g.data(), b.value().data(), ga.data(), {m, k, n});
      t.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb({n, k});  // g^T (n x m) * a (m x k)
      kernels::parallel::matmul_tn(g.data(), a.value().data(), gb.data(), {n, k, m});
      t.accumulate(b, gb);
    }
  });
}

Var transpose(Var a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
  }
  const Var parents[] = {a};
  return a.tape()->push("transpose", std::move(out), parents, [a, r, c](Tape& t, const Tensor& g) {
    Tensor ga({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
    }
    t.accumulate(a, ga);
  });
}

Var masked_softmax_rows(Var logits, std::span<const unsigned char> key_mask) {
  require_rank2(logits, "masked_softmax_rows");
  const std::size_t r = logits.value().rows(), c = logits.value().cols();
  if (key_mask.size() != c) throw std::invalid_argument("masked_softmax_rows: mask length mismatch");
  if (std::none_of(key_mask.begin(), key_mask.end(), [](unsigned char m) { return m != 0; })) {
    throw DataError("masked_softmax_rows: no valid keys");
  }
  std::vector<unsigned char> mask(key_mask.begin(), key_mask.end());
  Tensor out({r, c});
  const Tensor& z = logits.value();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (mask[j]) mx = std::max(mx, z[i * c + j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask[j]) continue;
      const double e = std::exp(z[i * c + j] - mx);
      out[i * c + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < c; ++j) {
      if (mask[j]) out[i * c + j] /= denom;
    }
  }
  const Var parents[] = {logits};
  Tensor probs = out;
  return logits.tape()->push("masked_softmax_rows", std::move(out), parents,
                             [logits, probs, r, c, mask](Tape& t, const Tensor& g) {
                               Tensor gz({r, c});
                               for (std::size_t i = 0; i < r; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   if (mask[j]) dot += g[i * c + j] * probs[i * c + j];
                                 }
                                 for (std::size_t j = 0; j < c; ++j) {
                                   if (mask[j]) gz[i * c + j] = probs[i * c + j] * (g[i * c + j] - dot);
                                 }
                               }
                               t.accumulate(logits, gz);
                             });
}

Var mean_pool_masked(Var h, std::span<const unsigned char> mask) {
  require_rank2(h, "mean_pool_masked");
  const std::size_t r = h.value().rows(), c = h.value().cols();
  if (mask.size() != r) throw std::invalid_argument("mean_pool_masked: mask length mismatch");
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < r; ++i) {
    if (mask[i]) valid.push_back(i);
  }
  if (valid.empty()) throw DataError("mean_pool_masked: all positions masked");
  const double inv = 1.0 / static_cast<double>(valid.size());
  Tensor out({1, c});
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0.0;
    for (std::size_t i : valid) s += h.value()[i * c + j];
    out[j] = s * inv;
  }
  const Var parents[] = {h};
  return h.tape()->push("mean_pool_masked", std::move(out), parents, [h, valid, inv, r, c](Tape& t, const Tensor& g) {
    Tensor gh({r, c});
    for (std::size_t i : valid) {
      for (std::size_t j = 0; j < c; ++j) gh[i * c + j] = g[j] * inv;
    }
    t.accumulate(h, gh);
  });
}

Var mask_rows(Var a, std::span<const unsigned char> mask) {
  require_rank2(a, "mask_rows");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (mask.size() != r) throw std::invalid_argument("mask_rows: mask length mismatch");
  std::vector<unsigned char> m(mask.begin(), mask.end());
  Tensor out = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    if (!m[i]) std::fill_n(out.storage().begin() + static_cast<std::ptrdiff_t>(i * c), c, 0.0);
  }
  const Var parents[] = {a};
  return a.tape()->push("mask_rows", std::move(out), parents, [a, m, c](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) std::fill_n(ga.storage().begin() + static_cast<std::ptrdiff_t>(i * c), c, 0.0);
    }
    t.accumulate(a, ga);
  });
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  require_rank2(a, "select_rows");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (rows.empty()) throw std::invalid_argument("select_rows: empty selection");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r) throw std::out_of_range("select_rows: row index out of range");
    std::copy_n(a.value().row(idx[k]).begin(), c, out.row(k).begin());
  }
  const Var parents[] = {a};
  return a.tape()->push("select_rows", std::move(out), parents, [a, idx, r, c](Tape& t, const Tensor& g) {
    Tensor ga({r, c});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      for (std::size_t j = 0; j < c; ++j) ga[idx[k] * c + j] += g[k * c + j];
    }
    t.accumulate(a, ga);
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  require_rank2(a, "slice_cols");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (count == 0 || begin + count > c) throw std::out_of_range("slice_cols: range out of bounds");
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * c + begin + j];
  }
  const Var parents[] = {a};
  return a.tape()->push("slice_cols", std::move(out), parents, [a, begin, count, r, c](Tape& t, const Tensor& g) {
    Tensor ga({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < count; ++j) ga[i * c + begin + j] = g[i * count + j];
    }
    t.accumulate(a, ga);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.value().rows() != r) throw std::invalid_argument("concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k].value()[i * widths[k] + j];
    }
    off += widths[k];
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push("concat_cols", std::move(out), parts, [ps, widths, r, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (ps[k].requires_grad()) {
        Tensor gk({r, widths[k]});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] = g[i * total + off + j];
        }
        t.accumulate(ps[k], gk);
      }
      off += widths[k];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.value().cols() != c) throw std::invalid_argument("concat_rows: column count mismatch");
    heights.push_back(p.value().rows());
    total += p.value().rows();
  }
  Tensor out({total, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(off * c));
    off += p.value().rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push("concat_rows", std::move(out), parts, [ps, heights, c](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::size_t n = heights[k] * c;
      t.accumulate(ps[k], g.data().subspan(off * c, n));
      off += heights[k];
    }
  });
}

Var huber(Var pred, const Tensor& target, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be positive");
  const std::size_t n = pred.value().size();
  if (n == 0) throw std::invalid_argument("huber: empty batch");
  if (target.size() != n) throw std::invalid_argument("huber: prediction/target length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = pred.value()[i] - target[i];
    const double a = std::abs(r);
    pred.tape()->note_branch(a <= delta);
    s += a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
  }
  const double inv = 1.0 / static_cast<double>(n);
  const Var parents[] = {pred};
  return pred.tape()->push("huber", Tensor::scalar(s * inv), parents, [pred, target, delta, inv, n](Tape& t, const Tensor& g) {
    Tensor gp(pred.value().shape());
    for (std::size_t i = 0; i < n; ++i) {
      const double r = pred.value()[i] - target[i];
      const double d = std::abs(r) <= delta ? r : (r > 0.0 ? delta : -delta);
      gp[i] = g.item() * d * inv;
    }
    t.accumulate(pred, gp);
  });
}

ValueAndGrad value_and_grad(const LossFn& fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.parameter(p));
  Var loss = fn(tape, vars);
  if (loss.value().size() != 1) throw std::invalid_argument("value_and_grad: loss is not a scalar");
  tape.backward(loss);
  ValueAndGrad out;
  out.value = loss.value().item();
  for (const Var& v : vars) {
    out.grads.push_back(v.grad().empty() ? Tensor(v.value().shape()) : v.grad());
  }
  return out;
}

namespace {

struct TermValues {
  std::vector<double> values;
  std::uint64_t branches = 0;
};

void require_finite(std::span<const Tensor> params) {
  for (const Tensor& p : params) {
    if (!p.all_finite()) throw NumericError("non-finite parameter value");
  }
}

// Parameters are borrowed, not copied; callers check finiteness.
TermValues evaluate_terms(const LossTermsFn& fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.borrowed_constant(p));
  const std::vector<Var> terms = fn(tape, vars);
  TermValues out;
  out.values.reserve(terms.size());
  for (const Var& t : terms) {
    if (t.value().size() != 1) throw std::invalid_argument("evaluate: loss is not a scalar");
    out.values.push_back(t.value().item());
  }
  out.branches = tape.branch_signature();
  return out;
}

std::vector<Var> as_terms(const LossFn& fn, Tape& t, std::span<const Var> v) { return {fn(t, v)}; }

}  // namespace

double evaluate(const LossFn& fn, std::span<const Tensor> params) {
  require_finite(params);
  return evaluate_terms([&](Tape& t, std::span<const Var> v) { return as_terms(fn, t, v); }, params).values[0];
}

std::vector<Tensor> finite_difference_grad(const LossFn& fn, std::span<const Tensor> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be positive");
  std::vector<Tensor> point(params.begin(), params.end());
  if (evaluate(fn, point) != evaluate(fn, point)) {
    throw NumericError("finite_difference_grad: loss computation is not deterministic");
  }
  std::vector<Tensor> grads;
  grads.reserve(point.size());
  for (std::size_t k = 0; k < point.size(); ++k) {
    Tensor g(point[k].shape());
    for (std::size_t i = 0; i < point[k].size(); ++i) {
      const double orig = point[k][i];
      point[k][i] = orig + h;
      const double fp = evaluate(fn, point);
      point[k][i] = orig - h;
      const double fm = evaluate(fn, point);
      point[k][i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

NumericGradient finite_difference_grad_terms(const LossTermsFn& fn, std::span<const Tensor> params, double h,
                                             int max_reductions) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be positive");
  require_finite(params);
  std::vector<Tensor> point(params.begin(), params.end());
  const TermValues base = evaluate_terms(fn, point);
  const TermValues again = evaluate_terms(fn, point);
  if (base.values != again.values || base.branches != again.branches) {
    throw NumericError("finite_difference_grad: loss computation is not deterministic");
  }
  NumericGradient out;
  out.grads.reserve(point.size());
  out.steps.reserve(point.size());
  for (std::size_t k = 0; k < point.size(); ++k) {
    Tensor g(point[k].shape());
    Tensor used(point[k].shape());
    for (std::size_t i = 0; i < point[k].size(); ++i) {
      const double orig = point[k][i];
      double step = h;
      for (int attempt = 0; attempt <= max_reductions; ++attempt, step /= 10.0) {
        point[k][i] = orig + step;
        const TermValues fp = evaluate_terms(fn, point);
        point[k][i] = orig - step;
        const TermValues fm = evaluate_terms(fn, point);
        point[k][i] = orig;
        if (fp.branches != base.branches || fm.branches != base.branches) continue;
        double d = 0.0;
        for (std::size_t t = 0; t < fp.values.size(); ++t) d += (fp.values[t] - fm.values[t]) / (2.0 * step);
        g[i] = d;
        used[i] = step;
        break;
      }
    }
    out.grads.push_back(std::move(g));
    out.steps.push_back(std::move(used));
  }
  return out;
}

double GradReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

GradReport compare_gradients(std::span<const std::string> names, std::span<const Tensor> analytic,
                             std::span<const Tensor> numeric, double denom_floor) {
  if (analytic.size() != numeric.size() || names.size() != analytic.size()) {
    throw std::invalid_argument("compare_gradients: list length mismatch");
  }
  GradReport report;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const Tensor& a = analytic[k];
    const Tensor& n = numeric[k];
    if (a.shape() != n.shape()) throw std::invalid_argument("compare_gradients: shape mismatch for " + names[k]);
    GradEntry e;
    e.name = names[k];
    double sa = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double denom = std::max({std::abs(a[i]), std::abs(n[i]), denom_floor});
      e.max_rel_err = std::max(e.max_rel_err, std::abs(a[i] - n[i]) / denom);
      sa += a[i] * a[i];
      sn += n[i] * n[i];
    }
    e.analytic_norm = std::sqrt(sa);
    e.numeric_norm = std::sqrt(sn);
    report.entries.push_back(std::move(e));
  }
  return report;
}

GradReport compare_gradients(std::span<const std::string> names, std::span<const Tensor> analytic,
                             const NumericGradient& numeric, double h, double denom_floor) {
  if (numeric.steps.size() != numeric.grads.size()) {
    throw std::invalid_argument("compare_gradients: step list does not match gradient list");
  }
  std::vector<Tensor> a(analytic.begin(), analytic.end());
  std::vector<Tensor> n = numeric.grads;
  for (std::size_t k = 0; k < a.size() && k < n.size(); ++k) {
    if (numeric.steps[k].shape() != n[k].shape() || a[k].shape() != n[k].shape()) continue;
    for (std::size_t i = 0; i < n[k].size(); ++i) {
      if (numeric.steps[k][i] == 0.0) a[k][i] = n[k][i] = 0.0;
    }
  }
  GradReport report = compare_gradients(names, a, n, denom_floor);
  for (std::size_t k = 0; k < report.entries.size(); ++k) {
    for (double step : numeric.steps[k].data()) {
      if (step == 0.0) {
        ++report.entries[k].skipped;
      } else if (step < h) {
        ++report.entries[k].reduced_steps;
      }
    }
  }
  return report;
}

}  // namespace whisq::ad
