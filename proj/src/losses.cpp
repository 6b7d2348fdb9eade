#include "whisq/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace whisq {

double huber(std::span<const double> pred, std::span<const double> target, double delta) {
  if (pred.empty()) throw std::invalid_argument("huber: empty batch");
  if (pred.size() != target.size()) throw std::invalid_argument("huber: length mismatch");
  if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    const double a = std::abs(r);
    s += a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
  }
  return s / static_cast<double>(pred.size());
}

ot::SinkhornOptions sinkhorn_options(const WhisqConfig& cfg) {
  return {cfg.ot_blur,      cfg.ot_p,           cfg.ot_max_iters,   cfg.ot_tol,
          cfg.ot_scaling,   cfg.ot_stage_tol,   cfg.ot_stage_iters, cfg.ot_anneal_share};
}

ad::Var sinkhorn_divergence(ad::Var x, ad::Var y, const ot::SinkhornOptions& opts, ot::SinkhornDiagnostics* diag) {
  auto r = ot::sinkhorn_divergence(x.value(), y.value(), opts, x.requires_grad(), y.requires_grad());
  if (diag) *diag = r.diagnostics;
  const ad::Var parents[] = {x, y};
  Tensor gx = std::move(r.grad_x), gy = std::move(r.grad_y);
  return x.tape()->push("sinkhorn", Tensor::scalar(r.value), parents, [x, y, gx, gy](ad::Tape& t, const Tensor& g) {
    const double s = g.item();
    if (!gx.empty()) {
      Tensor a = gx;
      for (double& v : a.storage()) v *= s;
      t.accumulate(x, a);
    }
    if (!gy.empty()) {
      Tensor b = gy;
      for (double& v : b.storage()) v *= s;
      t.accumulate(y, b);
    }
  });
}

namespace {

std::vector<std::size_t> valid_rows(std::span<const unsigned char> mask) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(i);
  }
  return rows;
}

}  // namespace

ad::Var batch_ot_loss(std::span<const ad::Var> audio, std::span<const ad::Var> text, const Batch& batch,
                      const ot::SinkhornOptions& opts, std::vector<ot::SinkhornDiagnostics>* diag,
                      ot::SinkhornCache* cache) {
  if (audio.size() != batch.size || text.size() != batch.size) {
    throw std::invalid_argument("batch_ot_loss: sequence count does not match batch size");
  }
  if (batch.size == 0) throw std::invalid_argument("batch_ot_loss: empty batch");
  ad::Tape& tape = *audio[0].tape();
  std::vector<ad::Var> xs, ys;
  for (std::size_t i = 0; i < batch.size; ++i) {
    const auto ra = valid_rows(batch.audio_mask_row(i));
    const auto rt = valid_rows(batch.text_mask_row(i));
    xs.push_back(ra.size() == audio[i].value().rows() ? audio[i] : ad::select_rows(audio[i], ra));
    ys.push_back(rt.size() == text[i].value().rows() ? text[i] : ad::select_rows(text[i], rt));
  }
  std::vector<ot::OtItem> items;
  bool gx = false, gy = false;
  for (std::size_t i = 0; i < batch.size; ++i) {
    items.push_back({&xs[i].value(), &ys[i].value()});
    gx = gx || xs[i].requires_grad();
    gy = gy || ys[i].requires_grad();
  }
  std::vector<ot::SinkhornResult> results(batch.size);
  std::vector<ot::OtItem> todo;
  std::vector<std::size_t> todo_index;
  for (std::size_t i = 0; i < batch.size; ++i) {
    const ot::SinkhornResult* hit = cache ? cache->find(*items[i].x, *items[i].y, gx, gy) : nullptr;
    if (hit) {
      results[i] = *hit;
    } else {
      todo.push_back(items[i]);
      todo_index.push_back(i);
    }
  }
  auto computed = ot::parallel::sinkhorn_batch(todo, opts, gx, gy);
  for (std::size_t k = 0; k < todo.size(); ++k) {
    if (cache) cache->insert(*todo[k].x, *todo[k].y, gx, gy, computed[k]);
    results[todo_index[k]] = std::move(computed[k]);
  }
  double s = 0.0;
  for (const auto& r : results) s += r.value;
  const double inv = 1.0 / static_cast<double>(batch.size);
  if (diag) {
    diag->clear();
    for (const auto& r : results) diag->push_back(r.diagnostics);
  }
  std::vector<ad::Var> parents = xs;
  parents.insert(parents.end(), ys.begin(), ys.end());
  std::vector<Tensor> grad_x, grad_y;
  for (auto& r : results) {
    grad_x.push_back(std::move(r.grad_x));
    grad_y.push_back(std::move(r.grad_y));
  }
  return tape.push("batch_ot_loss", Tensor::scalar(s * inv), parents,
                   [xs, ys, grad_x, grad_y, inv](ad::Tape& t, const Tensor& g) {
                     const double w = g.item() * inv;
                     for (std::size_t i = 0; i < xs.size(); ++i) {
                       for (auto [var, grad] : {std::pair{xs[i], &grad_x[i]}, std::pair{ys[i], &grad_y[i]}}) {
                         if (grad->empty() || !var.requires_grad()) continue;
                         Tensor scaled = *grad;
                         for (double& v : scaled.storage()) v *= w;
                         t.accumulate(var, scaled);
                       }
                     }
                   });
}

LossBreakdown LossVars::values() const {
  return {task.value().item(), ot.value().item(), total.value().item(), huber_omq.value().item(),
          huber_ta.value().item()};
}

LossVars total_loss(ad::Var y_omq, ad::Var y_ta, const Batch& batch, std::span<const ad::Var> audio,
                    std::span<const ad::Var> text, const WhisqConfig& cfg,
                    std::vector<ot::SinkhornDiagnostics>* diag, ot::SinkhornCache* cache) {
  LossVars l;
  l.huber_omq = ad::huber(y_omq, Tensor::vector(batch.omq_targets), cfg.huber_delta);
  l.huber_ta = ad::huber(y_ta, Tensor::vector(batch.ta_targets), cfg.huber_delta);
  l.task = ad::scale(ad::add(l.huber_omq, l.huber_ta), 0.5);
  l.ot = batch_ot_loss(audio, text, batch, sinkhorn_options(cfg), diag, cache);
  l.total = ad::add(l.task, ad::scale(l.ot, cfg.ot_weight));
  return l;
}

}  // namespace whisq
