#pragma once

#include <span>
#include <vector>

#include "whisq/autodiff.hpp"
#include "whisq/config.hpp"
#include "whisq/data_io.hpp"
#include "whisq/sinkhorn.hpp"

namespace whisq {

/// Mean Huber loss over a batch.
double huber(std::span<const double> pred, std::span<const double> target, double delta);

ot::SinkhornOptions sinkhorn_options(const WhisqConfig& cfg);

/// Differentiable Sinkhorn divergence between the rows of x and y.
ad::Var sinkhorn_divergence(ad::Var x, ad::Var y, const ot::SinkhornOptions& opts,
                            ot::SinkhornDiagnostics* diag = nullptr);

/// Mean over items of the divergence between each item's valid audio rows and
/// valid (projected) text rows. Items are evaluated in parallel; items found
/// in `cache` are not recomputed.
ad::Var batch_ot_loss(std::span<const ad::Var> audio, std::span<const ad::Var> text, const Batch& batch,
                      const ot::SinkhornOptions& opts, std::vector<ot::SinkhornDiagnostics>* diag = nullptr,
                      ot::SinkhornCache* cache = nullptr);

struct LossBreakdown {
  double task = 0.0;
  double ot = 0.0;
  double total = 0.0;
  double huber_omq = 0.0;
  double huber_ta = 0.0;
};

struct LossVars {
  ad::Var total;
  ad::Var task;
  ad::Var ot;
  ad::Var huber_omq;
  ad::Var huber_ta;

  LossBreakdown values() const;
};

/// total = (huber_omq + huber_ta) / 2 + ot_weight * ot. The OT term is
/// always evaluated so it can be reported when ot_weight is zero.
LossVars total_loss(ad::Var y_omq, ad::Var y_ta, const Batch& batch, std::span<const ad::Var> audio,
                    std::span<const ad::Var> text, const WhisqConfig& cfg,
                    std::vector<ot::SinkhornDiagnostics>* diag = nullptr, ot::SinkhornCache* cache = nullptr);

}  // namespace whisq
