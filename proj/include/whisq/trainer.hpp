#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "whisq/checkpoint.hpp"
#include "whisq/data_io.hpp"
#include "whisq/losses.hpp"
#include "whisq/metrics.hpp"
#include "whisq/model.hpp"

namespace whisq {

/// Heavy-ball momentum buffers, one per parameter tensor.
struct OptimizerState {
  std::vector<Tensor> velocity;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const ModelParams& params);
};

/// Rescales all gradients by max_norm / global_norm when the global L2 norm
/// exceeds max_norm. Returns the norm before clipping.
double clip_gradients(std::span<Tensor> grads, double max_norm);

/// v <- momentum * v + g; p <- p - lr * v.
void sgd_step(ModelParams& params, std::span<const Tensor> grads, OptimizerState& state, double lr, double momentum);

struct StepResult {
  LossBreakdown loss;
  std::vector<Tensor> grads;
};

/// Loss and exact gradients for one batch.
StepResult loss_and_grad(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg);
/// Loss only.
LossBreakdown batch_loss(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double task = 0.0;
  double ot = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // mean pre-clip global norm over the epoch's steps
  std::optional<metrics::EvalReport> validation;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& rec);

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainOptions {
  /// Evaluated after every epoch when non-empty.
  std::span<const LoadedClip> validation;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

/// Deterministic training from (clips, cfg). When out_dir is non-empty,
/// writes history.jsonl, checkpoint.wqck and, if cfg.checkpoint_every > 0,
/// checkpoint_epoch_<k>.wqck. A non-finite loss or update throws
/// NumericError after saving the last finite parameters as checkpoint.wqck.
TrainResult train(std::span<const LoadedClip> clips, const WhisqConfig& cfg, const std::filesystem::path& out_dir,
                  const TrainOptions& options = {});

TrainResult train(const std::filesystem::path& manifest, const WhisqConfig& cfg, const std::filesystem::path& out_dir);

/// Batched inference over clips.
std::vector<metrics::Prediction> predict(std::span<const LoadedClip> clips, const ModelParams& params,
                                         const WhisqConfig& cfg, std::size_t batch_size = 64);

}  // namespace whisq
