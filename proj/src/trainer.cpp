#include "whisq/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "whisq/errors.hpp"
#include "whisq/rng.hpp"

namespace whisq {

namespace fs = std::filesystem;

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  for (const auto& t : params.tensors) s.velocity.emplace_back(t.value.shape());
  return s;
}

double clip_gradients(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) {
    if (!g.all_finite()) throw NumericError("clip_gradients: non-finite gradient");
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.storage()) v *= s;
    }
  }
  return norm;
}

void sgd_step(ModelParams& params, std::span<const Tensor> grads, OptimizerState& state, double lr, double momentum) {
  if (grads.size() != params.tensors.size() || state.velocity.size() != params.tensors.size()) {
    throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    Tensor& p = params.tensors[k].value;
    Tensor& v = state.velocity[k];
    if (grads[k].shape() != p.shape() || v.shape() != p.shape()) {
      throw std::invalid_argument("sgd_step: shape mismatch for '" + params.tensors[k].name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + grads[k][i];
      p[i] -= lr * v[i];
    }
  }
  ++state.step;
}

StepResult loss_and_grad(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg) {
  ad::Tape tape;
  const ParamBinding binding(tape, params, true);
  const ForwardVars fv = forward_graph(binding, batch, cfg);
  const LossVars loss = total_loss(fv.y_omq, fv.y_ta, batch, fv.audio, fv.text, cfg);
  tape.backward(loss.total);
  StepResult r;
  r.loss = loss.values();
  for (const auto& v : binding.vars()) r.grads.push_back(v.grad().empty() ? Tensor(v.value().shape()) : v.grad());
  return r;
}

LossBreakdown batch_loss(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg) {
  ad::Tape tape;
  const ParamBinding binding(tape, params, false);
  const ForwardVars fv = forward_graph(binding, batch, cfg);
  return total_loss(fv.y_omq, fv.y_ta, batch, fv.audio, fv.text, cfg).values();
}

nlohmann::json to_json(const EpochRecord& rec) {
  nlohmann::json j = {{"epoch", rec.epoch},       {"task_loss", rec.task}, {"ot_loss", rec.ot},
                      {"total_loss", rec.total}, {"grad_norm", rec.grad_norm}, {"seconds", rec.seconds}};
  j["validation"] = rec.validation ? metrics::to_json(*rec.validation) : nlohmann::json(nullptr);
  return j;
}

std::vector<metrics::Prediction> predict(std::span<const LoadedClip> clips, const ModelParams& params,
                                         const WhisqConfig& cfg, std::size_t batch_size) {
  std::vector<metrics::Prediction> out;
  for (const auto& batch : make_batches(clips, batch_size, 0, false)) {
    const auto fr = forward(batch, params, cfg);
    for (std::size_t i = 0; i < batch.size; ++i) out.push_back({batch.clip_ids[i], fr.y_omq[i], fr.y_ta[i]});
  }
  return out;
}

TrainResult train(std::span<const LoadedClip> clips, const WhisqConfig& cfg, const fs::path& out_dir,
                  const TrainOptions& options) {
  cfg.validate();
  if (clips.empty()) throw DataError("train: empty training set");
  const bool writing = !out_dir.empty();
  std::ofstream history_file;
  if (writing) {
    fs::create_directories(out_dir);
    history_file.open(out_dir / "history.jsonl", std::ios::trunc);
    if (!history_file) throw DataError("cannot write " + (out_dir / "history.jsonl").string());
  }

  TrainResult result;
  result.checkpoint.config = cfg;
  ModelParams& params = result.checkpoint.params;
  params = init_params(cfg, cfg.seed);
  OptimizerState state = OptimizerState::zeros_like(params);

  std::vector<ClipRecord> validation_records;
  for (const auto& c : options.validation) validation_records.push_back(c.record);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = make_batches(clips, static_cast<std::size_t>(cfg.batch_size),
                                      mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)), true);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      try {
        StepResult step = loss_and_grad(batch, params, cfg);
        rec.grad_norm += clip_gradients(step.grads, cfg.clip_norm);
        ModelParams next = params;
        OptimizerState next_state = state;
        sgd_step(next, step.grads, next_state, cfg.lr, cfg.momentum);
        for (const auto& t : next.tensors) {
          if (!t.value.all_finite()) throw NumericError("parameter '" + t.name + "' became non-finite");
        }
        params = std::move(next);
        state = std::move(next_state);
        const auto w = static_cast<double>(batch.size);
        rec.task += w * step.loss.task;
        rec.ot += w * step.loss.ot;
        rec.total += w * step.loss.total;
        seen += batch.size;
      } catch (const NumericError& e) {
        if (writing) save_checkpoint(out_dir / "checkpoint.wqck", result.checkpoint);
        throw NumericError("epoch " + std::to_string(epoch) + ", batch starting at clip '" + batch.clip_ids.front() +
                           "': " + e.what() + " (last finite parameters kept)");
      }
    }
    const auto n = static_cast<double>(seen);
    rec.task /= n;
    rec.ot /= n;
    rec.total /= n;
    rec.grad_norm /= static_cast<double>(batches.size());
    if (!options.validation.empty()) {
      rec.validation = metrics::evaluate(predict(options.validation, params, cfg), validation_records);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (writing) {
      history_file << to_json(rec).dump() << '\n';
      history_file.flush();
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
        save_checkpoint(out_dir / ("checkpoint_epoch_" + std::to_string(epoch) + ".wqck"), result.checkpoint);
      }
    }
    if (options.on_epoch) options.on_epoch(rec);
    result.history.epochs.push_back(std::move(rec));
  }
  if (writing) save_checkpoint(out_dir / "checkpoint.wqck", result.checkpoint);
  return result;
}

TrainResult train(const fs::path& manifest, const WhisqConfig& cfg, const fs::path& out_dir) {
  const auto records = parse_manifest(manifest);
  const auto clips = load_clips(records);
  return train(std::span<const LoadedClip>(clips), cfg, out_dir);
}

}  // namespace whisq
