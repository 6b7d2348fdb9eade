#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace whisq {

enum class AttentionMode { SeqCoattention, VanillaCoattention, CrossAttention, MlpOnly };

std::string_view to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view name);

/// Every hyperparameter of the model, objective, and training loop.
/// Defaults reproduce the published optimized settings.
struct WhisqConfig {
  int d_feat = 512;
  int d_text_in = 1024;
  int d_audio_in = 512;  // audio is not projected; must equal d_feat
  int n_heads = 4;
  AttentionMode attention_mode = AttentionMode::SeqCoattention;

  double huber_delta = 1.0;
  double ot_weight = 4.057e-5;
  double ot_blur = 0.05;
  int ot_p = 2;
  int ot_max_iters = 200;
  double ot_tol = 1e-6;
  double ot_scaling = 0.5;
  double ot_stage_tol = 1e-2;
  int ot_stage_iters = 100;
  double ot_anneal_share = 0.5;

  double lr = 7.307e-4;
  double momentum = 0.7435;
  int batch_size = 128;
  int epochs = 148;
  double clip_norm = 1.0;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  std::uint64_t seed = 0;
  std::string comment;  // free text, e.g. how a run config departs from the defaults

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

nlohmann::json to_json(const WhisqConfig& cfg);

/// Applies the keys of `j` on top of `base`. Unknown keys and wrongly typed
/// values raise ConfigError.
WhisqConfig config_from_json(const nlohmann::json& j, WhisqConfig base = {});

WhisqConfig load_config(const std::filesystem::path& path);

}  // namespace whisq
