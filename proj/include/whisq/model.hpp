#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "whisq/autodiff.hpp"
#include "whisq/config.hpp"
#include "whisq/data_io.hpp"
#include "whisq/tensor.hpp"

namespace whisq {

inline constexpr std::size_t kMlpHidden1 = 256;
inline constexpr std::size_t kMlpHidden2 = 64;

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Trainable weights in a fixed order:
///   proj.{weight,bias}                 text projection, d_text_in -> d_feat
///   attn_a2t.{wq,wk,wv,wo}.{weight,bias}  audio queries over text
///   attn_t2a.{wq,wk,wv,wo}.{weight,bias}  text queries over audio
///   mlp_omq.{0,1,2}.{weight,bias}     d_feat -> 256 -> 64 -> 1
///   mlp_ta.{0,1,2}.{weight,bias}      2 d_feat -> 256 -> 64 -> 1
/// Attention blocks are present only for the modes that use them.
/// Weights are stored (fan_in x fan_out) and applied as x W + b.
class ModelParams {
 public:
  std::vector<NamedTensor> tensors;

  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;
  std::vector<Tensor> values() const;
  /// Same names and shapes, all zeros.
  ModelParams zeros_like() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

/// Names and shapes of every tensor for the configured mode.
std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(const WhisqConfig& cfg);

/// Glorot-uniform weights, zero biases, fully determined by `seed`.
ModelParams init_params(const WhisqConfig& cfg, std::uint64_t seed);

/// Closed-form scalar count of ModelParams for the configured mode.
std::size_t count_trainable_params(const WhisqConfig& cfg);

/// Binds parameter tensors to tape variables.
class ParamBinding {
 public:
  /// trainable=false records the tensors as constants (inference).
  ParamBinding(ad::Tape& tape, const ModelParams& params, bool trainable);
  /// Binds existing vars, ordered like `names`.
  ParamBinding(std::span<const std::string> names, std::span<const ad::Var> vars);

  ad::Var operator[](std::string_view name) const;
  const std::vector<ad::Var>& vars() const { return ordered_; }

 private:
  std::map<std::string, ad::Var, std::less<>> by_name_;
  std::vector<ad::Var> ordered_;
};

/// x W + b for the named affine layer (prefix.weight / prefix.bias).
ad::Var affine(const ParamBinding& p, std::string_view prefix, ad::Var x);

/// Text projection of one item (T_t x d_text_in); padded rows are re-zeroed.
ad::Var project_text(const ParamBinding& p, ad::Var raw_text, std::span<const unsigned char> text_mask);

/// Multi-head scaled dot-product attention of one item with learned
/// projections under `prefix`. Keys with key_mask == 0 are excluded.
/// Optionally returns the per-head probability matrices.
ad::Var multi_head_attention(const ParamBinding& p, std::string_view prefix, ad::Var queries, ad::Var keys_values,
                             std::span<const unsigned char> key_mask, int n_heads,
                             std::vector<ad::Var>* head_probs = nullptr);

/// Attended (audio, text) sequences for one item under the configured mode.
/// Not defined for mlp_only.
std::pair<ad::Var, ad::Var> co_attention(const ParamBinding& p, ad::Var audio, ad::Var text,
                                         std::span<const unsigned char> audio_mask,
                                         std::span<const unsigned char> text_mask, const WhisqConfig& cfg);

/// Three-layer ReLU MLP under `prefix` (linear output).
ad::Var mlp_head(const ParamBinding& p, std::string_view prefix, ad::Var x);

struct ForwardVars {
  ad::Var y_omq;                 // B x 1
  ad::Var y_ta;                  // B x 1
  std::vector<ad::Var> audio;    // per item, T_a_max x d_feat (encoder level)
  std::vector<ad::Var> text;     // per item, T_t_max x d_feat (after projection)
};

ForwardVars forward_graph(const ParamBinding& p, const Batch& batch, const WhisqConfig& cfg);

struct ForwardResult {
  std::vector<double> y_omq;
  std::vector<double> y_ta;
  std::vector<Tensor> audio;
  std::vector<Tensor> text;
};

ForwardResult forward(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg);

/// Checks batch widths against the config; throws DataError on mismatch.
void check_batch_dims(const Batch& batch, const WhisqConfig& cfg);

}  // namespace whisq
