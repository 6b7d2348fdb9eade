#include "whisq/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "whisq/errors.hpp"
#include "whisq/rng.hpp"

namespace whisq {

// ---------------------------------------------------------------------------
// ModelParams

const Tensor& ModelParams::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw std::out_of_range("ModelParams: no tensor named '" + std::string(name) + "'");
}

Tensor& ModelParams::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
}

bool ModelParams::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  for (const auto& t : tensors) out.push_back(t.name);
  return out;
}

std::vector<Tensor> ModelParams::values() const {
  std::vector<Tensor> out;
  for (const auto& t : tensors) out.push_back(t.value);
  return out;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  for (const auto& t : tensors) z.tensors.push_back({t.name, Tensor(t.value.shape())});
  return z;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) return false;
  }
  return true;
}

namespace {

bool uses_attention(AttentionMode m, bool audio_queries) {
  switch (m) {
    case AttentionMode::SeqCoattention: return true;
    case AttentionMode::CrossAttention: return !audio_queries;
    default: return false;
  }
}

void add_affine(std::vector<std::pair<std::string, std::vector<std::size_t>>>& out, const std::string& prefix,
                std::size_t in, std::size_t outdim) {
  out.push_back({prefix + ".weight", {in, outdim}});
  out.push_back({prefix + ".bias", {outdim}});
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(const WhisqConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_feat);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  add_affine(out, "proj", static_cast<std::size_t>(cfg.d_text_in), d);
  for (auto [prefix, audio_q] : {std::pair{"attn_a2t", true}, std::pair{"attn_t2a", false}}) {
    if (!uses_attention(cfg.attention_mode, audio_q)) continue;
    for (const char* m : {"wq", "wk", "wv", "wo"}) add_affine(out, std::string(prefix) + "." + m, d, d);
  }
  for (auto [prefix, in] : {std::pair{"mlp_omq", d}, std::pair{"mlp_ta", 2 * d}}) {
    add_affine(out, std::string(prefix) + ".0", in, kMlpHidden1);
    add_affine(out, std::string(prefix) + ".1", kMlpHidden1, kMlpHidden2);
    add_affine(out, std::string(prefix) + ".2", kMlpHidden2, 1);
  }
  return out;
}

ModelParams init_params(const WhisqConfig& cfg, std::uint64_t seed) {
  ModelParams p;
  Rng rng(mix_seed(seed, 0x5eed));
  for (auto& [name, shape] : param_layout(cfg)) {
    Tensor t(shape);
    if (shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (double& v : t.storage()) v = rng.uniform(-limit, limit);
    }
    p.tensors.push_back({name, std::move(t)});
  }
  return p;
}

std::size_t count_trainable_params(const WhisqConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_feat);
  const auto din = static_cast<std::size_t>(cfg.d_text_in);
  const auto mlp = [](std::size_t in) {
    return in * kMlpHidden1 + kMlpHidden1 + kMlpHidden1 * kMlpHidden2 + kMlpHidden2 + kMlpHidden2 + 1;
  };
  std::size_t n = din * d + d + mlp(d) + mlp(2 * d);
  const std::size_t block = 4 * (d * d + d);
  if (uses_attention(cfg.attention_mode, true)) n += block;
  if (uses_attention(cfg.attention_mode, false)) n += block;
  return n;
}

// ---------------------------------------------------------------------------
// Graph building

ParamBinding::ParamBinding(ad::Tape& tape, const ModelParams& params, bool trainable) {
  for (const auto& t : params.tensors) {
    ad::Var v = trainable ? tape.parameter(t.value) : tape.constant(t.value);
    by_name_.emplace(t.name, v);
    ordered_.push_back(v);
  }
}

ParamBinding::ParamBinding(std::span<const std::string> names, std::span<const ad::Var> vars) {
  if (names.size() != vars.size()) throw std::invalid_argument("ParamBinding: names/vars length mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    by_name_.emplace(names[i], vars[i]);
    ordered_.push_back(vars[i]);
  }
}

ad::Var ParamBinding::operator[](std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("ParamBinding: no parameter '" + std::string(name) + "'");
  return it->second;
}

ad::Var affine(const ParamBinding& p, std::string_view prefix, ad::Var x) {
  const std::string pre(prefix);
  return ad::add_row_bias(ad::matmul(x, p[pre + ".weight"]), p[pre + ".bias"]);
}

ad::Var project_text(const ParamBinding& p, ad::Var raw_text, std::span<const unsigned char> text_mask) {
  return ad::mask_rows(affine(p, "proj", raw_text), text_mask);
}

ad::Var multi_head_attention(const ParamBinding& p, std::string_view prefix, ad::Var queries, ad::Var keys_values,
                             std::span<const unsigned char> key_mask, int n_heads, std::vector<ad::Var>* head_probs) {
  const std::string pre(prefix);
  const ad::Var q = affine(p, pre + ".wq", queries);
  // The key bias adds the same amount to every logit of a query row, which
  // the softmax cancels exactly, so it is left out of the graph.
  const ad::Var k = ad::matmul(keys_values, p[pre + ".wk.weight"]);
  const ad::Var v = affine(p, pre + ".wv", keys_values);
  const std::size_t d = q.value().cols();
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> heads;
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const ad::Var qh = n_heads == 1 ? q : ad::slice_cols(q, off, dh);
    const ad::Var kh = n_heads == 1 ? k : ad::slice_cols(k, off, dh);
    const ad::Var vh = n_heads == 1 ? v : ad::slice_cols(v, off, dh);
    const ad::Var probs = ad::masked_softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale), key_mask);
    if (head_probs) head_probs->push_back(probs);
    heads.push_back(ad::matmul(probs, vh));
  }
  const ad::Var merged = n_heads == 1 ? heads[0] : ad::concat_cols(heads);
  return affine(p, pre + ".wo", merged);
}

std::pair<ad::Var, ad::Var> co_attention(const ParamBinding& p, ad::Var audio, ad::Var text,
                                         std::span<const unsigned char> audio_mask,
                                         std::span<const unsigned char> text_mask, const WhisqConfig& cfg) {
  switch (cfg.attention_mode) {
    case AttentionMode::SeqCoattention: {
      ad::Var a_att = multi_head_attention(p, "attn_a2t", audio, text, text_mask, cfg.n_heads);
      ad::Var t_att = multi_head_attention(p, "attn_t2a", text, audio, audio_mask, cfg.n_heads);
      return {a_att, t_att};
    }
    case AttentionMode::VanillaCoattention: {
      const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_feat));
      const ad::Var affinity = ad::scale(ad::matmul_nt(audio, text), scale);
      ad::Var a_att = ad::matmul(ad::masked_softmax_rows(affinity, text_mask), text);
      ad::Var t_att = ad::matmul(ad::masked_softmax_rows(ad::transpose(affinity), audio_mask), audio);
      return {a_att, t_att};
    }
    case AttentionMode::CrossAttention:
      return {audio, multi_head_attention(p, "attn_t2a", text, audio, audio_mask, cfg.n_heads)};
    case AttentionMode::MlpOnly: break;
  }
  throw std::logic_error("co_attention: mlp_only uses no attention");
}

ad::Var mlp_head(const ParamBinding& p, std::string_view prefix, ad::Var x) {
  const std::string pre(prefix);
  ad::Var h = ad::relu(affine(p, pre + ".0", x));
  h = ad::relu(affine(p, pre + ".1", h));
  return affine(p, pre + ".2", h);
}

void check_batch_dims(const Batch& batch, const WhisqConfig& cfg) {
  if (batch.audio_dim != static_cast<std::size_t>(cfg.d_audio_in)) {
    throw DataError("audio embedding width " + std::to_string(batch.audio_dim) + " does not match model d_audio_in " +
                    std::to_string(cfg.d_audio_in));
  }
  if (batch.text_dim != static_cast<std::size_t>(cfg.d_text_in)) {
    throw DataError("text embedding width " + std::to_string(batch.text_dim) + " does not match model d_text_in " +
                    std::to_string(cfg.d_text_in));
  }
}

ForwardVars forward_graph(const ParamBinding& p, const Batch& batch, const WhisqConfig& cfg) {
  check_batch_dims(batch, cfg);
  ad::Tape& tape = *p.vars().front().tape();
  ForwardVars out;
  std::vector<ad::Var> pooled_audio, pooled_seq;
  for (std::size_t i = 0; i < batch.size; ++i) {
    const auto amask = batch.audio_mask_row(i);
    const auto tmask = batch.text_mask_row(i);
    const ad::Var audio = tape.constant(batch.audio_item(i));
    const ad::Var text = project_text(p, tape.constant(batch.text_item(i)), tmask);
    out.audio.push_back(audio);
    out.text.push_back(text);

    pooled_audio.push_back(ad::mean_pool_masked(audio, amask));
    ad::Var a_seq = audio, t_seq = text;
    if (cfg.attention_mode != AttentionMode::MlpOnly) {
      std::tie(a_seq, t_seq) = co_attention(p, audio, text, amask, tmask, cfg);
    }
    const ad::Var parts[] = {ad::mean_pool_masked(a_seq, amask), ad::mean_pool_masked(t_seq, tmask)};
    pooled_seq.push_back(ad::concat_cols(parts));
  }
  out.y_omq = mlp_head(p, "mlp_omq", ad::concat_rows(pooled_audio));
  out.y_ta = mlp_head(p, "mlp_ta", ad::concat_rows(pooled_seq));
  return out;
}

ForwardResult forward(const Batch& batch, const ModelParams& params, const WhisqConfig& cfg) {
  ad::Tape tape;
  const ParamBinding binding(tape, params, false);
  const ForwardVars fv = forward_graph(binding, batch, cfg);
  ForwardResult r;
  r.y_omq.assign(fv.y_omq.value().data().begin(), fv.y_omq.value().data().end());
  r.y_ta.assign(fv.y_ta.value().data().begin(), fv.y_ta.value().data().end());
  for (const auto& v : fv.audio) r.audio.push_back(v.value());
  for (const auto& v : fv.text) r.text.push_back(v.value());
  return r;
}

}  // namespace whisq
