#include "whisq/config.hpp"

#include <fstream>

#include "whisq/errors.hpp"

namespace whisq {

std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::SeqCoattention: return "seq_coattention";
    case AttentionMode::VanillaCoattention: return "vanilla_coattention";
    case AttentionMode::CrossAttention: return "cross_attention";
    case AttentionMode::MlpOnly: return "mlp_only";
  }
  return "unknown";
}

AttentionMode parse_attention_mode(std::string_view name) {
  for (auto m : {AttentionMode::SeqCoattention, AttentionMode::VanillaCoattention, AttentionMode::CrossAttention,
                 AttentionMode::MlpOnly}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown attention_mode '" + std::string(name) + "'");
}

void WhisqConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (d_feat < 1) fail("d_feat must be >= 1");
  if (d_text_in < 1) fail("d_text_in must be >= 1");
  if (d_audio_in != d_feat) fail("d_audio_in (" + std::to_string(d_audio_in) + ") must equal d_feat (" +
                                 std::to_string(d_feat) + ")");
  if (n_heads < 1 || d_feat % n_heads != 0) fail("d_feat must be divisible by n_heads");
  if (!(huber_delta > 0.0)) fail("huber_delta must be > 0");
  if (!(ot_weight >= 0.0)) fail("ot_weight must be >= 0");
  if (!(ot_blur > 0.0)) fail("ot_blur must be > 0");
  if (ot_p != 2) fail("ot_p must be 2");
  if (ot_max_iters < 1) fail("ot_max_iters must be >= 1");
  if (!(ot_tol > 0.0)) fail("ot_tol must be > 0");
  if (!(ot_scaling > 0.0 && ot_scaling < 1.0)) fail("ot_scaling must be in (0, 1)");
  if (!(ot_stage_tol > 0.0)) fail("ot_stage_tol must be > 0");
  if (ot_stage_iters < 1) fail("ot_stage_iters must be >= 1");
  if (!(ot_anneal_share >= 0.0 && ot_anneal_share <= 1.0)) fail("ot_anneal_share must be in [0, 1]");
  if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

nlohmann::json to_json(const WhisqConfig& c) {
  return {
      {"d_feat", c.d_feat},
      {"d_text_in", c.d_text_in},
      {"d_audio_in", c.d_audio_in},
      {"n_heads", c.n_heads},
      {"attention_mode", std::string(to_string(c.attention_mode))},
      {"huber_delta", c.huber_delta},
      {"ot_weight", c.ot_weight},
      {"ot_blur", c.ot_blur},
      {"ot_p", c.ot_p},
      {"ot_max_iters", c.ot_max_iters},
      {"ot_tol", c.ot_tol},
      {"ot_scaling", c.ot_scaling},
      {"ot_stage_tol", c.ot_stage_tol},
      {"ot_stage_iters", c.ot_stage_iters},
      {"ot_anneal_share", c.ot_anneal_share},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"clip_norm", c.clip_norm},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
      {"comment", c.comment},
  };
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const std::string& key, T& out) {
  const auto& v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
        throw ConfigError("config key '" + key + "' must be non-negative");
      }
    }
  }
  out = v.get<T>();
}

}  // namespace

WhisqConfig config_from_json(const nlohmann::json& j, WhisqConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "d_feat") read_field(j, key, c.d_feat);
    else if (key == "d_text_in") read_field(j, key, c.d_text_in);
    else if (key == "d_audio_in") read_field(j, key, c.d_audio_in);
    else if (key == "n_heads") read_field(j, key, c.n_heads);
    else if (key == "attention_mode") {
      if (!value.is_string()) throw ConfigError("config key 'attention_mode' must be a string");
      c.attention_mode = parse_attention_mode(value.get<std::string>());
    }
    else if (key == "huber_delta") read_field(j, key, c.huber_delta);
    else if (key == "ot_weight") read_field(j, key, c.ot_weight);
    else if (key == "ot_blur") read_field(j, key, c.ot_blur);
    else if (key == "ot_p") read_field(j, key, c.ot_p);
    else if (key == "ot_max_iters") read_field(j, key, c.ot_max_iters);
    else if (key == "ot_tol") read_field(j, key, c.ot_tol);
    else if (key == "ot_scaling") read_field(j, key, c.ot_scaling);
    else if (key == "ot_stage_tol") read_field(j, key, c.ot_stage_tol);
    else if (key == "ot_stage_iters") read_field(j, key, c.ot_stage_iters);
    else if (key == "ot_anneal_share") read_field(j, key, c.ot_anneal_share);
    else if (key == "lr") read_field(j, key, c.lr);
    else if (key == "momentum") read_field(j, key, c.momentum);
    else if (key == "batch_size") read_field(j, key, c.batch_size);
    else if (key == "epochs") read_field(j, key, c.epochs);
    else if (key == "clip_norm") read_field(j, key, c.clip_norm);
    else if (key == "checkpoint_every") read_field(j, key, c.checkpoint_every);
    else if (key == "seed") read_field(j, key, c.seed);
    else if (key == "comment") {
      if (!value.is_string()) throw ConfigError("config key 'comment' must be a string");
      c.comment = value.get<std::string>();
    }
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (j.contains("d_feat") && !j.contains("d_audio_in")) c.d_audio_in = c.d_feat;
  return c;
}

WhisqConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  WhisqConfig c = config_from_json(j);
  c.validate();
  return c;
}

}  // namespace whisq
