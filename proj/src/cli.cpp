#include "whisq/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "whisq/checkpoint.hpp"
#include "whisq/config.hpp"
#include "whisq/data_io.hpp"
#include "whisq/errors.hpp"
#include "whisq/gradcheck.hpp"
#include "whisq/metrics.hpp"
#include "whisq/model.hpp"
#include "whisq/trainer.hpp"

namespace whisq::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << s;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

struct TrainArgs {
  std::string manifest, config, out, mode, validation;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  WhisqConfig cfg = a.config.empty() ? WhisqConfig{} : load_config(a.config);
  if (!a.mode.empty()) cfg.attention_mode = parse_attention_mode(a.mode);
  if (a.lambda) cfg.ot_weight = *a.lambda;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  cfg.validate();

  if (!fs::exists(a.manifest)) throw DataError("manifest not found: " + a.manifest);
  const auto records = parse_manifest(a.manifest);
  const auto clips = load_clips(records);
  std::vector<LoadedClip> val;
  if (!a.validation.empty()) {
    if (!fs::exists(a.validation)) throw DataError("validation manifest not found: " + a.validation);
    val = load_clips(parse_manifest(a.validation));
  }

  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "effective-config.json", to_json(cfg).dump(2) + "\n");
  err << "training " << to_string(cfg.attention_mode) << " on " << clips.size() << " clips for " << cfg.epochs
      << " epochs (" << count_trainable_params(cfg) << " parameters)\n";

  TrainOptions opts;
  opts.validation = val;
  opts.on_epoch = [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << " task " << fmt(r.task) << " ot " << fmt(r.ot) << " total " << fmt(r.total);
    if (r.validation && r.validation->ta.utterance.srcc.value) {
      err << " val_srcc omq " << fmt(r.validation->omq.utterance.srcc.value.value_or(0.0)) << " ta "
          << fmt(*r.validation->ta.utterance.srcc.value);
    }
    err << "\n";
  };
  const auto result = train(std::span<const LoadedClip>(clips), cfg, a.out, opts);
  const auto& last = result.history.epochs.back();
  out << nlohmann::json{{"epochs", result.history.epochs.size()},
                        {"final_task_loss", last.task},
                        {"final_ot_loss", last.ot},
                        {"final_total_loss", last.total},
                        {"checkpoint", (fs::path(a.out) / "checkpoint.wqck").string()}}
             .dump()
      << "\n";
  return kOk;
}

int cmd_eval(const std::string& manifest, const std::string& checkpoint, const std::string& out_path, bool oracle,
             std::ostream& out, std::ostream& err) {
  if (!fs::exists(manifest)) throw DataError("manifest not found: " + manifest);
  const auto records = parse_manifest(manifest);
  std::vector<metrics::Prediction> preds;
  std::string label = "ground truth";
  if (oracle) {
    for (const auto& r : records) preds.push_back({r.clip_id, r.omq_mos, r.ta_mos});
  } else {
    if (checkpoint.empty()) throw ConfigError("eval: --checkpoint is required unless --oracle is given");
    const auto ckpt = load_checkpoint(checkpoint);
    const auto clips = load_clips(records);
    preds = predict(clips, ckpt.params, ckpt.config);
    label = std::string(to_string(ckpt.config.attention_mode));
  }
  const auto report = metrics::evaluate(preds, records);
  for (const auto& e : report.errors()) err << "warning: " << e << "\n";
  if (!out_path.empty()) write_text(out_path, metrics::to_json(report).dump(2) + "\n");
  out << metrics::render_table(report, label);
  return kOk;
}

int cmd_score(const std::string& audio, const std::string& text, const std::string& checkpoint, std::ostream& out) {
  const auto ckpt = load_checkpoint(checkpoint);
  LoadedClip clip;
  clip.record.clip_id = "input";
  clip.record.system_id = "input";
  clip.audio = read_embedding(audio);
  clip.text = read_embedding(text);
  const LoadedClip* ptrs[] = {&clip};
  const auto fr = forward(collate(ptrs), ckpt.params, ckpt.config);
  out << nlohmann::json{{"omq", fr.y_omq[0]}, {"ta", fr.y_ta[0]}}.dump() << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& config, std::optional<std::uint64_t> seed, const std::string& mode,
                  const std::string& corrupt, std::ostream& out) {
  WhisqConfig base = toy_gradcheck_config();
  if (!config.empty()) {
    std::ifstream in(config);
    if (!in) throw ConfigError("cannot open config file " + config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config file " + config + " is not valid JSON: " + e.what());
    }
    base = config_from_json(j, base);
  }
  base.validate();
  const std::uint64_t s = seed.value_or(base.seed);
  std::vector<AttentionMode> modes;
  if (mode.empty()) {
    modes = {AttentionMode::SeqCoattention, AttentionMode::VanillaCoattention, AttentionMode::CrossAttention,
             AttentionMode::MlpOnly};
  } else {
    modes = {parse_attention_mode(mode)};
  }
  GradcheckOptions opts;
  opts.corrupt_op = corrupt;
  bool all = true;
  for (auto m : modes) {
    WhisqConfig cfg = base;
    cfg.attention_mode = m;
    const auto r = run_gradcheck(cfg, s, opts);
    out << "mode " << to_string(m) << ": loss " << std::setprecision(10) << r.loss << ", "
        << (r.passed ? "PASS" : "FAIL") << " (" << std::setprecision(3) << r.seconds << " s)";
    if (r.redraws > 0) out << ", base point redrawn " << r.redraws << "x";
    out << "\n";
    for (std::size_t i = 0; i < r.report.entries.size(); ++i) {
      const auto& e = r.report.entries[i];
      out << "  " << std::left << std::setw(22) << e.name << std::right << " rel_err " << fmt(e.max_rel_err)
          << " (tol " << fmt(r.tolerances[i]) << ")  |analytic| " << fmt(e.analytic_norm) << "  |numeric| "
          << fmt(e.numeric_norm);
      if (e.reduced_steps > 0) out << "  smaller step x" << e.reduced_steps;
      if (e.skipped > 0) out << "  skipped x" << e.skipped;
      out << (e.max_rel_err < r.tolerances[i] ? "" : "  <-- FAIL") << "\n";
    }
    all = all && r.passed;
  }
  return all ? kOk : kGradcheckFailed;
}

int cmd_synth(std::size_t n, std::size_t systems, std::uint64_t seed, std::size_t d_audio, std::size_t d_text,
              const std::string& out_dir, std::ostream& out) {
  if (systems < 1 || n < systems) throw ConfigError("synth: need --n >= --systems >= 1");
  if (d_audio < 2) throw ConfigError("synth: --d-audio must be >= 2");
  if (d_text < d_audio) throw ConfigError("synth: --d-text must be >= --d-audio");
  const auto manifest = generate_synthetic({n, systems, d_audio, d_text, seed}, out_dir);
  out << manifest.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-to-music MOS predictor: training, evaluation, scoring and checks"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  train_cmd->add_option("--manifest", ta.manifest, "Training manifest CSV")->required();
  train_cmd->add_option("--config", ta.config, "JSON config (defaults apply to absent keys)");
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--mode", ta.mode, "Attention mode override");
  train_cmd->add_option("--lambda", ta.lambda, "OT weight override");
  train_cmd->add_option("--seed", ta.seed, "Seed override");
  train_cmd->add_option("--epochs", ta.epochs, "Epoch count override");
  train_cmd->add_option("--validation", ta.validation, "Validation manifest evaluated every epoch");

  std::string ev_manifest, ev_ckpt, ev_out;
  bool ev_oracle = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval_cmd->add_option("--manifest", ev_manifest, "Manifest CSV")->required();
  eval_cmd->add_option("--checkpoint", ev_ckpt, "Checkpoint file");
  eval_cmd->add_option("--out", ev_out, "Report JSON path");
  eval_cmd->add_flag("--oracle", ev_oracle, "Score the ground truth against itself");

  std::string sc_audio, sc_text, sc_ckpt;
  auto* score_cmd = app.add_subcommand("score", "Score one audio/text embedding pair");
  score_cmd->add_option("--audio-emb", sc_audio, "Audio WQEB file")->required();
  score_cmd->add_option("--text-emb", sc_text, "Text WQEB file")->required();
  score_cmd->add_option("--checkpoint", sc_ckpt, "Checkpoint file")->required();

  std::string gc_config, gc_mode, gc_corrupt;
  std::optional<std::uint64_t> gc_seed;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the training loss");
  gc_cmd->add_option("--config", gc_config, "JSON overrides for the toy config");
  gc_cmd->add_option("--seed", gc_seed, "Seed for data and parameters");
  gc_cmd->add_option("--mode", gc_mode, "Check one attention mode (default: all)");
  gc_cmd->add_option("--corrupt-backward", gc_corrupt, "Scale the backward pass of one op (negative control)")
      ->group("");

  std::size_t sy_n = 0, sy_systems = 0, sy_da = 16, sy_dt = 16;
  std::uint64_t sy_seed = 0;
  std::string sy_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset with planted labels");
  synth_cmd->add_option("--n", sy_n, "Number of clips")->required();
  synth_cmd->add_option("--systems", sy_systems, "Number of systems")->required();
  synth_cmd->add_option("--seed", sy_seed, "Seed")->required();
  synth_cmd->add_option("--out", sy_out, "Output directory")->required();
  synth_cmd->add_option("--d-audio", sy_da, "Audio embedding width");
  synth_cmd->add_option("--d-text", sy_dt, "Text embedding width");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out, err);
    if (*eval_cmd) return cmd_eval(ev_manifest, ev_ckpt, ev_out, ev_oracle, out, err);
    if (*score_cmd) return cmd_score(sc_audio, sc_text, sc_ckpt, out);
    if (*gc_cmd) return cmd_gradcheck(gc_config, gc_seed, gc_mode, gc_corrupt, out);
    if (*synth_cmd) return cmd_synth(sy_n, sy_systems, sy_seed, sy_da, sy_dt, sy_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace whisq::cli
