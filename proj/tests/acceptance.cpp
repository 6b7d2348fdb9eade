#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "support.hpp"
#include "whisq/checkpoint.hpp"
#include "whisq/cli.hpp"
#include "whisq/data_io.hpp"
#include "whisq/losses.hpp"
#include "whisq/metrics.hpp"
#include "whisq/model.hpp"
#include "whisq/sinkhorn.hpp"
#include "whisq/trainer.hpp"

using namespace whisq;
namespace fs = std::filesystem;
using testing::TempDir;

namespace {

const fs::path kConfigs = fs::path(WHISQ_SOURCE_DIR) / "configs";

const AttentionMode kModes[] = {AttentionMode::SeqCoattention, AttentionMode::VanillaCoattention,
                                AttentionMode::CrossAttention, AttentionMode::MlpOnly};

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string num(double v, const char* f = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult whisq_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "whisq");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<LoadedClip> synthetic(const TempDir& dir, std::size_t n, std::size_t systems, std::size_t width,
                                  std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_clips = n;
  spec.n_systems = systems;
  spec.d_audio = spec.d_text = width;
  spec.seed = seed;
  return load_clips(parse_manifest(generate_synthetic(spec, dir.path())));
}

std::vector<ClipRecord> records_of(std::span<const LoadedClip> clips) {
  std::vector<ClipRecord> r;
  for (const auto& c : clips) r.push_back(c.record);
  return r;
}

metrics::EvalReport evaluate_on(std::span<const LoadedClip> clips, const Checkpoint& ck) {
  const auto preds = predict(clips, ck.params, ck.config);
  const auto recs = records_of(clips);
  return metrics::evaluate(preds, recs);
}

double value(const metrics::MetricValue& v) { return v.value.value_or(std::nan("")); }

// Same batch with `extra_a` / `extra_t` masked rows appended to every item.
Batch with_padding(const Batch& b, std::size_t extra_a, std::size_t extra_t, Rng& rng) {
  Batch p = b;
  p.audio_len = b.audio_len + extra_a;
  p.text_len = b.text_len + extra_t;
  p.audio = Tensor({b.size, p.audio_len, b.audio_dim});
  p.text = Tensor({b.size, p.text_len, b.text_dim});
  p.audio_mask.assign(b.size * p.audio_len, 0);
  p.text_mask.assign(b.size * p.text_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = 0; t < p.audio_len; ++t) {
      const bool old = t < b.audio_len;
      p.audio_mask[i * p.audio_len + t] = old ? b.audio_mask[i * b.audio_len + t] : 0;
      for (std::size_t d = 0; d < b.audio_dim; ++d) {
        p.audio[(i * p.audio_len + t) * b.audio_dim + d] =
            old ? b.audio[(i * b.audio_len + t) * b.audio_dim + d] : 10.0 * rng.normal();
      }
    }
    for (std::size_t t = 0; t < p.text_len; ++t) {
      const bool old = t < b.text_len;
      p.text_mask[i * p.text_len + t] = old ? b.text_mask[i * b.text_len + t] : 0;
      for (std::size_t d = 0; d < b.text_dim; ++d) {
        p.text[(i * p.text_len + t) * b.text_dim + d] =
            old ? b.text[(i * b.text_len + t) * b.text_dim + d] : 10.0 * rng.normal();
      }
    }
  }
  return p;
}

double ot_loss(const Batch& b, const ModelParams& params, const WhisqConfig& cfg) {
  ad::Tape t;
  const ParamBinding binding(t, params, false);
  const auto f = forward_graph(binding, b, cfg);
  return batch_ot_loss(f.audio, f.text, b, sinkhorn_options(cfg)).value().item();
}

// Checkpoints used by the invariance criteria: the trained runs plus a
// freshly initialized one per mode at the overfit widths.
std::vector<Checkpoint> g_checkpoints;

Verdict gradient_correctness() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = whisq_cli({"gradcheck", "--config", (kConfigs / "gradcheck_toy.json").string()});
  const double secs = seconds_since(t0);
  std::size_t passes = 0;
  for (std::size_t at = r.out.find("PASS"); at != std::string::npos; at = r.out.find("PASS", at + 1)) ++passes;
  v.require(r.code == cli::kOk, "exit code " + std::to_string(r.code));
  v.require(passes == 4, "PASS for 4 modes (got " + std::to_string(passes) + ")");
  v.require(r.out.find("skipped") == std::string::npos, "no skipped coordinates");
  v.require(secs < 30.0, "runtime < 30 s");
  double worst_task = 0.0, worst_ot = 0.0;
  std::istringstream lines(r.out);
  for (std::string line; std::getline(lines, line);) {
    const auto at = line.find("rel_err ");
    const auto tol = line.find("(tol ");
    if (at == std::string::npos || tol == std::string::npos) continue;
    const double e = std::stod(line.substr(at + 8));
    const double t = std::stod(line.substr(tol + 5));
    double& worst = t < 5e-4 ? worst_task : worst_ot;
    worst = std::max(worst, e);
  }
  v.note("4 modes, worst rel-err " + num(worst_task) + " (task path, tol 1e-4), " + num(worst_ot) +
         " (OT path, tol 1e-3), " + num(secs, "%.1f") + " s");
  return v;
}

Verdict sinkhorn_oracle() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  ot::SinkhornOptions o;
  o.blur = 0.002;
  o.max_iters = 1000;
  double worst = 0.0, worst_self = 0.0, worst_sym = 0.0;
  int failures = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(mix_seed(77, s));
    const auto d = static_cast<std::size_t>(1 + s % 2);
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 4));
    Tensor x({n, d}), y({m, d});
    for (double& e : x.storage()) e = rng.uniform();
    for (double& e : y.storage()) e = rng.uniform();
    const double exact = testing::exact_ot(x, y);
    const double sxy = ot::sinkhorn_divergence(x, y, o).value;
    const double syx = ot::sinkhorn_divergence(y, x, o).value;
    const double tol = std::max(0.05 * exact, 1e-3);
    const double err = std::abs(sxy - exact);
    if (err > tol) ++failures;
    worst = std::max(worst, err / tol);
    worst_sym = std::max(worst_sym, std::abs(sxy - syx));
    worst_self = std::max({worst_self, std::abs(ot::sinkhorn_divergence(x, x, o).value),
                           std::abs(ot::sinkhorn_divergence(y, y, o).value)});
  }
  const double secs = seconds_since(t0);
  v.require(failures == 0, std::to_string(failures) + "/20 instances outside tolerance");
  v.require(worst_self < 1e-6, "S(X,X) < 1e-6");
  v.require(worst_sym < 1e-10, "symmetry < 1e-10");
  v.require(secs < 10.0, "runtime < 10 s");
  v.note("20 instances, worst |S-OT|/tol " + num(worst) + ", max |S(X,X)| " + num(worst_self) + ", max asymmetry " +
         num(worst_sym) + ", " + num(secs, "%.2f") + " s");
  return v;
}

Verdict metric_oracles() {
  Verdict v;
  using Vec = std::vector<double>;
  Rng rng(303);
  double worst = 0.0;
  int compared = 0;
  while (compared < 100) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 8));
    const bool ties = compared % 2 == 0;
    Vec a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = ties ? static_cast<double>(rng.uniform_int(1, 4)) : rng.uniform(1, 5);
      b[i] = ties ? static_cast<double>(rng.uniform_int(1, 4)) : rng.uniform(1, 5);
    }
    const auto flat = [](const Vec& x) { return std::all_of(x.begin(), x.end(), [&](double e) { return e == x[0]; }); };
    if (flat(a) || flat(b)) continue;
    worst = std::max({worst, std::abs(metrics::mse(a, b) - oracle::mse(a, b)),
                      std::abs(metrics::lcc(a, b) - oracle::pearson(a, b)),
                      std::abs(metrics::srcc(a, b) - oracle::spearman(a, b)),
                      std::abs(metrics::ktau(a, b) - oracle::kendall_b(a, b))});
    ++compared;
  }
  v.require(worst <= 1e-12, "random vectors within 1e-12");

  double worst_perm = 0.0;
  int perms = 0;
  for (std::size_t n = 2; n <= 6; ++n) {
    Vec base(n);
    std::iota(base.begin(), base.end(), 1.0);
    Vec p = base;
    do {
      worst_perm = std::max(worst_perm, std::abs(metrics::ktau(p, base) - oracle::kendall_b(p, base)));
      ++perms;
    } while (std::next_permutation(p.begin(), p.end()));
  }
  v.require(worst_perm <= 1e-12, "permutation sweep within 1e-12");

  v.require(metrics::mse(Vec{1, 2, 3}, Vec{2, 4, 7}) == 7.0, "mse([1,2,3],[2,4,7]) == 7");
  v.require(metrics::ktau(Vec{1, 1, 2}, Vec{1, 2, 3}) == 2.0 / std::sqrt(6.0), "tau-b([1,1,2],[1,2,3]) == 2/sqrt(6)");
  v.require(metrics::srcc(Vec{3, 2, 1}, Vec{1, 2, 3}) == -1.0, "srcc reversed == -1");
  v.require(metrics::average_ranks(Vec{1, 2, 2, 3}) == Vec{1, 2.5, 2.5, 4}, "average ranks with ties");
  v.note("100 vectors (n <= 8, half tied) worst diff " + num(worst) + "; " + std::to_string(perms) +
         " permutations worst diff " + num(worst_perm) + "; worked examples exact");
  return v;
}

Verdict overfit() {
  Verdict v;
  TempDir data("acc-overfit");
  const auto clips = synthetic(data, 32, 4, 16, 7);
  const auto cfg = load_config(kConfigs / "overfit_toy.json");
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(clips, cfg, {});
  const double secs = seconds_since(t0);
  const auto rep = evaluate_on(clips, result.checkpoint);
  const double first = result.history.epochs.front().task, last = result.history.epochs.back().task;
  const double so = value(rep.omq.utterance.srcc), st = value(rep.ta.utterance.srcc);
  v.require(last < 0.01, "final task loss < 0.01");
  v.require(so > 0.95 && st > 0.95, "held-in SRCC > 0.95");
  v.require(cfg.epochs <= 500, "within 500 epochs");
  v.require(secs < 300.0, "runtime < 5 min");
  v.require(last * 10.0 <= first, "task loss falls >= 10x");
  v.note(std::to_string(cfg.epochs) + " epochs, task loss " + num(first) + " -> " + num(last) + ", SRCC OMQ " +
         num(so) + " TA " + num(st) + ", " + num(secs, "%.1f") + " s");
  g_checkpoints.push_back(result.checkpoint);
  return v;
}

Verdict generalization() {
  Verdict v;
  TempDir data("acc-general");
  const auto all = synthetic(data, 160, 8, 16, 11);
  const std::span<const LoadedClip> train_set = std::span<const LoadedClip>(all).first(128);
  const std::span<const LoadedClip> val_set = std::span<const LoadedClip>(all).subspan(128);
  WhisqConfig cfg = load_config(kConfigs / "generalization_toy.json");
  const auto with_ot = train(train_set, cfg, {});
  WhisqConfig ablation = cfg;
  ablation.ot_weight = 0.0;
  const auto without_ot = train(train_set, ablation, {});
  const auto a = evaluate_on(val_set, with_ot.checkpoint);
  const auto b = evaluate_on(val_set, without_ot.checkpoint);
  const double omq = value(a.omq.utterance.srcc), ta = value(a.ta.utterance.srcc);
  const double ta0 = value(b.ta.utterance.srcc);
  v.require(omq > 0.9, "validation OMQ SRCC > 0.9");
  v.require(ta > 0.8, "validation TA SRCC > 0.8");
  v.require(ta0 <= ta, "lambda = 0 TA SRCC <= lambda > 0 TA SRCC");
  v.note("validation SRCC OMQ " + num(omq) + " TA " + num(ta) + "; lambda=0 TA " + num(ta0) + " (OMQ " +
         num(value(b.omq.utterance.srcc)) + ")");
  g_checkpoints.push_back(with_ot.checkpoint);
  g_checkpoints.push_back(without_ot.checkpoint);
  return v;
}

Verdict determinism() {
  Verdict v;
  TempDir work("acc-determinism");
  const auto manifest = (work / "data" / "manifest.csv").string();
  v.require(whisq_cli({"synth", "--n", "24", "--systems", "3", "--seed", "5", "--out", (work / "data").string(),
                       "--d-audio", "16", "--d-text", "16"})
                    .code == cli::kOk,
            "synth");
  const std::vector<std::string> flags = {"--manifest", manifest, "--config", (kConfigs / "overfit_toy.json").string(),
                                          "--epochs", "5", "--seed", "3"};
  auto train_into = [&](const std::string& name) {
    std::vector<std::string> args = {"train"};
    args.insert(args.end(), flags.begin(), flags.end());
    args.insert(args.end(), {"--out", (work / name).string()});
    return whisq_cli(args).code;
  };
  v.require(train_into("run1") == cli::kOk && train_into("run2") == cli::kOk, "both training runs exit 0");
  const auto c1 = testing::read_bytes(work / "run1" / "checkpoint.wqck");
  const auto c2 = testing::read_bytes(work / "run2" / "checkpoint.wqck");
  v.require(!c1.empty() && c1 == c2, "bit-identical checkpoints");

  const auto recs = parse_manifest(manifest);
  std::vector<std::string> outputs;
  for (int k = 0; k < 3; ++k) {
    outputs.push_back(whisq_cli({"score", "--audio-emb", recs[2].audio_emb_path.string(), "--text-emb",
                                 recs[2].text_emb_path.string(), "--checkpoint",
                                 (work / (k == 2 ? "run2" : "run1") / "checkpoint.wqck").string()})
                          .out);
  }
  v.require(!outputs[0].empty() && outputs[0] == outputs[1] && outputs[1] == outputs[2], "score is bit-stable");
  v.note("2 train runs, " + std::to_string(c1.size()) + "-byte checkpoints identical; score output " +
         outputs[0].substr(0, outputs[0].find('\n')) + " repeated 3x");
  return v;
}

std::vector<Checkpoint> invariance_checkpoints() {
  std::vector<Checkpoint> cks = g_checkpoints;
  for (auto mode : kModes) {
    Checkpoint c;
    c.config = load_config(kConfigs / "overfit_toy.json");
    c.config.attention_mode = mode;
    c.params = init_params(c.config, 99);
    cks.push_back(std::move(c));
  }
  return cks;
}

Verdict audio_only_omq() {
  Verdict v;
  TempDir data("acc-omq");
  const auto clips = synthetic(data, 12, 3, 16, 21);
  Rng rng(17);
  int comparisons = 0, changed_ta = 0, changed_omq = 0;
  const auto cks = invariance_checkpoints();
  for (const auto& ck : cks) {
    for (const auto& clip : clips) {
      for (int k = 0; k < 3; ++k) {
        LoadedClip other = clip;
        const auto rows = static_cast<std::size_t>(rng.uniform_int(1, 15));
        other.text = testing::random_tensor(rng, {rows, clip.text.cols()}, 2.0);
        const LoadedClip* a[] = {&clip};
        const LoadedClip* b[] = {&other};
        const auto ra = forward(collate(a), ck.params, ck.config);
        const auto rb = forward(collate(b), ck.params, ck.config);
        if (ra.y_omq[0] != rb.y_omq[0]) ++changed_omq;
        if (ra.y_ta[0] != rb.y_ta[0]) ++changed_ta;
        ++comparisons;
      }
    }
  }
  v.require(changed_omq == 0, std::to_string(changed_omq) + " y_omq values changed under text replacement");
  v.require(changed_ta > 0, "text replacement reaches y_ta");
  v.note(std::to_string(cks.size()) + " checkpoints (trained and all 4 modes), " + std::to_string(comparisons) +
         " text replacements, y_omq identical in all; y_ta changed in " + std::to_string(changed_ta));
  return v;
}

Verdict padding_invariance() {
  Verdict v;
  TempDir data("acc-pad");
  const auto clips = synthetic(data, 12, 3, 16, 23);
  Rng rng(19);
  int comparisons = 0;
  double max_diff = 0.0;
  const auto cks = invariance_checkpoints();
  for (const auto& ck : cks) {
    for (const auto& batch : make_batches(std::span<const LoadedClip>(clips), 4, 0, false)) {
      for (int k = 0; k < 2; ++k) {
        const Batch padded = with_padding(batch, static_cast<std::size_t>(rng.uniform_int(1, 20)),
                                          static_cast<std::size_t>(rng.uniform_int(k, 10)), rng);
        const auto a = forward(batch, ck.params, ck.config);
        const auto b = forward(padded, ck.params, ck.config);
        for (std::size_t i = 0; i < batch.size; ++i) {
          max_diff = std::max({max_diff, std::abs(a.y_omq[i] - b.y_omq[i]), std::abs(a.y_ta[i] - b.y_ta[i])});
        }
        max_diff = std::max(max_diff, std::abs(ot_loss(batch, ck.params, ck.config) - ot_loss(padded, ck.params, ck.config)));
        ++comparisons;
      }
    }
  }
  v.require(max_diff == 0.0, "exact equality");
  v.note(std::to_string(cks.size()) + " checkpoints, " + std::to_string(comparisons) +
         " padded batches with random masked rows, max change in y_omq / y_ta / OT loss " + num(max_diff));
  return v;
}

Verdict parameter_accounting() {
  Verdict v;
  int checked = 0;
  auto check = [&](const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    const auto back = decode_checkpoint(bytes);
    v.require(back.params.scalar_count() == count_trainable_params(back.config),
              "serialized count for " + std::string(to_string(back.config.attention_mode)));
    ++checked;
  };
  for (const auto& ck : invariance_checkpoints()) check(ck);
  for (auto mode : kModes) {
    Checkpoint c;
    c.config.attention_mode = mode;
    c.params = init_params(c.config, 0);
    check(c);
  }
  WhisqConfig c;
  const std::size_t proj = 1024 * 512 + 512, omq = 512 * 256 + 256 + 256 * 64 + 64 + 64 + 1;
  const std::size_t ta = 1024 * 256 + 256 + 256 * 64 + 64 + 64 + 1, block = 4 * (512 * 512 + 512);
  c.attention_mode = AttentionMode::MlpOnly;
  const auto mlp = count_trainable_params(c);
  c.attention_mode = AttentionMode::SeqCoattention;
  const auto seq = count_trainable_params(c);
  v.require(mlp == proj + omq + ta, "mlp_only closed form");
  v.require(seq == proj + omq + ta + 2 * block, "seq_coattention closed form");
  v.note(std::to_string(checked) + " checkpoints match; published widths: mlp_only " + std::to_string(mlp) + " = " +
         std::to_string(proj) + " + " + std::to_string(omq) + " + " + std::to_string(ta) + ", seq_coattention " +
         std::to_string(seq) + " = mlp_only + 2 x " + std::to_string(block));
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"1 gradient correctness", gradient_correctness},
      {"2 Sinkhorn vs exact OT", sinkhorn_oracle},
      {"3 metric oracles", metric_oracles},
      {"4 overfit contract", overfit},
      {"5 generalization and OT ablation", generalization},
      {"6 determinism", determinism},
      {"7 audio-only OMQ invariance", audio_only_omq},
      {"8 padding invariance", padding_invariance},
      {"9 parameter accounting", parameter_accounting},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << name << ": " << v.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
