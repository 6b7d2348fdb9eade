#include "whisq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "whisq/errors.hpp"

namespace whisq::metrics {

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, std::size_t min_len, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": length mismatch");
  if (a.size() < min_len) {
    throw NumericError(std::string(what) + ": need at least " + std::to_string(min_len) + " values");
  }
}

}  // namespace

double mse(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred, truth, 1, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

double lcc(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred, truth, 2, "lcc");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = truth[i] - mt;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("lcc: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double srcc(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred, truth, 2, "srcc");
  const auto rp = average_ranks(pred);
  const auto rt = average_ranks(truth);
  try {
    return lcc(rp, rt);
  } catch (const NumericError&) {
    throw NumericError("srcc: all values tied");
  }
}

double ktau(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred, truth, 2, "ktau");
  const std::size_t n = pred.size();
  long long concordant = 0, discordant = 0, ties_pred = 0, ties_truth = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dp = pred[i] - pred[j];
      const double dt = truth[i] - truth[j];
      if (dp == 0.0) ++ties_pred;
      if (dt == 0.0) ++ties_truth;
      if (dp == 0.0 || dt == 0.0) continue;
      if ((dp > 0.0) == (dt > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const auto n0 = static_cast<long long>(n * (n - 1) / 2);
  const double denom = std::sqrt(static_cast<double>(n0 - ties_pred) * static_cast<double>(n0 - ties_truth));
  if (denom == 0.0) throw NumericError("ktau: zero denominator (a vector is entirely tied)");
  return std::clamp(static_cast<double>(concordant - discordant) / denom, -1.0, 1.0);
}

SystemMeans system_aggregate(std::span<const double> pred, std::span<const double> truth,
                             std::span<const std::string> system_ids) {
  if (pred.size() != truth.size() || pred.size() != system_ids.size()) {
    throw std::invalid_argument("system_aggregate: length mismatch");
  }
  struct Acc {
    double p = 0.0, t = 0.0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> acc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto& a = acc[system_ids[i]];
    a.p += pred[i];
    a.t += truth[i];
    ++a.n;
  }
  SystemMeans out;
  for (const auto& [id, a] : acc) {
    out.system_ids.push_back(id);
    out.mean_pred.push_back(a.p / static_cast<double>(a.n));
    out.mean_truth.push_back(a.t / static_cast<double>(a.n));
  }
  return out;
}

namespace {

template <typename F>
MetricValue guarded(F f) {
  try {
    return {f(), {}};
  } catch (const NumericError& e) {
    return {std::nullopt, e.what()};
  }
}

LevelMetrics level_metrics(std::span<const double> pred, std::span<const double> truth) {
  LevelMetrics m;
  m.mse = guarded([&] { return mse(pred, truth); });
  m.lcc = guarded([&] { return lcc(pred, truth); });
  m.srcc = guarded([&] { return srcc(pred, truth); });
  m.ktau = guarded([&] { return ktau(pred, truth); });
  return m;
}

AxisMetrics axis_metrics(std::span<const double> pred, std::span<const double> truth,
                         std::span<const std::string> systems) {
  AxisMetrics a;
  a.utterance = level_metrics(pred, truth);
  const auto agg = system_aggregate(pred, truth, systems);
  a.system = level_metrics(agg.mean_pred, agg.mean_truth);
  if (agg.system_ids.size() < 2) {
    const std::string why = "system level needs at least 2 systems, got " + std::to_string(agg.system_ids.size());
    for (auto* v : {&a.system.lcc, &a.system.srcc, &a.system.ktau}) *v = {std::nullopt, why};
  }
  return a;
}

template <typename F>
void for_each_field(const EvalReport& r, F f) {
  for (auto [axis_name, axis] : {std::pair{"omq", &r.omq}, std::pair{"ta", &r.ta}}) {
    for (auto [level_name, level] : {std::pair{"utterance", &axis->utterance}, std::pair{"system", &axis->system}}) {
      for (auto [metric_name, value] : {std::pair{"mse", &level->mse}, std::pair{"lcc", &level->lcc},
                                        std::pair{"srcc", &level->srcc}, std::pair{"ktau", &level->ktau}}) {
        f(std::string(axis_name) + "." + level_name + "." + metric_name, *value);
      }
    }
  }
}

}  // namespace

bool EvalReport::complete() const {
  bool ok = true;
  for_each_field(*this, [&](const std::string&, const MetricValue& v) { ok = ok && v.value.has_value(); });
  return ok;
}

std::vector<std::string> EvalReport::errors() const {
  std::vector<std::string> out;
  for_each_field(*this, [&](const std::string& key, const MetricValue& v) {
    if (!v.value) out.push_back(key + ": " + v.error);
  });
  return out;
}

EvalReport evaluate(std::span<const Prediction> predictions, std::span<const ClipRecord> records) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.clip_id, &p).second) throw DataError("evaluate: duplicate prediction for '" + p.clip_id + "'");
  }
  // Sort by clip id so the result does not depend on record order.
  std::vector<const ClipRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->clip_id < b->clip_id; });

  std::vector<double> po, pt, to, tt;
  std::vector<std::string> systems;
  for (const ClipRecord* r : sorted) {
    auto it = by_id.find(r->clip_id);
    if (it == by_id.end()) throw DataError("evaluate: no prediction for clip '" + r->clip_id + "'");
    po.push_back(it->second->omq);
    pt.push_back(it->second->ta);
    to.push_back(r->omq_mos);
    tt.push_back(r->ta_mos);
    systems.push_back(r->system_id);
  }
  if (po.empty()) throw DataError("evaluate: no records");
  EvalReport rep;
  rep.omq = axis_metrics(po, to, systems);
  rep.ta = axis_metrics(pt, tt, systems);
  rep.n_utterances = po.size();
  rep.n_systems = system_aggregate(po, to, systems).system_ids.size();
  return rep;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json errors = nlohmann::json::object();
  for_each_field(r, [&](const std::string& key, const MetricValue& v) {
    if (v.value) {
      j[key] = *v.value;
    } else {
      j[key] = nullptr;
      errors[key] = v.error;
    }
  });
  j["n_utterances"] = r.n_utterances;
  j["n_systems"] = r.n_systems;
  j["errors"] = errors;
  return j;
}

std::string render_table(const EvalReport& r, const std::string& label) {
  auto cell = [](const MetricValue& v) {
    char buf[16];
    if (v.value) {
      std::snprintf(buf, sizeof buf, "%7.4f", *v.value);
    } else {
      std::snprintf(buf, sizeof buf, "%7s", "n/a");
    }
    return std::string(buf);
  };
  auto level = [&](const LevelMetrics& m) {
    return cell(m.mse) + " " + cell(m.lcc) + " " + cell(m.srcc) + " " + cell(m.ktau);
  };
  const std::string metric_hdr = "    MSE     LCC    SRCC    KTAU";
  const std::size_t w = std::max<std::size_t>(label.size(), 13);
  std::ostringstream os;
  auto pad = [&](const std::string& s) { return s + std::string(w - std::min(w, s.size()), ' '); };
  os << pad("") << " | " << "Overall quality (OMQ)" << std::string(46, ' ') << " | " << "Textual alignment (TA)\n";
  os << pad("") << " | " << "Utterance-level                 System-level                   | "
     << "Utterance-level                 System-level\n";
  os << pad("Configuration") << " | " << metric_hdr << " " << metric_hdr << "   | " << metric_hdr << " " << metric_hdr
     << "\n";
  os << pad(label) << " | " << level(r.omq.utterance) << " " << level(r.omq.system) << "   | "
     << level(r.ta.utterance) << " " << level(r.ta.system) << "\n";
  return os.str();
}

}  // namespace whisq::metrics
