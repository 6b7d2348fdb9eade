#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "whisq/data_io.hpp"

namespace whisq::metrics {

double mse(std::span<const double> pred, std::span<const double> truth);
/// Pearson correlation. Throws NumericError on zero variance.
double lcc(std::span<const double> pred, std::span<const double> truth);
/// Average ranks (1-based); ties share the mean of the positions they span.
std::vector<double> average_ranks(std::span<const double> x);
/// Spearman correlation of average ranks.
double srcc(std::span<const double> pred, std::span<const double> truth);
/// Kendall tau-b.
double ktau(std::span<const double> pred, std::span<const double> truth);

struct SystemMeans {
  std::vector<std::string> system_ids;  // sorted
  std::vector<double> mean_pred;
  std::vector<double> mean_truth;
};

SystemMeans system_aggregate(std::span<const double> pred, std::span<const double> truth,
                             std::span<const std::string> system_ids);

/// One metric value, or the reason it could not be computed.
struct MetricValue {
  std::optional<double> value;
  std::string error;
};

struct LevelMetrics {
  MetricValue mse, lcc, srcc, ktau;
};

struct AxisMetrics {
  LevelMetrics utterance;
  LevelMetrics system;
};

struct EvalReport {
  AxisMetrics omq;
  AxisMetrics ta;
  std::size_t n_utterances = 0;
  std::size_t n_systems = 0;

  /// True if every one of the 16 values was computed.
  bool complete() const;
  std::vector<std::string> errors() const;
};

struct Prediction {
  std::string clip_id;
  double omq = 0.0;
  double ta = 0.0;
};

/// Matches predictions to records by clip_id (order-independent). Degenerate
/// correlations are recorded as errors on the affected fields.
EvalReport evaluate(std::span<const Prediction> predictions, std::span<const ClipRecord> records);

/// Flat object with keys "{omq|ta}.{utterance|system}.{mse|lcc|srcc|ktau}";
/// uncomputable values are null and listed under "errors".
nlohmann::json to_json(const EvalReport& r);

/// Aligned text table with the same column layout as the published results.
std::string render_table(const EvalReport& r, const std::string& label = "model");

}  // namespace whisq::metrics
