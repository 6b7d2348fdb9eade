#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "whisq/autodiff.hpp"
#include "whisq/config.hpp"
#include "whisq/data_io.hpp"

namespace whisq {

/// Model dimensions used by the built-in gradient check.
WhisqConfig toy_gradcheck_config();

/// Random padded batch: two items with (T_a, T_t) = (5, 3) and (4, 2).
Batch toy_batch(const WhisqConfig& cfg, std::uint64_t seed);

struct GradcheckOptions {
  double h = 1e-4;
  double task_tol = 1e-4;  // parameters reached only through the task loss
  double ot_tol = 1e-3;    // parameters that also feed the Sinkhorn term
  std::string corrupt_op;  // test hook, see ad::Tape::corrupt_backward
  double corrupt_factor = 1.5;
  int max_step_reductions = 3;  // see ad::finite_difference_grad_terms
  double kink_margin = 1e-4;    // minimum |relu input| at the base point
  int max_redraws = 32;
};

struct GradcheckResult {
  AttentionMode mode{};
  std::uint64_t point_seed = 0;  // seed of the base point actually checked
  int redraws = 0;
  ad::GradReport report;
  std::vector<double> tolerances;  // per report entry
  double loss = 0.0;
  double seconds = 0.0;
  bool passed = false;
};

/// Finite-difference check of the full training loss for one mode.
GradcheckResult run_gradcheck(const WhisqConfig& cfg, std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace whisq
