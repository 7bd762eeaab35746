#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sdserve/moe_model.hpp"
#include "sdserve/spec_model.hpp"
#include "sdserve/types.hpp"

namespace sdserve {

enum class LatencyColumn { mean, p95, p99 };

std::string to_string(LatencyColumn column);
LatencyColumn latency_column_from_string(const std::string& s);

// Fitted parameters plus goodness-of-fit diagnostics. `model` names the
// parameter set (eq1|eq3|eq4|eq5, or "custom" for raw least_squares use).
struct FitResult {
  std::string model;
  std::vector<std::string> param_names;
  std::vector<double> params;
  double r2 = 0.0;
  double rmse = 0.0;                // seconds
  std::vector<double> residuals;    // observed - predicted, seconds
  int n_points = 0;
  bool converged = false;
  int iterations = 0;
  LatencyColumn latency_column = LatencyColumn::mean;
  // Set when the input grid cannot separate all parameters (single draft
  // length, m == M routing, ...).
  bool identifiability_warning = false;
  // Records the conventions used (initialization, bounds, residual mode).
  std::string notes;

  double param(const std::string& name) const;
};

ServingCoefficients serving_coefficients(const FitResult& fit);
SpecCostCoefficients spec_cost_coefficients(const FitResult& fit);
MoeCoefficients moe_coefficients(const FitResult& fit);
MoeSpecCoefficients moe_spec_coefficients(const FitResult& fit);

// One observation for the generic curve fitter: input vector with observed
// response.
struct CurvePoint {
  std::vector<double> x;
  double y = 0.0;
};

using CurveModel =
    std::function<double(std::span<const double> x, std::span<const double> p)>;

struct LeastSquaresOptions {
  int max_iterations = 10000;
  double param_tol = 1e-10;  // relative parameter change
  double cost_tol = 1e-12;   // relative cost change
  // Residuals as (model - y) / y instead of seconds; for sweeps spanning a
  // wide dynamic range.
  bool relative_residuals = false;
};

struct LeastSquaresResult {
  std::vector<double> params;
  double cost = 0.0;  // sum of squared residuals
  std::vector<double> residuals;
  bool converged = false;
  int iterations = 0;
};

// Levenberg-Marquardt with parameter clamping to [lower, upper]. Bounds may
// be +/-infinity for open sides; empty vectors mean unbounded. Non-convergence
// returns best-so-far with converged = false; a defective Jacobian throws
// SingularJacobianError.
LeastSquaresResult least_squares(const CurveModel& model,
                                 const std::vector<CurvePoint>& data,
                                 std::vector<double> init,
                                 std::vector<double> lower,
                                 std::vector<double> upper,
                                 const LeastSquaresOptions& opts = {});

struct FitOptions {
  LatencyColumn column = LatencyColumn::mean;
  bool relative_residuals = false;
};

// Fit (c1, c2) of the basic law to one sweep.
FitResult fit_basic(const SweepDataset& dataset, const FitOptions& opts = {});

// Jointly fit the six per-phase costs over sweeps spanning an (alpha, k)
// grid with a shared prefill/decode configuration.
FitResult fit_spec(const std::vector<SweepDataset>& datasets,
                   const FitOptions& opts = {});

// Coverage-aware fits; each residual evaluation solves the fixed point.
FitResult fit_moe(const SweepDataset& dataset, const MoeRouting& routing,
                  const FitOptions& opts = {});
FitResult fit_moe_spec(const std::vector<SweepDataset>& datasets,
                       const MoeRouting& routing, const FitOptions& opts = {});

// 1 - SS_res / SS_tot about the observed mean. Throws DegenerateError when
// the observed values have zero variance.
double r_squared(std::span<const double> observed,
                 std::span<const double> predicted);

// prefill + decode/2: the token count that drives per-token decode cost.
double effective_token_count(double prefill_tokens, double decode_tokens);

enum class Predictor {
  verifier_params,
  drafter_params,
  prefill_tokens,
  effective_tokens,
};

std::string to_string(Predictor predictor);
Predictor predictor_from_string(const std::string& s);

struct ScalingPoint {
  double predictor = 0.0;
  double coefficient = 0.0;
};

// Ordinary least-squares line through coefficient-vs-predictor points.
struct ScalingTrend {
  double slope = 0.0;
  double intercept = 0.0;
  Predictor predictor = Predictor::verifier_params;
  double r2 = 0.0;

  double predict(double x) const { return intercept + slope * x; }
};

// Throws DegenerateError on zero predictor variance.
ScalingTrend fit_scaling_trend(const std::vector<ScalingPoint>& points,
                               Predictor kind);

struct LeaveNOutOptions {
  // Headline r2 from the per-fold average instead of pooled predictions.
  bool fold_average = false;
  std::uint64_t seed = 0x5eed5d00dULL;  // subset sampling beyond max_subsets
  long max_subsets = 10000;
};

struct LeaveNOutSummary {
  int n = 0;
  long folds = 0;
  bool exhaustive = true;  // all subsets enumerated (vs sampled)
  double r2 = 0.0;         // headline: pooled unless fold_average was set
  double r2_pooled = 0.0;
  double r2_fold_mean = 0.0;
  double r2_fold_min = 0.0;
};

// Hold out every (or up to max_subsets sampled) n-subset, fit the trend on
// the rest, predict the held-out coefficients, and summarize predictive r2.
LeaveNOutSummary leave_n_out(const std::vector<ScalingPoint>& configs, int n,
                             Predictor kind,
                             const LeaveNOutOptions& opts = {});

}  // namespace sdserve
