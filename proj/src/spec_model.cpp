#include "sdserve/spec_model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "sdserve/model.hpp"

namespace sdserve {

void SpecParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ValidationError("alpha must lie in [0, 1]");
  if (k < 0) throw ValidationError("k must be >= 0");
}

void SpecCostCoefficients::validate() const {
  for (double v : {c1p, c1v, c1d, c2p, c2v, c2d}) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("cost coefficients must be finite and >= 0");
  }
  if (!(c1p + c1v > 0.0))
    throw ValidationError("c1p + c1v must be > 0");
}

double expected_accept_length(const SpecParams& spec) {
  spec.validate();
  if (spec.k == 0 || spec.alpha == 0.0) return 1.0;
  if (spec.alpha == 1.0) return spec.k + 1.0;
  return (1.0 - std::pow(spec.alpha, spec.k + 1)) / (1.0 - spec.alpha);
}

ServingCoefficients effective_coefficients(const SpecCostCoefficients& costs,
                                           const SpecParams& spec, int g) {
  costs.validate();
  if (g < 1) throw ValidationError("g must be >= 1");
  double e = expected_accept_length(spec);
  double cycles = g / e;
  return {costs.c1p + cycles * (costs.c1v + spec.k * costs.c1d),
          costs.c2p + cycles * (costs.c2v + spec.k * costs.c2d)};
}

double predict_sd_latency(const SpecCostCoefficients& costs,
                          const SpecParams& spec, int g, double rps) {
  return predict_latency(effective_coefficients(costs, spec, g), rps);
}

double speedup(const ServingCoefficients& dense, const ServingCoefficients& sd,
               double rps) {
  dense.validate();
  sd.validate();
  if (rps < 0.0) throw ValidationError("rps must be >= 0");
  double r = rps * dense.c2;
  if (r >= 1.0) throw StabilityError("dense system past saturation");
  if (rps * sd.c2 >= 1.0) throw StabilityError("sd system past saturation");
  double c1r = sd.c1 / dense.c1;
  double c2r = dense.c2 > 0.0 ? sd.c2 / dense.c2 : 0.0;
  if (dense.c2 == 0.0 && sd.c2 > 0.0) {
    // Ratio form is undefined; fall back to the equivalent latency ratio.
    return predict_latency(dense, rps) / predict_latency(sd, rps);
  }
  return (1.0 / c1r) * (1.0 + (1.0 - c2r) * r / (1.0 - r));
}

CostRatios cost_ratios(const ServingCoefficients& dense,
                       const ServingCoefficients& sd) {
  dense.validate();
  sd.validate();
  if (dense.c2 == 0.0)
    throw DegenerateError("dense.c2 = 0: load-dependent ratio undefined");
  return {sd.c1 / dense.c1, sd.c2 / dense.c2};
}

RatioMinima min_cost_ratios_over_k(
    const std::map<int, ServingCoefficients>& per_k,
    const ServingCoefficients& dense) {
  if (per_k.empty()) throw ValidationError("per_k map must be non-empty");
  RatioMinima out;
  bool first = true;
  for (const auto& [k, coeffs] : per_k) {
    CostRatios r = cost_ratios(dense, coeffs);
    if (first || r.c1r < out.min_c1r) {
      out.min_c1r = r.c1r;
      out.argmin_k_c1r = k;
    }
    if (first || r.c2r < out.min_c2r) {
      out.min_c2r = r.c2r;
      out.argmin_k_c2r = k;
    }
    first = false;
  }
  return out;
}

int optimal_draft_length(const SpecCostCoefficients& costs, double alpha,
                         int g, double rps, int k_max) {
  costs.validate();
  if (k_max < 0) throw ValidationError("k_max must be >= 0");
  int best_k = -1;
  double best_latency = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= k_max; ++k) {
    SpecParams spec{alpha, k};
    double latency;
    try {
      latency = predict_sd_latency(costs, spec, g, rps);
    } catch (const StabilityError&) {
      continue;
    }
    if (latency < best_latency) {
      best_latency = latency;
      best_k = k;
    }
  }
  if (best_k < 0)
    throw NoStableConfigError("every draft length saturates at rps = " +
                              std::to_string(rps));
  return best_k;
}

}  // namespace sdserve
