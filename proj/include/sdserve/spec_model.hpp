#pragma once

#include <map>

#include "sdserve/types.hpp"

namespace sdserve {

// Speculative decoding configuration. k = 0 means speculation off.
struct SpecParams {
  double alpha = 0.0;  // per-token acceptance probability
  int k = 0;           // draft length

  void validate() const;
};

// Per-phase cost decomposition: fixed (c1*) and per-batch-element (c2*)
// costs for prefill, verify and draft phases.
struct SpecCostCoefficients {
  double c1p = 0.0;
  double c1v = 0.0;
  double c1d = 0.0;
  double c2p = 0.0;
  double c2v = 0.0;
  double c2d = 0.0;

  void validate() const;
};

// SD-to-dense coefficient ratios.
struct CostRatios {
  double c1r = 0.0;
  double c2r = 0.0;
};

// Expected tokens per SD cycle including the bonus token:
// E = (1 - alpha^(k+1)) / (1 - alpha), continued to k + 1 at alpha = 1.
double expected_accept_length(const SpecParams& spec);

// Collapses per-phase costs into effective (C1, C2) for a decode length g:
//   C1 = c1p + (g/E) * (c1v + k * c1d)
//   C2 = c2p + (g/E) * (c2v + k * c2d)
ServingCoefficients effective_coefficients(const SpecCostCoefficients& costs,
                                           const SpecParams& spec, int g);

// Latency under SD at the given load; effective coefficients fed through the
// basic law. Throws StabilityError past saturation.
double predict_sd_latency(const SpecCostCoefficients& costs,
                          const SpecParams& spec, int g, double rps);

// Speedup = L_dense / L_sd expressed in ratio form:
//   (1 / C1R) * (1 + (1 - C2R) * r / (1 - r)),   r = rps * dense.c2.
// Algebraically identical to the latency ratio.
double speedup(const ServingCoefficients& dense, const ServingCoefficients& sd,
               double rps);

// Elementwise ratios sd/dense. Throws DegenerateError when dense.c2 == 0.
CostRatios cost_ratios(const ServingCoefficients& dense,
                       const ServingCoefficients& sd);

struct RatioMinima {
  double min_c1r = 0.0;
  int argmin_k_c1r = 0;
  double min_c2r = 0.0;
  int argmin_k_c2r = 0;
};

// Minimum c1 and c2 ratios over a per-draft-length coefficient map, with the
// draft length attaining each. Ties break toward smaller k.
RatioMinima min_cost_ratios_over_k(
    const std::map<int, ServingCoefficients>& per_k,
    const ServingCoefficients& dense);

// Argmin over k in {0..k_max} of predicted SD latency, skipping unstable k.
// Ties break toward smaller k. Throws NoStableConfigError when every k
// saturates at this rate.
int optimal_draft_length(const SpecCostCoefficients& costs, double alpha,
                         int g, double rps, int k_max);

}  // namespace sdserve
