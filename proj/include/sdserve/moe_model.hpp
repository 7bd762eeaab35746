#pragma once

#include "sdserve/spec_model.hpp"
#include "sdserve/types.hpp"

namespace sdserve {

// Top-m-of-M expert routing.
struct MoeRouting {
  int m = 1;  // experts selected per token
  int M = 1;  // total experts

  void validate() const;
};

// Coverage-split basic coefficients: low-coverage base costs plus saturation
// increments that phase in as expert coverage rises.
struct MoeCoefficients {
  double c1u = 0.0;
  double c1s = 0.0;
  double c2u = 0.0;
  double c2s = 0.0;

  void validate() const;
};

// SD cost decomposition with only the verifier terms split into
// unsaturated/saturation parts.
struct MoeSpecCoefficients {
  double c1p = 0.0;
  double c1vu = 0.0;
  double c1vs = 0.0;
  double c1d = 0.0;
  double c2p = 0.0;
  double c2vu = 0.0;
  double c2vs = 0.0;
  double c2d = 0.0;

  void validate() const;
};

// Expected fraction of experts activated by t routed tokens under
// independent uniform routing: phi = 1 - (1 - m/M)^t. t is real-valued.
double expert_coverage(const MoeRouting& routing, double t);

// Smallest L solving
//   L = (c1u + phi(rps*L) * c1s) / (1 - rps * (c2u + phi(rps*L) * c2s)).
// Solved by damped fixed-point iteration with a bisection fallback; the
// returned value satisfies |L - f(L)| < 1e-9 * L with a positive denominator.
// Throws NoStableSolutionError when no such fixed point exists in the
// bracket.
double predict_moe_latency(const MoeCoefficients& coeffs,
                           const MoeRouting& routing, double rps);

// SD variant with coverage applied to the verifier split; the coverage
// argument is rps * L * k (rps * L when k = 0).
double predict_moe_sd_latency(const MoeSpecCoefficients& coeffs,
                              const MoeRouting& routing,
                              const SpecParams& spec, int g, double rps);

}  // namespace sdserve
