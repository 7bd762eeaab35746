#pragma once

#include "sdserve/types.hpp"

namespace sdserve {

// Steady-state latency L = c1 / (1 - rps * c2).
// Throws StabilityError when rps * c2 >= 1.
double predict_latency(const ServingCoefficients& coeffs, double rps);

// Little's Law concurrency B = rps * latency.
double effective_batch(double rps, double latency);

// Rate at which predicted latency diverges, 1 / c2.
// Throws UnboundedError when c2 == 0.
double saturation_rate(const ServingCoefficients& coeffs);

struct NormalizedPoint {
  double x = 0.0;  // rps * c2
  double y = 0.0;  // latency / c1
};

// Normalization used for the universal-collapse view: exact model points
// satisfy y = 1 / (1 - x).
NormalizedPoint normalize_point(const ServingCoefficients& coeffs,
                                const LoadPoint& point);

}  // namespace sdserve
