#include "sdserve/model.hpp"

#include <cmath>
#include <string>

namespace sdserve {

double predict_latency(const ServingCoefficients& coeffs, double rps) {
  coeffs.validate();
  if (rps < 0.0) throw ValidationError("rps must be >= 0");
  double x = rps * coeffs.c2;
  if (x >= 1.0)
    throw StabilityError("rps * c2 = " + std::to_string(x) +
                         " >= 1: past saturation");
  return coeffs.c1 / (1.0 - x);
}

double effective_batch(double rps, double latency) {
  if (rps < 0.0) throw ValidationError("rps must be >= 0");
  if (!(latency > 0.0)) throw ValidationError("latency must be > 0");
  return rps * latency;
}

double saturation_rate(const ServingCoefficients& coeffs) {
  coeffs.validate();
  if (coeffs.c2 == 0.0)
    throw UnboundedError("c2 = 0: latency never saturates");
  return 1.0 / coeffs.c2;
}

NormalizedPoint normalize_point(const ServingCoefficients& coeffs,
                                const LoadPoint& point) {
  coeffs.validate();
  point.validate();
  return {point.rps * coeffs.c2, point.mean_latency / coeffs.c1};
}

}  // namespace sdserve
