#include "sdserve/moe_model.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include "sdserve/model.hpp"

namespace sdserve {

void MoeRouting::validate() const {
  if (m < 1) throw ValidationError("m must be >= 1");
  if (M < m) throw ValidationError("M must be >= m");
}

void MoeCoefficients::validate() const {
  for (double v : {c1u, c1s, c2u, c2s}) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("MoE coefficients must be finite and >= 0");
  }
  if (!(c1u > 0.0)) throw ValidationError("c1u must be > 0");
}

void MoeSpecCoefficients::validate() const {
  for (double v : {c1p, c1vu, c1vs, c1d, c2p, c2vu, c2vs, c2d}) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("MoE coefficients must be finite and >= 0");
  }
}

double expert_coverage(const MoeRouting& routing, double t) {
  routing.validate();
  if (!(t >= 0.0)) throw ValidationError("t must be >= 0");
  double miss = 1.0 - double(routing.m) / double(routing.M);
  return 1.0 - std::pow(miss, t);
}

namespace {

// Fixed-point solver shared by the coverage-aware predictors. `numer` and
// `denom` give L = numer(L) / denom(L); roots are located on the polynomial
// form h(L) = L*denom(L) - numer(L), which stays continuous where the ratio
// blows up. Returns the smallest root in [l_lo, 1e6] with positive
// denominator and relative residual below 1e-9.
double solve_fixed_point(const std::function<double(double)>& numer,
                         const std::function<double(double)>& denom,
                         double l_lo) {
  constexpr double kCap = 1e6;
  constexpr int kIters = 1000;
  constexpr double kLambda = 0.5;

  auto accept = [&](double l) {
    if (!(l > 0.0) || !std::isfinite(l)) return false;
    double d = denom(l);
    if (!(d > 0.0)) return false;
    double f = numer(l) / d;
    return std::abs(l - f) < 1e-9 * l;
  };

  double l = l_lo;
  for (int i = 0; i < kIters; ++i) {
    double d = denom(l);
    if (!(d > 0.0) || !std::isfinite(d)) break;
    double f = numer(l) / d;
    if (!std::isfinite(f) || f <= 0.0) break;
    double next = (1.0 - kLambda) * l + kLambda * f;
    if (next > kCap) break;
    if (std::abs(next - l) <= 1e-13 * next) {
      l = next;
      if (accept(l)) return l;
      break;
    }
    l = next;
  }

  auto h = [&](double x) { return x * denom(x) - numer(x); };
  // Geometric scan for the first sign change, then bisection.
  double lo = std::max(l_lo, 1e-300);
  double h_lo = h(lo);
  if (h_lo == 0.0 && accept(lo)) return lo;
  constexpr int kScan = 4096;
  double ratio = std::pow(kCap / lo, 1.0 / kScan);
  double a = lo, ha = h_lo;
  bool bracketed = false;
  for (int i = 1; i <= kScan; ++i) {
    double b = (i == kScan) ? kCap : lo * std::pow(ratio, i);
    double hb = h(b);
    if ((ha <= 0.0 && hb >= 0.0) || (ha >= 0.0 && hb <= 0.0)) {
      for (int j = 0; j < 200 && b - a > 1e-15 * b; ++j) {
        double mid = 0.5 * (a + b);
        double hm = h(mid);
        if ((ha <= 0.0 && hm >= 0.0) || (ha >= 0.0 && hm <= 0.0)) {
          b = mid;
        } else {
          a = mid;
          ha = hm;
        }
      }
      double root = 0.5 * (a + b);
      if (accept(root)) return root;
      bracketed = true;
      break;
    }
    a = b;
    ha = hb;
  }
  (void)bracketed;
  throw NoStableSolutionError(
      "no stable fixed point with positive denominator in bracket");
}

}  // namespace

double predict_moe_latency(const MoeCoefficients& coeffs,
                           const MoeRouting& routing, double rps) {
  coeffs.validate();
  routing.validate();
  if (rps < 0.0) throw ValidationError("rps must be >= 0");
  if (coeffs.c1s == 0.0 && coeffs.c2s == 0.0)
    return predict_latency({coeffs.c1u, coeffs.c2u}, rps);
  if (rps == 0.0) return coeffs.c1u;

  auto phi = [&](double l) { return expert_coverage(routing, rps * l); };
  auto numer = [&](double l) { return coeffs.c1u + phi(l) * coeffs.c1s; };
  auto denom = [&](double l) {
    return 1.0 - rps * (coeffs.c2u + phi(l) * coeffs.c2s);
  };
  return solve_fixed_point(numer, denom, coeffs.c1u);
}

double predict_moe_sd_latency(const MoeSpecCoefficients& coeffs,
                              const MoeRouting& routing,
                              const SpecParams& spec, int g, double rps) {
  coeffs.validate();
  routing.validate();
  spec.validate();
  if (g < 1) throw ValidationError("g must be >= 1");
  if (rps < 0.0) throw ValidationError("rps must be >= 0");

  SpecCostCoefficients base{coeffs.c1p, coeffs.c1vu, coeffs.c1d,
                            coeffs.c2p, coeffs.c2vu, coeffs.c2d};
  if (coeffs.c1vs == 0.0 && coeffs.c2vs == 0.0)
    return predict_sd_latency(base, spec, g, rps);

  double e = expected_accept_length(spec);
  double cycles = g / e;
  double tokens_per_request = spec.k >= 1 ? double(spec.k) : 1.0;
  double l0 = coeffs.c1p + cycles * (coeffs.c1vu + spec.k * coeffs.c1d);
  if (l0 <= 0.0) l0 = 1e-12;
  if (rps == 0.0) return l0;

  auto phi = [&](double l) {
    return expert_coverage(routing, rps * l * tokens_per_request);
  };
  auto numer = [&](double l) {
    return coeffs.c1p +
           cycles * (coeffs.c1vu + phi(l) * coeffs.c1vs + spec.k * coeffs.c1d);
  };
  auto denom = [&](double l) {
    return 1.0 - rps * (coeffs.c2p + cycles * (coeffs.c2vu +
                                               phi(l) * coeffs.c2vs +
                                               spec.k * coeffs.c2d));
  };
  return solve_fixed_point(numer, denom, l0);
}

}  // namespace sdserve
