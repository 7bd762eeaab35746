#include "sdserve/types.hpp"

#include <cmath>

namespace sdserve {

std::string to_string(DecodingMode mode) {
  return mode == DecodingMode::dense ? "dense" : "sd";
}

DecodingMode decoding_mode_from_string(const std::string& s) {
  if (s == "dense") return DecodingMode::dense;
  if (s == "sd") return DecodingMode::sd;
  throw ValidationError("unknown decoding mode: '" + s + "'");
}

void WorkloadConfig::validate() const {
  if (prefill_tokens < 1)
    throw ValidationError("prefill_tokens must be >= 1");
  if (decode_tokens < 1)
    throw ValidationError("decode_tokens must be >= 1");
  if (mode == DecodingMode::dense) {
    if (alpha.has_value() || draft_k.has_value())
      throw ValidationError("dense workload must not carry alpha or draft_k");
  } else {
    if (!alpha.has_value() || !draft_k.has_value())
      throw ValidationError("sd workload requires both alpha and draft_k");
    if (*alpha < 0.0 || *alpha > 1.0)
      throw ValidationError("alpha must lie in [0, 1]");
    if (*draft_k < 1)
      throw ValidationError("draft_k must be >= 1");
  }
}

void LoadPoint::validate() const {
  if (!(rps >= 0.0) || !std::isfinite(rps))
    throw ValidationError("rps must be finite and >= 0");
  if (!(mean_latency > 0.0) || !std::isfinite(mean_latency))
    throw ValidationError("mean_latency must be finite and > 0");
  if (p95_latency && !(*p95_latency > 0.0))
    throw ValidationError("p95_latency must be > 0 when present");
  if (p99_latency && !(*p99_latency > 0.0))
    throw ValidationError("p99_latency must be > 0 when present");
  if (p95_latency && p99_latency && *p99_latency < *p95_latency)
    throw ValidationError("p99_latency must be >= p95_latency");
  if (n_requests < 1)
    throw ValidationError("n_requests must be >= 1");
  if (effective_batch) {
    double expect = rps * mean_latency;
    double scale = std::max(std::abs(expect), 1e-300);
    if (std::abs(*effective_batch - expect) > 1e-9 * scale)
      throw ValidationError(
          "effective_batch disagrees with rps * mean_latency");
  }
}

void SweepDataset::validate() const {
  config.validate();
  for (const auto& p : points) p.validate();
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].rps < points[i - 1].rps)
      throw ValidationError("sweep points must be ascending in rps");
  }
}

void ServingCoefficients::validate() const {
  if (!(c1 > 0.0) || !std::isfinite(c1))
    throw ValidationError("c1 must be finite and > 0");
  if (!(c2 >= 0.0) || !std::isfinite(c2))
    throw ValidationError("c2 must be finite and >= 0");
}

}  // namespace sdserve
