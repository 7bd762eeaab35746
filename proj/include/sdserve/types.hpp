#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace sdserve {

// Error hierarchy. Everything user-facing derives from Error so the CLI can
// map the whole family onto exit codes in one place.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model evaluated at or past the saturation boundary (rps * c2 >= 1).
struct StabilityError : Error {
  using Error::Error;
};

// No finite saturation rate exists (c2 = 0).
struct UnboundedError : Error {
  using Error::Error;
};

// A ratio or statistic is undefined for the given inputs (zero variance,
// zero denominator).
struct DegenerateError : Error {
  using Error::Error;
};

// Every candidate draft length saturates at the requested rate.
struct NoStableConfigError : Error {
  using Error::Error;
};

// The fixed-point latency equation has no solution with a positive
// denominator inside the search bracket.
struct NoStableSolutionError : Error {
  using Error::Error;
};

struct InsufficientDataError : Error {
  using Error::Error;
};

struct SingularJacobianError : Error {
  using Error::Error;
};

// File/format errors (io module).
struct ParseError : Error {
  using Error::Error;
};
struct SchemaError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct MissingInputError : Error {
  using Error::Error;
};

enum class DecodingMode { dense, sd };

std::string to_string(DecodingMode mode);
DecodingMode decoding_mode_from_string(const std::string& s);

// One experimental condition: which model/hardware served what shape of
// request, and how decoding was configured.
struct WorkloadConfig {
  std::string model_id;
  std::string hardware_id;
  int prefill_tokens = 1;
  int decode_tokens = 1;  // g
  DecodingMode mode = DecodingMode::dense;
  std::optional<double> alpha;  // sd only
  std::optional<int> draft_k;   // sd only

  void validate() const;

  // Grouping identity for sweep files.
  auto key() const {
    return std::tie(model_id, hardware_id, prefill_tokens, decode_tokens,
                    mode, alpha, draft_k);
  }
  friend bool operator==(const WorkloadConfig& a, const WorkloadConfig& b) {
    return a.key() == b.key();
  }
  friend bool operator<(const WorkloadConfig& a, const WorkloadConfig& b) {
    return a.key() < b.key();
  }
};

// One measured operating point of a sweep.
struct LoadPoint {
  double rps = 0.0;
  double mean_latency = 0.0;  // seconds
  std::optional<double> p95_latency;
  std::optional<double> p99_latency;
  long n_requests = 1;
  // Derived B = rps * mean_latency; recomputed on demand, only carried when a
  // producer chose to record it.
  std::optional<double> effective_batch;
  // Set by the simulator when the run showed unbounded queue growth.
  // Saturated points are kept in datasets but excluded from default fitting.
  bool saturated = false;

  void validate() const;
};

// Measured (or simulated) latency-vs-rate points for one condition,
// ascending in rps. The first point may be the synchronous baseline stored
// at its closed-loop throughput rps = 1/latency.
struct SweepDataset {
  WorkloadConfig config;
  std::vector<LoadPoint> points;

  void validate() const;
};

// Parameters of the basic latency law L = c1 / (1 - rps * c2).
struct ServingCoefficients {
  double c1 = 0.0;  // load-independent seconds
  double c2 = 0.0;  // seconds per effective batch element

  void validate() const;
};

}  // namespace sdserve
