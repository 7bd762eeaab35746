#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "sdserve/moe_model.hpp"
#include "sdserve/spec_model.hpp"
#include "sdserve/types.hpp"

namespace sdserve {

// Deterministic across platforms: raw engine output is standardized, and the
// mappings to doubles / bounded ints avoid std::*_distribution (which is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next() { return gen_(); }
  double uniform();            // [0, 1), 53-bit
  long uniform_int(long n);    // [0, n), unbiased

 private:
  std::mt19937_64 gen_;
};

struct PhaseCost {
  double fixed_s = 0.0;      // sigma1: charged once per phase instance
  double per_batch_s = 0.0;  // sigma2: charged per active request
};

struct StepCosts {
  PhaseCost prefill;
  PhaseCost verify;
  PhaseCost draft;
};

enum class ArrivalProcess { constant_rate, poisson };

std::string to_string(ArrivalProcess arrival);
ArrivalProcess arrival_process_from_string(const std::string& s);

struct SimConfig {
  StepCosts costs;
  WorkloadConfig workload;
  std::optional<MoeRouting> routing;
  // Extra (fixed, per-batch) cost per phase, scaled by sampled expert
  // coverage each time the phase runs. Requires routing.
  std::optional<StepCosts> moe_saturation;
  ArrivalProcess arrival = ArrivalProcess::constant_rate;
  std::uint64_t seed = 0;
  std::optional<long> max_concurrency;  // admission cap; unlimited if absent
  long warmup_requests = 0;
  long measured_requests = 1;

  void validate() const;
  // From workload.alpha / workload.draft_k when the mode is sd.
  std::optional<SpecParams> spec() const;
};

struct RequestRecord {
  double arrival = 0.0;
  double completion = 0.0;
  double latency = 0.0;
  long generated_tokens = 0;
  long sd_cycles = 0;
};

struct SimResult {
  std::vector<RequestRecord> per_request;  // measured requests only
  double mean_latency = 0.0;
  double p95_latency = 0.0;
  double p99_latency = 0.0;
  double time_avg_concurrency = 0.0;
  double achieved_rps = 0.0;
  double offered_rps = 0.0;  // 0 for the synchronous closed loop
  bool saturated = false;
};

// Number of tokens a request keeps from one speculation cycle: leading
// Bernoulli(alpha) successes among k drafts, plus the bonus token. In
// [1, k+1].
long sample_accepted(const SpecParams& spec, Rng& rng);

// Each of t tokens picks m distinct experts uniformly from M; returns the
// fraction of the M experts touched.
double sample_expert_coverage(const MoeRouting& routing, long t, Rng& rng);

// Iteration-level continuous batching. offered_rps > 0 runs the open loop
// with the configured arrival process; offered_rps <= 0 runs the synchronous
// closed loop (one request in flight, next arrival at completion).
// run_index salts the RNG stream so concurrent runs stay independent.
SimResult run_sim(const SimConfig& config, double offered_rps,
                  std::uint64_t run_index = 0);

SimResult run_closed_loop(const SimConfig& config, std::uint64_t run_index = 0);

// Largest offered rate that stays unsaturated: doubling search for an upper
// bracket, then 12 bisection steps; returns the lower bracket.
double find_max_stable_rate(const SimConfig& config);

// Synchronous baseline plus eight evenly spaced constant-rate runs strictly
// between the baseline throughput and the stable ceiling (the ceiling itself
// is discarded); 9 points total, rps increasing.
SweepDataset run_sweep(const SimConfig& config);

// Sampled in-system count regressed over the tail third of the run; used by
// run_sim to set SimResult::saturated.
bool detect_saturation(const std::vector<double>& times,
                       const std::vector<double>& in_system,
                       double slope_tol = 0.01);

double percentile(std::vector<double> values, double p);

}  // namespace sdserve
