#include "sdserve/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sdserve {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream));
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : gen_(derive_stream(seed, stream)) {}

double Rng::uniform() {
  return double(gen_() >> 11) * 0x1.0p-53;
}

long Rng::uniform_int(long n) {
  if (n <= 0) throw ValidationError("uniform_int needs n > 0");
  std::uint64_t un = std::uint64_t(n);
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        std::numeric_limits<std::uint64_t>::max() % un;
  std::uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return long(x % un);
}

std::string to_string(ArrivalProcess arrival) {
  return arrival == ArrivalProcess::constant_rate ? "constant_rate"
                                                  : "poisson";
}

ArrivalProcess arrival_process_from_string(const std::string& s) {
  if (s == "constant_rate") return ArrivalProcess::constant_rate;
  if (s == "poisson") return ArrivalProcess::poisson;
  throw ValidationError("unknown arrival process: '" + s + "'");
}

void SimConfig::validate() const {
  workload.validate();
  for (const PhaseCost* c :
       {&costs.prefill, &costs.verify, &costs.draft}) {
    if (!(c->fixed_s >= 0.0) || !(c->per_batch_s >= 0.0))
      throw ValidationError("step costs must be >= 0");
  }
  if (routing) routing->validate();
  if (moe_saturation) {
    if (!routing)
      throw ValidationError("moe_saturation requires routing");
    for (const PhaseCost* c : {&moe_saturation->prefill,
                               &moe_saturation->verify,
                               &moe_saturation->draft}) {
      if (!(c->fixed_s >= 0.0) || !(c->per_batch_s >= 0.0))
        throw ValidationError("saturation increments must be >= 0");
    }
  }
  if (max_concurrency && *max_concurrency < 1)
    throw ValidationError("max_concurrency must be >= 1");
  if (warmup_requests < 0)
    throw ValidationError("warmup_requests must be >= 0");
  if (measured_requests < 1)
    throw ValidationError("measured_requests must be >= 1");
}

std::optional<SpecParams> SimConfig::spec() const {
  if (workload.mode != DecodingMode::sd) return std::nullopt;
  return SpecParams{workload.alpha.value_or(0.0),
                    workload.draft_k.value_or(0)};
}

long sample_accepted(const SpecParams& spec, Rng& rng) {
  spec.validate();
  if (spec.k < 1) throw ValidationError("sample_accepted needs k >= 1");
  // All k trials are always drawn so the stream stays aligned regardless of
  // where the first rejection lands.
  long leading = 0;
  bool rejected = false;
  for (int i = 0; i < spec.k; ++i) {
    bool ok = rng.uniform() < spec.alpha;
    if (!rejected && ok) ++leading;
    if (!ok) rejected = true;
  }
  return leading + 1;
}

double sample_expert_coverage(const MoeRouting& routing, long t, Rng& rng) {
  routing.validate();
  if (t < 0) throw ValidationError("t must be >= 0");
  if (t == 0) return 0.0;
  std::vector<char> touched(routing.M, 0);
  std::vector<int> scratch(routing.M);
  int distinct = 0;
  for (long tok = 0; tok < t; ++tok) {
    std::iota(scratch.begin(), scratch.end(), 0);
    for (int j = 0; j < routing.m; ++j) {
      long r = rng.uniform_int(routing.M - j);
      std::swap(scratch[j], scratch[j + r]);
      if (!touched[scratch[j]]) {
        touched[scratch[j]] = 1;
        ++distinct;
      }
    }
    if (distinct == routing.M) break;
  }
  return double(distinct) / double(routing.M);
}

bool detect_saturation(const std::vector<double>& times,
                       const std::vector<double>& in_system,
                       double slope_tol) {
  if (times.size() != in_system.size())
    throw ValidationError("times/in_system length mismatch");
  if (times.size() < 3) return false;
  double t_cut = times.back() * (2.0 / 3.0);
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < t_cut) continue;
    sx += times[i];
    sy += in_system[i];
    sxx += times[i] * times[i];
    sxy += times[i] * in_system[i];
    ++n;
  }
  if (n < 3) return false;
  double var = sxx - sx * sx / n;
  if (var <= 0.0) return false;
  double slope = (sxy - sx * sy / n) / var;
  return slope > slope_tol;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty())
    throw InsufficientDataError("percentile of empty sample");
  if (!(p >= 0.0 && p <= 1.0))
    throw ValidationError("percentile fraction must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  double h = (values.size() - 1) * p;
  std::size_t i = std::size_t(h);
  if (i + 1 >= values.size()) return values.back();
  double frac = h - double(i);
  return values[i] + frac * (values[i + 1] - values[i]);
}

namespace {

struct ReqState {
  double arrival = 0.0;
  double completion = -1.0;
  long remaining = 0;
  long generated = 0;
  long cycles = 0;
  bool prefilled = false;
};

// Time-average of the in-system count over [w0, w1], from arrival/completion
// event sweeps. Completions sort before arrivals at equal timestamps so a
// closed-loop handoff counts one request, not two.
double window_avg_concurrency(const std::vector<ReqState>& reqs, double w0,
                              double w1) {
  if (!(w1 > w0)) return 0.0;
  std::vector<std::pair<double, int>> events;
  events.reserve(reqs.size() * 2);
  for (const auto& r : reqs) {
    events.push_back({r.arrival, +1});
    events.push_back({r.completion, -1});
  }
  std::sort(events.begin(), events.end(),
            [](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first < b.first;
              return a.second < b.second;
            });
  double acc = 0.0, cur = w0;
  long n = 0;
  for (const auto& [t, d] : events) {
    if (t <= w0) {
      n += d;
      continue;
    }
    double tc = std::min(t, w1);
    if (tc > cur) {
      acc += double(n) * (tc - cur);
      cur = tc;
    }
    if (t >= w1) break;
    n += d;
  }
  if (cur < w1) acc += double(n) * (w1 - cur);
  return acc / (w1 - w0);
}

struct EngineParams {
  const SimConfig* config;
  bool closed_loop;
  double rps;
  std::uint64_t run_index;
};

SimResult run_engine(const EngineParams& ep) {
  const SimConfig& cfg = *ep.config;
  cfg.validate();
  const long total = cfg.warmup_requests + cfg.measured_requests;
  const long g = cfg.workload.decode_tokens;
  const auto spec = cfg.spec();
  const int k = spec ? spec->k : 0;
  const bool moe = cfg.routing && cfg.moe_saturation;

  Rng arrival_rng(cfg.seed, ep.run_index * 2);
  Rng engine_rng(cfg.seed, ep.run_index * 2 + 1);

  std::vector<ReqState> reqs(total);
  if (!ep.closed_loop) {
    double t = 0.0;
    for (long i = 0; i < total; ++i) {
      if (cfg.arrival == ArrivalProcess::constant_rate) {
        reqs[i].arrival = double(i) / ep.rps;
      } else {
        if (i > 0) t += -std::log(1.0 - arrival_rng.uniform()) / ep.rps;
        reqs[i].arrival = t;
      }
      reqs[i].remaining = g;
    }
  } else {
    for (long i = 0; i < total; ++i) reqs[i].remaining = g;
  }

  auto phase_duration = [&](const PhaseCost& base, const PhaseCost& sat,
                            long batch, long cov_tokens) {
    double d = base.fixed_s + double(batch) * base.per_batch_s;
    if (moe && (sat.fixed_s > 0.0 || sat.per_batch_s > 0.0)) {
      double cov = sample_expert_coverage(*cfg.routing, cov_tokens, engine_rng);
      d += cov * (sat.fixed_s + double(batch) * sat.per_batch_s);
    }
    return d;
  };
  const StepCosts zero_sat{};
  const StepCosts& sat = cfg.moe_saturation ? *cfg.moe_saturation : zero_sat;

  std::vector<long> active;
  long next_admit = 0;
  long completed = 0;
  double now = 0.0;
  const long cap = cfg.max_concurrency.value_or(total);

  while (completed < total) {
    if (ep.closed_loop) {
      if (active.empty()) {
        reqs[next_admit].arrival = now;
        active.push_back(next_admit++);
      }
    } else {
      while (next_admit < total && long(active.size()) < cap &&
             reqs[next_admit].arrival <= now) {
        active.push_back(next_admit++);
      }
      if (active.empty()) {
        now = std::max(now, reqs[next_admit].arrival);
        while (next_admit < total && long(active.size()) < cap &&
               reqs[next_admit].arrival <= now) {
          active.push_back(next_admit++);
        }
      }
    }

    const long batch = long(active.size());
    long prefilling = 0;
    for (long idx : active)
      if (!reqs[idx].prefilled) ++prefilling;
    const bool any_decode = prefilling < batch;

    double duration = 0.0;
    if (prefilling > 0) {
      duration += phase_duration(cfg.costs.prefill, sat.prefill, batch,
                                 prefilling * cfg.workload.prefill_tokens);
    }
    if (any_decode) {
      long verify_tokens = spec ? batch * k : batch;
      duration +=
          phase_duration(cfg.costs.verify, sat.verify, batch, verify_tokens);
      for (int step = 0; step < k; ++step) {
        duration += phase_duration(cfg.costs.draft, sat.draft, batch, batch);
      }
    }
    now += duration;

    std::vector<long> still_active;
    still_active.reserve(active.size());
    for (long idx : active) {
      ReqState& r = reqs[idx];
      if (!r.prefilled) {
        r.prefilled = true;
        still_active.push_back(idx);
        continue;
      }
      long tokens = 1;
      if (spec) tokens = sample_accepted(*spec, engine_rng);
      tokens = std::min(tokens, r.remaining);
      r.remaining -= tokens;
      r.generated += tokens;
      ++r.cycles;
      if (r.remaining <= 0) {
        r.completion = now;
        ++completed;
      } else {
        still_active.push_back(idx);
      }
    }
    active = std::move(still_active);
  }

  SimResult out;
  out.offered_rps = ep.closed_loop ? 0.0 : ep.rps;
  out.per_request.reserve(cfg.measured_requests);
  std::vector<double> latencies;
  latencies.reserve(cfg.measured_requests);
  for (long i = cfg.warmup_requests; i < total; ++i) {
    const ReqState& r = reqs[i];
    double lat = r.completion - r.arrival;
    out.per_request.push_back(
        {r.arrival, r.completion, lat, r.generated, r.cycles});
    latencies.push_back(lat);
  }
  out.mean_latency =
      std::accumulate(latencies.begin(), latencies.end(), 0.0) /
      double(latencies.size());
  out.p95_latency = percentile(latencies, 0.95);
  out.p99_latency = percentile(latencies, 0.99);

  double w0 = reqs[cfg.warmup_requests].arrival;
  double w1 = reqs[total - 1].arrival;
  if (ep.closed_loop) {
    out.achieved_rps = 1.0 / out.mean_latency;
  } else if (cfg.measured_requests >= 2 && w1 > w0) {
    out.achieved_rps =
        std::min(double(cfg.measured_requests - 1) / (w1 - w0), ep.rps);
  } else {
    out.achieved_rps = ep.rps;
  }
  out.time_avg_concurrency =
      w1 > w0 ? window_avg_concurrency(reqs, w0, w1)
              : double(ep.closed_loop ? 1 : 0);

  std::vector<double> completions(total);
  for (long i = 0; i < total; ++i) completions[i] = reqs[i].completion;
  std::sort(completions.begin(), completions.end());
  std::vector<double> times(total), in_system(total);
  for (long i = 0; i < total; ++i) {
    times[i] = reqs[i].arrival;
    auto done = std::upper_bound(completions.begin(), completions.end(),
                                 reqs[i].arrival) -
                completions.begin();
    in_system[i] = double(i + 1 - done);
  }
  out.saturated = !ep.closed_loop && detect_saturation(times, in_system);
  return out;
}

}  // namespace

SimResult run_sim(const SimConfig& config, double offered_rps,
                  std::uint64_t run_index) {
  if (offered_rps <= 0.0) return run_closed_loop(config, run_index);
  return run_engine({&config, false, offered_rps, run_index});
}

SimResult run_closed_loop(const SimConfig& config, std::uint64_t run_index) {
  return run_engine({&config, true, 0.0, run_index});
}

double find_max_stable_rate(const SimConfig& config) {
  config.validate();
  std::uint64_t salt = 0x100000;
  SimResult base = run_closed_loop(config, salt++);
  double r0 = 1.0 / base.mean_latency;

  double lo = r0;
  for (int i = 0; i < 20 && run_sim(config, lo, salt++).saturated; ++i)
    lo /= 2.0;

  double hi = 0.0;
  double probe = lo * 2.0;
  for (int i = 0; i < 20; ++i) {
    if (run_sim(config, probe, salt++).saturated) {
      hi = probe;
      break;
    }
    lo = probe;
    probe *= 2.0;
  }
  if (hi == 0.0) return lo;

  for (int i = 0; i < 12; ++i) {
    double mid = 0.5 * (lo + hi);
    if (run_sim(config, mid, salt++).saturated) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return lo;
}

SweepDataset run_sweep(const SimConfig& config) {
  config.validate();
  SweepDataset out;
  out.config = config.workload;

  SimResult base = run_closed_loop(config, 0);
  double r_sync = base.achieved_rps;
  double r_max = find_max_stable_rate(config);
  double step = (r_max - r_sync) / 9.0;
  if (step <= 0.0) step = r_sync * 0.01;

  auto to_point = [&](const SimResult& r, double rate) {
    LoadPoint p;
    p.rps = rate;
    p.mean_latency = r.mean_latency;
    p.p95_latency = r.p95_latency;
    p.p99_latency = r.p99_latency;
    p.n_requests = long(r.per_request.size());
    p.saturated = r.saturated;
    return p;
  };

  out.points.push_back(to_point(base, r_sync));
  for (int i = 1; i <= 8; ++i) {
    double rate = r_sync + step * i;
    SimResult r = run_sim(config, rate, std::uint64_t(i));
    out.points.push_back(to_point(r, rate));
  }
  return out;
}

}  // namespace sdserve
