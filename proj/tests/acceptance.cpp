// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line and
// the suite exits with the number of failures.
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "sdserve/fit.hpp"
#include "sdserve/io.hpp"
#include "sdserve/model.hpp"
#include "sdserve/moe_model.hpp"
#include "sdserve/sim.hpp"
#include "sdserve/spec_model.hpp"

using namespace sdserve;

namespace {

struct Check {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double uni(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::generate_canonical<double, 53>(rng);
}

double loguni(std::mt19937_64& rng, double lo, double hi) {
  return std::exp(uni(rng, std::log(lo), std::log(hi)));
}

SimConfig dense_sim(PhaseCost verify, int decode_tokens, std::uint64_t seed) {
  SimConfig sc;
  sc.costs.verify = verify;
  sc.workload = {"m", "h", 16, decode_tokens, DecodingMode::dense, {}, {}};
  sc.seed = seed;
  sc.warmup_requests = 200;
  sc.measured_requests = 2000;
  return sc;
}

// 1: the closed-form speedup expression must agree with the latency ratio.
Check speedup_identity() {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int t = 0; t < 10000; ++t) {
    ServingCoefficients dense{loguni(rng, 1e-3, 10.0), loguni(rng, 1e-4, 1.0)};
    double c1r = loguni(rng, 0.1, 2.0);
    double c2r = uni(rng, 0.05, 1.2);
    ServingCoefficients sd{dense.c1 * c1r, dense.c2 * c2r};
    double r = uni(rng, 0.0, 0.99 * std::min(1.0, 1.0 / c2r));
    double rps = r / dense.c2;
    double formula = speedup(dense, sd, rps);
    double ratio = predict_latency(dense, rps) / predict_latency(sd, rps);
    worst = std::max(worst, std::abs(formula - ratio) / ratio);
  }
  return {worst < 1e-12, fmt("max rel deviation %.2e over 10000 pairs", worst)};
}

// 2: normalized simulated sweeps fall on y = 1 / (1 - x).
Check universal_collapse() {
  struct Cfg {
    PhaseCost verify;
    PhaseCost prefill;
    int decode;
  };
  std::vector<Cfg> cfgs = {
      {{0.002, 0.0005}, {0.0, 0.0}, 64},  {{0.003, 0.0006}, {0.0, 0.0}, 64},
      {{0.001, 0.0002}, {0.0, 0.0}, 128}, {{0.002, 0.0005}, {0.004, 0.001}, 64},
      {{0.004, 0.0003}, {0.0, 0.0}, 96},  {{0.0015, 0.0008}, {0.0, 0.0}, 64},
  };
  double dev_sum = 0.0;
  int dev_n = 0;
  for (size_t i = 0; i < cfgs.size(); ++i) {
    auto sc = dense_sim(cfgs[i].verify, cfgs[i].decode, 7 + i);
    sc.costs.prefill = cfgs[i].prefill;
    auto sweep = run_sweep(sc);
    auto coeffs = serving_coefficients(fit_basic(sweep));
    for (const auto& p : sweep.points) {
      if (p.saturated) continue;
      auto np = normalize_point(coeffs, p);
      dev_sum += std::abs(np.y - 1.0 / (1.0 - np.x));
      ++dev_n;
    }
  }
  double mean_dev = dev_sum / dev_n;
  return {mean_dev < 0.05,
          fmt("mean |y - 1/(1-x)| = %.4f over %d points, 6 configs", mean_dev,
              dev_n)};
}

// 3: parameter recovery on synthetic grids, noiseless then 1% noise.
Check fit_round_trip() {
  double worst_clean = 0.0, worst_noisy = 0.0;

  ServingCoefficients truth{0.16, 0.032};
  for (int noisy = 0; noisy <= 1; ++noisy) {
    std::mt19937_64 nrng(1234);
    SweepDataset ds;
    ds.config = {"m", "h", 16, 64, DecodingMode::dense, {}, {}};
    for (int i = 0; i < 12; ++i) {
      LoadPoint p;
      p.rps = (i + 1) * 0.95 / (12 * truth.c2);
      p.mean_latency = predict_latency(truth, p.rps);
      if (noisy) p.mean_latency *= 1.0 + 0.01 * uni(nrng, -1.0, 1.0);
      p.n_requests = 1000;
      ds.points.push_back(p);
    }
    auto f = fit_basic(ds);
    double& worst = noisy ? worst_noisy : worst_clean;
    worst = std::max(worst, std::abs(f.param("c1") - truth.c1) / truth.c1);
    worst = std::max(worst, std::abs(f.param("c2") - truth.c2) / truth.c2);
  }

  SpecCostCoefficients tc;
  tc.c1p = 0.02;
  tc.c1v = 0.003;
  tc.c1d = 0.0004;
  tc.c2p = 0.0002;
  tc.c2v = 0.0006;
  tc.c2d = 0.00008;
  const int g = 64;
  const char* names[] = {"c1p", "c1v", "c1d", "c2p", "c2v", "c2d"};
  const double tv[] = {tc.c1p, tc.c1v, tc.c1d, tc.c2p, tc.c2v, tc.c2d};
  for (int noisy = 0; noisy <= 1; ++noisy) {
    std::mt19937_64 nrng(1234);
    std::vector<SweepDataset> sets;
    for (double a : {0.5, 0.7, 0.9})
      for (int k : {1, 2, 4}) {
        SweepDataset ds;
        ds.config = {"m", "h", 16, g, DecodingMode::sd, a, k};
        auto eff = effective_coefficients(tc, {a, k}, g);
        for (int i = 0; i < 12; ++i) {
          LoadPoint p;
          p.rps = (i + 1) * 0.95 / (12 * eff.c2);
          p.mean_latency = predict_sd_latency(tc, {a, k}, g, p.rps);
          if (noisy) p.mean_latency *= 1.0 + 0.01 * uni(nrng, -1.0, 1.0);
          p.n_requests = 1000;
          ds.points.push_back(p);
        }
        sets.push_back(ds);
      }
    auto f = fit_spec(sets);
    double& worst = noisy ? worst_noisy : worst_clean;
    for (int i = 0; i < 6; ++i)
      worst = std::max(worst, std::abs(f.param(names[i]) - tv[i]) / tv[i]);
  }

  bool pass = worst_clean < 0.01 && worst_noisy < 0.10;
  return {pass, fmt("worst param error: noiseless %.2e (limit 1%%), 1%% noise "
                    "%.4f (limit 10%%)",
                    worst_clean, worst_noisy)};
}

// 4: per-(alpha, k) two-parameter fits track the joint six-parameter fit's
// effective coefficients on simulated sweeps.
Check effective_coefficient_consistency() {
  StepCosts costs;
  costs.verify = {0.003, 0.0006};
  costs.draft = {0.0004, 0.00008};
  std::vector<std::pair<double, int>> grid = {
      {0.6, 1}, {0.6, 3}, {0.6, 5}, {0.8, 1}, {0.8, 3},
      {0.8, 5}, {1.0, 1}, {1.0, 3}, {1.0, 5}};
  std::vector<SweepDataset> sets;
  for (auto [a, k] : grid) {
    SimConfig sc;
    sc.costs = costs;
    sc.workload = {"m", "h", 16, 256, DecodingMode::sd, a, k};
    sc.seed = 7 + int(a * 10) * 100 + k;
    sc.warmup_requests = 200;
    sc.measured_requests = 2000;
    sets.push_back(run_sweep(sc));
  }
  auto jc = spec_cost_coefficients(fit_spec(sets));
  std::vector<double> c1_obs, c2_obs, c1_pred, c2_pred;
  for (size_t i = 0; i < grid.size(); ++i) {
    auto sv = serving_coefficients(fit_basic(sets[i]));
    auto eff = effective_coefficients(jc, {grid[i].first, grid[i].second}, 256);
    c1_obs.push_back(sv.c1);
    c2_obs.push_back(sv.c2);
    c1_pred.push_back(eff.c1);
    c2_pred.push_back(eff.c2);
  }
  double r2c1 = r_squared(c1_obs, c1_pred);
  double r2c2 = r_squared(c2_obs, c2_pred);
  return {r2c1 >= 0.95 && r2c2 >= 0.95,
          fmt("r2(C1) = %.5f, r2(C2) = %.5f over 9 (alpha, k) cells", r2c1,
              r2c2)};
}

// 5: empirical accepted tokens per cycle match the geometric-series mean.
Check acceptance_length_match() {
  double worst = 0.0;
  double worst_a = 0.0;
  int worst_k = 0;
  for (double a : {0.5, 0.7, 0.9, 1.0})
    for (int k = 1; k <= 10; ++k) {
      Rng rng(0xACCE5500 + int(a * 10) * 100 + k);
      const long n = 200000;
      double sum = 0.0;
      for (long i = 0; i < n; ++i) sum += sample_accepted({a, k}, rng);
      double want = expected_accept_length({a, k});
      double rel = std::abs(sum / n - want) / want;
      if (rel > worst) {
        worst = rel;
        worst_a = a;
        worst_k = k;
      }
    }
  return {worst < 0.005, fmt("worst rel error %.4f%% at alpha=%.1f k=%d, "
                             "200000 cycles per cell",
                             100 * worst, worst_a, worst_k)};
}

// 6: measured concurrency equals rps * latency on every stable open-loop run.
Check conservation_law() {
  double worst = 0.0;
  int checked = 0, flagged = 0;
  for (auto arrival : {ArrivalProcess::constant_rate, ArrivalProcess::poisson})
    for (double frac : {0.3, 0.6, 0.85}) {
      auto sc = dense_sim({0.002, 0.0005}, 128, 21);
      sc.arrival = arrival;
      sc.measured_requests = 3000;
      auto r = run_sim(sc, frac / (128 * 0.0005), 3);
      if (r.saturated) {
        ++flagged;
        continue;
      }
      double want = r.achieved_rps * r.mean_latency;
      worst = std::max(worst,
                       std::abs(r.time_avg_concurrency - want) / want);
      ++checked;
    }
  bool pass = checked >= 3 && worst < 0.03;
  return {pass, fmt("worst |B - rps*L| / (rps*L) = %.4f%% over %d stable runs "
                    "(%d flagged saturated)",
                    100 * worst, checked, flagged)};
}

// 7: the coverage-aware model beats the base law on sparse-activation sweeps,
// with the improvement concentrated at low load.
Check coverage_model_improvement() {
  SimConfig sc;
  sc.costs.verify = {0.001, 0.0002};
  sc.routing = MoeRouting{1, 8};
  StepCosts sat;
  sat.verify = {0.004, 0.0};
  sc.moe_saturation = sat;
  sc.workload = {"m", "h", 16, 64, DecodingMode::dense, {}, {}};
  sc.seed = 11;
  sc.warmup_requests = 200;
  sc.measured_requests = 2000;
  auto sweep = run_sweep(sc);
  auto f1 = fit_basic(sweep);
  auto f4 = fit_moe(sweep, *sc.routing);
  auto c1 = serving_coefficients(f1);
  auto c4 = moe_coefficients(f4);

  std::vector<double> gains;
  double worst_resid = 0.0;
  for (const auto& p : sweep.points) {
    if (p.saturated) continue;
    double pred1 = predict_latency(c1, p.rps);
    double pred4 = predict_moe_latency(c4, *sc.routing, p.rps);
    gains.push_back(std::abs(p.mean_latency - pred1) -
                    std::abs(p.mean_latency - pred4));
    double phi = expert_coverage(*sc.routing, p.rps * pred4);
    double closed = (c4.c1u + phi * c4.c1s) /
                    (1.0 - p.rps * (c4.c2u + phi * c4.c2s));
    worst_resid = std::max(worst_resid, std::abs(pred4 - closed) / pred4);
  }
  size_t arg = 0;
  for (size_t i = 1; i < gains.size(); ++i)
    if (gains[i] > gains[arg]) arg = i;
  bool pass = f4.r2 > f1.r2 && arg < gains.size() / 2 &&
              worst_resid < 1e-9;
  return {pass, fmt("r2 %.4f -> %.5f, best gain at point %zu of %zu, max "
                    "fixed-point residual %.1e",
                    f1.r2, f4.r2, arg, gains.size(), worst_resid)};
}

// 8: the sign of 1 - c2 ratio decides how the emitted curve moves with load.
Check load_sensitivity_sign() {
  auto tmp = std::filesystem::temp_directory_path() /
             ("sdserve_accept_" + std::to_string(::getpid()) + ".csv");
  ServingCoefficients dense{1.0, 0.1};
  bool pass = true;
  std::string detail;
  for (double c2r : {0.8, 1.0, 1.2}) {
    ReportInputs in;
    in.dense = dense;
    in.sd = ServingCoefficients{0.8, dense.c2 * c2r};
    for (int i = 0; i < 17; ++i) in.rps_grid.push_back(8.0 * i / 16);
    emit_report(ReportKind::speedup_curve, in, tmp.string());
    std::ifstream f(tmp);
    std::string line;
    std::getline(f, line);  // header
    std::vector<double> curve;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      size_t a = line.find(',');
      size_t b = line.find(',', a + 1);
      size_t c = line.find(',', b + 1);
      curve.push_back(std::stod(line.substr(b + 1, c - b - 1)));
    }
    bool inc = true, dec = true, flat = true;
    for (size_t i = 1; i < curve.size(); ++i) {
      inc = inc && curve[i] > curve[i - 1];
      dec = dec && curve[i] < curve[i - 1];
      flat = flat && std::abs(curve[i] - curve[i - 1]) < 1e-12;
    }
    bool ok = (c2r < 1.0 && inc) || (c2r == 1.0 && flat) || (c2r > 1.0 && dec);
    pass = pass && ok && curve.size() == 17;
    detail += fmt("c2r=%.1f %s; ", c2r,
                  inc ? "increasing" : (dec ? "decreasing" : "constant"));
  }
  std::filesystem::remove(tmp);
  detail += "17-point grid";
  return {pass, detail};
}

// 9: the draft-length optimizer agrees with brute force, and the winning k
// shrinks (or holds) under load when drafting has a per-batch cost.
Check draft_length_optimizer() {
  std::mt19937_64 rng(42);
  int mismatches = 0, shrink_ok = 0, shrink_tot = 0;
  const int g = 64, n_inst = 1000;
  for (int t = 0; t < n_inst; ++t) {
    SpecCostCoefficients c;
    c.c1v = loguni(rng, 1e-4, 1e-2);
    c.c2v = loguni(rng, 1e-5, 1e-3);
    double rho1 = loguni(rng, 0.01, 0.3);
    c.c1d = rho1 * c.c1v;
    c.c2d = rho1 * loguni(rng, 1.0, 20.0) * c.c2v;
    c.c1p = loguni(rng, 1e-4, 1e-2);
    c.c2p = loguni(rng, 1e-6, 1e-4);
    double alpha = uni(rng, 0.5, 0.95);
    double c2min = 1e300;
    for (int k = 0; k <= 10; ++k)
      c2min = std::min(c2min, effective_coefficients(c, {alpha, k}, g).c2);
    double rps = uni(rng, 0.0, 0.9) / c2min;
    int got = optimal_draft_length(c, alpha, g, rps, 10);
    int want = -1;
    double best = 1e300;
    for (int k = 0; k <= 10; ++k) {
      auto eff = effective_coefficients(c, {alpha, k}, g);
      if (rps * eff.c2 >= 1.0) continue;
      double latency = eff.c1 / (1.0 - rps * eff.c2);
      if (latency < best) {
        best = latency;
        want = k;
      }
    }
    if (got != want) ++mismatches;
    int k0 = optimal_draft_length(c, alpha, g, 0.0, 10);
    int ksat = optimal_draft_length(c, alpha, g, 0.99 / c2min, 10);
    if (c.c2d > 0) {
      ++shrink_tot;
      if (k0 >= ksat) ++shrink_ok;
    }
  }
  double shrink_frac = double(shrink_ok) / shrink_tot;
  bool pass = mismatches == 0 && shrink_frac >= 0.90;
  return {pass, fmt("%d/%d brute-force mismatches, k shrinks under load in "
                    "%.1f%% of instances",
                    mismatches, n_inst, 100 * shrink_frac)};
}

// 10: held-out predictive r2 stays close to the full fit on noisy tables.
Check held_out_stability() {
  std::mt19937_64 nrng(777);
  std::vector<ScalingPoint> pts;
  for (int i = 0; i < 16; ++i) {
    double x = 0.5e9 * (i + 1);
    double y = (2e-12 * x + 0.01) * (1.0 + 0.05 * uni(nrng, -1.0, 1.0));
    pts.push_back({x, y});
  }
  auto full = fit_scaling_trend(pts, Predictor::verifier_params);
  double worst = 0.0;
  for (int n : {1, 2, 4}) {
    auto s = leave_n_out(pts, n, Predictor::verifier_params);
    worst = std::max(worst, std::abs(s.r2 - full.r2));
  }
  return {worst < 0.05, fmt("full r2 %.4f, max held-out gap %.4f over "
                            "n in {1, 2, 4}",
                            full.r2, worst)};
}

}  // namespace

int main() {
  struct Entry {
    const char* label;
    Check (*fn)();
    double limit_s;  // 0 = no limit
  };
  const Entry entries[] = {
      {"speedup identity", speedup_identity, 1.0},
      {"universal collapse", universal_collapse, 120.0},
      {"fit round-trip", fit_round_trip, 60.0},
      {"effective coefficients", effective_coefficient_consistency, 300.0},
      {"accept length", acceptance_length_match, 60.0},
      {"conservation law", conservation_law, 0.0},
      {"coverage model", coverage_model_improvement, 300.0},
      {"load sensitivity sign", load_sensitivity_sign, 0.0},
      {"draft-length optimizer", draft_length_optimizer, 0.0},
      {"held-out stability", held_out_stability, 0.0},
  };
  int failures = 0;
  int idx = 0;
  for (const auto& e : entries) {
    ++idx;
    auto t0 = std::chrono::steady_clock::now();
    Check c;
    try {
      c = e.fn();
    } catch (const std::exception& ex) {
      c = {false, fmt("exception: %s", ex.what())};
    }
    double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (e.limit_s > 0 && elapsed > e.limit_s) {
      c.pass = false;
      c.detail += fmt("; over %.0fs budget", e.limit_s);
    }
    printf("criterion %d (%s): %s (%s, %.2fs)\n", idx, e.label,
           c.pass ? "PASS" : "FAIL", c.detail.c_str(), elapsed);
    if (!c.pass) ++failures;
  }
  printf("%d of 10 criteria passed\n", 10 - failures);
  return failures;
}
