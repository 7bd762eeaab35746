#include "sdserve/fit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "sdserve/model.hpp"
#include "sdserve/moe_model.hpp"

namespace sdserve {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double clamp_param(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

double accept_length(double alpha, int k) {
  if (k == 0 || alpha == 0.0) return 1.0;
  if (alpha >= 1.0) return k + 1.0;
  return (1.0 - std::pow(alpha, k + 1)) / (1.0 - alpha);
}

// Residual vector (model - y). Evaluations that throw or go non-finite get a
// large constant wall so trial steps into undefined territory are rejected
// instead of crashing the search.
std::vector<double> eval_residuals(const CurveModel& model,
                                   const std::vector<CurvePoint>& data,
                                   std::span<const double> params,
                                   bool relative) {
  std::vector<double> r(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    double pred;
    try {
      pred = model(std::span<const double>(data[i].x), params);
    } catch (const Error&) {
      pred = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(pred)) {
      r[i] = 1e6 * (1.0 + std::abs(data[i].y));
      continue;
    }
    double d = pred - data[i].y;
    r[i] = relative ? d / std::max(std::abs(data[i].y), 1e-300) : d;
  }
  return r;
}

double sum_sq(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

std::string to_string(LatencyColumn column) {
  switch (column) {
    case LatencyColumn::mean: return "mean";
    case LatencyColumn::p95: return "p95";
    case LatencyColumn::p99: return "p99";
  }
  return "mean";
}

LatencyColumn latency_column_from_string(const std::string& s) {
  if (s == "mean") return LatencyColumn::mean;
  if (s == "p95") return LatencyColumn::p95;
  if (s == "p99") return LatencyColumn::p99;
  throw ValidationError("unknown latency column: '" + s + "'");
}

double FitResult::param(const std::string& name) const {
  for (std::size_t i = 0; i < param_names.size(); ++i) {
    if (param_names[i] == name) return params[i];
  }
  throw SchemaError("fit has no parameter '" + name + "'");
}

ServingCoefficients serving_coefficients(const FitResult& fit) {
  return {fit.param("c1"), fit.param("c2")};
}

SpecCostCoefficients spec_cost_coefficients(const FitResult& fit) {
  return {fit.param("c1p"), fit.param("c1v"), fit.param("c1d"),
          fit.param("c2p"), fit.param("c2v"), fit.param("c2d")};
}

MoeCoefficients moe_coefficients(const FitResult& fit) {
  return {fit.param("c1u"), fit.param("c1s"), fit.param("c2u"),
          fit.param("c2s")};
}

MoeSpecCoefficients moe_spec_coefficients(const FitResult& fit) {
  return {fit.param("c1p"), fit.param("c1vu"), fit.param("c1vs"),
          fit.param("c1d"), fit.param("c2p"), fit.param("c2vu"),
          fit.param("c2vs"), fit.param("c2d")};
}

LeastSquaresResult least_squares(const CurveModel& model,
                                 const std::vector<CurvePoint>& data,
                                 std::vector<double> init,
                                 std::vector<double> lower,
                                 std::vector<double> upper,
                                 const LeastSquaresOptions& opts) {
  const std::size_t n = data.size();
  const std::size_t np = init.size();
  if (np == 0) throw ValidationError("least_squares needs >= 1 parameter");
  constexpr double kInfBound = std::numeric_limits<double>::infinity();
  if (lower.empty()) lower.assign(np, -kInfBound);
  if (upper.empty()) upper.assign(np, kInfBound);
  if (lower.size() != np || upper.size() != np)
    throw ValidationError("bounds must match parameter count");
  if (n < np)
    throw InsufficientDataError("fewer points than free parameters");
  for (std::size_t j = 0; j < np; ++j) {
    if (lower[j] > upper[j]) throw ValidationError("lower bound above upper");
    init[j] = clamp_param(init[j], lower[j], upper[j]);
  }

  std::vector<double> params = init;
  std::vector<double> r = eval_residuals(model, data, params, opts.relative_residuals);
  double cost = sum_sq(r);

  LeastSquaresResult best;
  best.params = params;
  best.cost = cost;
  best.residuals = r;
  best.converged = false;
  best.iterations = 0;

  double lambda = 1e-3;
  constexpr double kLambdaMax = 1e14;

  auto jacobian = [&](Eigen::MatrixXd& jac) {
    for (std::size_t j = 0; j < np; ++j) {
      double pj = params[j];
      double h = 1e-7 * std::max(std::abs(pj), 1e-8);
      double hi = clamp_param(pj + h, lower[j], upper[j]);
      double lo = clamp_param(pj - h, lower[j], upper[j]);
      if (hi == lo) {
        for (std::size_t i = 0; i < n; ++i) jac(i, j) = 0.0;
        continue;
      }
      std::vector<double> ph = params, pl = params;
      ph[j] = hi;
      pl[j] = lo;
      auto rh = eval_residuals(model, data, ph, opts.relative_residuals);
      auto rl = eval_residuals(model, data, pl, opts.relative_residuals);
      double inv = 1.0 / (hi - lo);
      for (std::size_t i = 0; i < n; ++i) jac(i, j) = (rh[i] - rl[i]) * inv;
    }
  };

  Eigen::MatrixXd jac(n, np);
  int iter = 0;
  bool converged = false;
  for (; iter < opts.max_iterations && !converged; ++iter) {
    jacobian(jac);
    if (!jac.allFinite()) throw SingularJacobianError("non-finite Jacobian");
    Eigen::VectorXd rv = Eigen::Map<const Eigen::VectorXd>(r.data(), n);
    Eigen::MatrixXd a = jac.transpose() * jac;
    Eigen::VectorXd grad = jac.transpose() * rv;
    if (grad.lpNorm<Eigen::Infinity>() == 0.0) {
      converged = true;
      break;
    }
    double diag_max = a.diagonal().maxCoeff();
    double mu = 1e-12 * std::max(diag_max, 1e-300);

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd m = a;
      m.diagonal() += lambda * (a.diagonal().array() + mu).matrix();
      Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
      Eigen::VectorXd step;
      bool solve_ok = ldlt.info() == Eigen::Success;
      if (solve_ok) {
        step = ldlt.solve(-grad);
        solve_ok = step.allFinite();
      }
      if (!solve_ok) {
        if (lambda >= kLambdaMax)
          throw SingularJacobianError("normal equations unsolvable");
        lambda = std::min(lambda * 10.0, kLambdaMax);
        continue;
      }

      std::vector<double> trial(np);
      double rel_step = 0.0;
      for (std::size_t j = 0; j < np; ++j) {
        trial[j] = clamp_param(params[j] + step(j), lower[j], upper[j]);
        double scale = std::max({std::abs(params[j]), std::abs(trial[j]), 1e-12});
        rel_step = std::max(rel_step, std::abs(trial[j] - params[j]) / scale);
      }
      if (rel_step < opts.param_tol) {
        // Cannot move (tiny or fully clamped step): settled.
        converged = true;
        break;
      }

      auto rt = eval_residuals(model, data, trial, opts.relative_residuals);
      double cost_t = sum_sq(rt);
      if (cost_t < cost) {
        double rel_cost = (cost - cost_t) / std::max(cost, 1e-300);
        params = std::move(trial);
        r = std::move(rt);
        cost = cost_t;
        lambda = std::max(lambda * 0.3, 1e-14);
        if (cost < best.cost) {
          best.params = params;
          best.cost = cost;
          best.residuals = r;
        }
        if (rel_step < opts.param_tol || rel_cost < opts.cost_tol ||
            cost == 0.0) {
          converged = true;
        }
        accepted = true;
      } else {
        if (lambda >= kLambdaMax) {
          // Damping exhausted without progress: accept the stall.
          converged = true;
          break;
        }
        lambda = std::min(lambda * 2.0, kLambdaMax);
      }
    }
  }

  if (cost <= best.cost) {
    best.params = params;
    best.cost = cost;
    best.residuals = r;
  }
  best.converged = converged;
  best.iterations = iter;
  return best;
}

namespace {

struct ObsPoint {
  double alpha = 0.0;
  int k = 0;
  double rps = 0.0;
  double latency = 0.0;
};

double column_value(const LoadPoint& p, LatencyColumn col) {
  switch (col) {
    case LatencyColumn::mean:
      return p.mean_latency;
    case LatencyColumn::p95:
      if (!p.p95_latency)
        throw InsufficientDataError("point lacks p95 latency");
      return *p.p95_latency;
    case LatencyColumn::p99:
      if (!p.p99_latency)
        throw InsufficientDataError("point lacks p99 latency");
      return *p.p99_latency;
  }
  return p.mean_latency;
}

// Non-saturated points of one dataset in fitting form.
std::vector<ObsPoint> usable_points(const SweepDataset& ds,
                                    LatencyColumn col) {
  ds.validate();
  std::vector<ObsPoint> out;
  for (const auto& p : ds.points) {
    if (p.saturated) continue;
    ObsPoint o;
    o.alpha = ds.config.alpha.value_or(0.0);
    o.k = ds.config.draft_k.value_or(0);
    o.rps = p.rps;
    o.latency = column_value(p, col);
    if (!(o.latency > 0.0))
      throw ValidationError("latency values must be > 0");
    out.push_back(o);
  }
  return out;
}

// r2 with a defined value for zero-variance observations (exact flat fits
// count as 1).
double safe_r2(const std::vector<double>& obs, const std::vector<double>& pred) {
  double mean = std::accumulate(obs.begin(), obs.end(), 0.0) / obs.size();
  double sstot = 0.0, ssres = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    sstot += (obs[i] - mean) * (obs[i] - mean);
    ssres += (obs[i] - pred[i]) * (obs[i] - pred[i]);
  }
  if (sstot == 0.0) return ssres < 1e-20 ? 1.0 : 0.0;
  return 1.0 - ssres / sstot;
}

FitResult finish_fit(std::string model_name,
                     std::vector<std::string> names,
                     const LeastSquaresResult& ls,
                     const CurveModel& model,
                     const std::vector<CurvePoint>& data,
                     const FitOptions& opts, std::string notes) {
  FitResult out;
  out.model = std::move(model_name);
  out.param_names = std::move(names);
  out.params = ls.params;
  out.converged = ls.converged;
  out.iterations = ls.iterations;
  out.latency_column = opts.column;
  out.n_points = int(data.size());
  out.notes = std::move(notes);

  std::vector<double> obs(data.size()), pred(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    obs[i] = data[i].y;
    pred[i] = model(std::span<const double>(data[i].x),
                    std::span<const double>(ls.params));
    out.residuals.push_back(obs[i] - pred[i]);
  }
  double ss = 0.0;
  for (double r : out.residuals) ss += r * r;
  out.rmse = std::sqrt(ss / data.size());
  out.r2 = safe_r2(obs, pred);
  return out;
}

CurveModel basic_model() {
  return [](std::span<const double> x, std::span<const double> p) {
    double denom = 1.0 - x[0] * p[1];
    return p[0] / std::max(denom, 1e-9);
  };
}

// Shared multi-start wrapper for the joint fits; basin capture is real when
// several parameters trade off against each other.
LeastSquaresResult multi_start(const CurveModel& model,
                               const std::vector<CurvePoint>& data,
                               const std::vector<double>& init,
                               const std::vector<double>& lower,
                               const std::vector<double>& upper,
                               const LeastSquaresOptions& opts) {
  static constexpr double kFactors[] = {0.25, 0.5, 1.0, 2.0, 4.0};
  LeastSquaresResult best;
  bool have = false, have_converged = false;
  std::string last_message = "all starts failed";
  for (double f : kFactors) {
    std::vector<double> start(init.size());
    for (std::size_t j = 0; j < init.size(); ++j)
      start[j] = clamp_param(init[j] * f, lower[j], upper[j]);
    LeastSquaresResult r;
    try {
      r = least_squares(model, data, start, lower, upper, opts);
    } catch (const SingularJacobianError& e) {
      last_message = e.what();
      continue;
    }
    bool better = !have ||
                  (r.converged && !have_converged) ||
                  (r.converged == have_converged && r.cost < best.cost);
    if (have_converged && !r.converged) better = false;
    if (better) {
      best = std::move(r);
      have = true;
      have_converged = best.converged;
    }
  }
  if (!have) throw SingularJacobianError(last_message);
  return best;
}

}  // namespace

FitResult fit_basic(const SweepDataset& dataset, const FitOptions& opts) {
  auto pts = usable_points(dataset, opts.column);
  if (pts.size() < 3)
    throw InsufficientDataError("fit needs >= 3 non-saturated points");

  double rps_max = 0.0, l_at_max = pts.front().latency;
  double l_min = kInf;
  for (const auto& p : pts) {
    if (p.rps >= rps_max) {
      rps_max = p.rps;
      l_at_max = p.latency;
    }
    l_min = std::min(l_min, p.latency);
  }
  double c1_0 = l_min;
  double c2_hi = rps_max > 0.0 ? (1.0 - 1e-6) / rps_max : kInf;
  double c2_0 = 0.0;
  if (rps_max > 0.0)
    c2_0 = clamp_param((1.0 - c1_0 / l_at_max) / rps_max, 0.0, c2_hi);

  std::vector<CurvePoint> data;
  for (const auto& p : pts) data.push_back({{p.rps}, p.latency});

  CurveModel model = basic_model();
  LeastSquaresOptions ls_opts;
  ls_opts.relative_residuals = opts.relative_residuals;
  auto ls = least_squares(model, data, {c1_0, c2_0}, {1e-12, 0.0},
                          {kInf, c2_hi}, ls_opts);
  if (rps_max > 0.0 && ls.params[1] >= c2_hi * (1.0 - 1e-12))
    throw StabilityError(
        "fitted c2 pins the stability bound: data looks saturated in range");

  return finish_fit("eq1", {"c1", "c2"}, ls, model, data, opts,
                    "init: c1=min latency, c2 from endpoint; bounds: c1>0, "
                    "0<=c2<1/rps_max");
}

FitResult fit_spec(const std::vector<SweepDataset>& datasets,
                   const FitOptions& opts) {
  if (datasets.empty()) throw InsufficientDataError("no datasets");
  const auto& ref = datasets.front().config;
  std::set<double> alphas;
  std::set<int> ks;
  std::vector<ObsPoint> pts;
  for (const auto& ds : datasets) {
    if (ds.config.mode != DecodingMode::sd)
      throw ValidationError("speculation fit requires sd-mode datasets");
    if (ds.config.prefill_tokens != ref.prefill_tokens ||
        ds.config.decode_tokens != ref.decode_tokens)
      throw ValidationError("datasets must share prefill/decode shape");
    auto sub = usable_points(ds, opts.column);
    pts.insert(pts.end(), sub.begin(), sub.end());
    alphas.insert(*ds.config.alpha);
    ks.insert(*ds.config.draft_k);
  }
  if (pts.size() < 6)
    throw InsufficientDataError("joint fit needs >= 6 points");
  const double g = ref.decode_tokens;
  bool degenerate_grid = alphas.size() < 2 || ks.size() < 2;

  // Initialize from the densest condition: the dataset whose expected accept
  // length is smallest behaves most like plain decoding.
  double c1_0 = kInf, c2_0 = 0.0, e_0 = 1.0;
  int k_0 = 1;
  {
    std::size_t pick = 0;
    double best_e = kInf;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      const auto& c = datasets[i].config;
      double e = accept_length(*c.alpha, *c.draft_k);
      if (e < best_e) {
        best_e = e;
        pick = i;
      }
    }
    const auto& c = datasets[pick].config;
    e_0 = best_e;
    k_0 = *c.draft_k;
    try {
      FitResult base = fit_basic(datasets[pick], opts);
      c1_0 = base.param("c1");
      c2_0 = base.param("c2");
    } catch (const Error&) {
      double rps_max = 0.0;
      for (const auto& p : pts) {
        c1_0 = std::min(c1_0, p.latency);
        rps_max = std::max(rps_max, p.rps);
      }
      c2_0 = rps_max > 0.0 ? 0.5 / rps_max : 0.0;
    }
  }
  double cycles_0 = g / e_0;
  double split = 1.0 / (cycles_0 * (1.0 + 0.01 * k_0));
  std::vector<double> init = {0.1 * c1_0,         0.9 * c1_0 * split,
                              0.009 * c1_0 * split, 0.1 * c2_0,
                              0.9 * c2_0 * split, 0.009 * c2_0 * split};

  std::vector<CurvePoint> data;
  for (const auto& p : pts)
    data.push_back({{p.alpha, double(p.k), p.rps}, p.latency});

  CurveModel model = [g](std::span<const double> x,
                         std::span<const double> p) {
    double e = accept_length(x[0], int(x[1]));
    double cycles = g / e;
    double c1e = p[0] + cycles * (p[1] + x[1] * p[2]);
    double c2e = p[3] + cycles * (p[4] + x[1] * p[5]);
    double denom = 1.0 - x[2] * c2e;
    return c1e / std::max(denom, 1e-9);
  };

  LeastSquaresOptions ls_opts;
  ls_opts.relative_residuals = opts.relative_residuals;
  auto ls = multi_start(model, data, init, std::vector<double>(6, 0.0),
                        std::vector<double>(6, kInf), ls_opts);

  FitResult out = finish_fit(
      "eq3", {"c1p", "c1v", "c1d", "c2p", "c2v", "c2d"}, ls, model, data,
      opts,
      "init: basic fit of densest condition split 10/90, drafter at 1% of "
      "verifier; 5 deterministic starts x{0.25,0.5,1,2,4}; bounds: all >= 0");
  out.identifiability_warning = degenerate_grid;
  return out;
}

FitResult fit_moe(const SweepDataset& dataset, const MoeRouting& routing,
                  const FitOptions& opts) {
  routing.validate();
  auto pts = usable_points(dataset, opts.column);
  if (pts.size() < 4)
    throw InsufficientDataError("coverage fit needs >= 4 points");

  FitResult base = fit_basic(dataset, opts);
  double c1_0 = base.param("c1");
  double c2_0 = base.param("c2");
  std::vector<double> init = {c1_0, 0.1 * c1_0, c2_0, 0.1 * c2_0};

  std::vector<CurvePoint> data;
  for (const auto& p : pts) data.push_back({{p.rps}, p.latency});

  CurveModel model = [routing](std::span<const double> x,
                               std::span<const double> p) {
    MoeCoefficients c{p[0], p[1], p[2], p[3]};
    return predict_moe_latency(c, routing, x[0]);
  };

  LeastSquaresOptions ls_opts;
  ls_opts.relative_residuals = opts.relative_residuals;
  auto ls = multi_start(model, data, init, {1e-12, 0.0, 0.0, 0.0},
                        std::vector<double>(4, kInf), ls_opts);

  FitResult out = finish_fit(
      "eq4", {"c1u", "c1s", "c2u", "c2s"}, ls, model, data, opts,
      "init: basic fit with saturation increments at 10%; 5 deterministic "
      "starts x{0.25,0.5,1,2,4}; bounds: all >= 0");
  out.identifiability_warning = routing.m == routing.M;
  return out;
}

FitResult fit_moe_spec(const std::vector<SweepDataset>& datasets,
                       const MoeRouting& routing, const FitOptions& opts) {
  routing.validate();
  FitResult base = fit_spec(datasets, opts);
  double c1v = base.param("c1v");
  double c2v = base.param("c2v");
  std::vector<double> init = {base.param("c1p"), c1v, 0.1 * c1v,
                              base.param("c1d"), base.param("c2p"), c2v,
                              0.1 * c2v,         base.param("c2d")};

  std::vector<ObsPoint> pts;
  for (const auto& ds : datasets) {
    auto sub = usable_points(ds, opts.column);
    pts.insert(pts.end(), sub.begin(), sub.end());
  }
  if (pts.size() < 8)
    throw InsufficientDataError("joint coverage fit needs >= 8 points");
  const int g = datasets.front().config.decode_tokens;

  std::vector<CurvePoint> data;
  for (const auto& p : pts)
    data.push_back({{p.alpha, double(p.k), p.rps}, p.latency});

  CurveModel model = [routing, g](std::span<const double> x,
                                  std::span<const double> p) {
    MoeSpecCoefficients c{p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]};
    SpecParams spec{x[0], int(x[1])};
    return predict_moe_sd_latency(c, routing, spec, g, x[2]);
  };

  LeastSquaresOptions ls_opts;
  ls_opts.relative_residuals = opts.relative_residuals;
  auto ls = multi_start(model, data, init, std::vector<double>(8, 0.0),
                        std::vector<double>(8, kInf), ls_opts);

  FitResult out = finish_fit(
      "eq5",
      {"c1p", "c1vu", "c1vs", "c1d", "c2p", "c2vu", "c2vs", "c2d"}, ls,
      model, data, opts,
      "init: joint speculation fit, verifier split with 10% saturation "
      "increment; 5 deterministic starts; bounds: all >= 0");
  out.identifiability_warning =
      routing.m == routing.M || base.identifiability_warning;
  return out;
}

double r_squared(std::span<const double> observed,
                 std::span<const double> predicted) {
  if (observed.size() != predicted.size())
    throw ValidationError("observed/predicted length mismatch");
  if (observed.size() < 2)
    throw InsufficientDataError("r_squared needs >= 2 values");
  double mean = 0.0;
  for (double v : observed) mean += v;
  mean /= observed.size();
  double sstot = 0.0, ssres = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    sstot += (observed[i] - mean) * (observed[i] - mean);
    ssres += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
  }
  if (sstot == 0.0)
    throw DegenerateError("observed values have zero variance");
  return 1.0 - ssres / sstot;
}

double effective_token_count(double prefill_tokens, double decode_tokens) {
  if (prefill_tokens < 0.0 || decode_tokens < 0.0)
    throw ValidationError("token counts must be >= 0");
  return prefill_tokens + decode_tokens / 2.0;
}

std::string to_string(Predictor predictor) {
  switch (predictor) {
    case Predictor::verifier_params: return "verifier_params";
    case Predictor::drafter_params: return "drafter_params";
    case Predictor::prefill_tokens: return "prefill_tokens";
    case Predictor::effective_tokens: return "effective_tokens";
  }
  return "verifier_params";
}

Predictor predictor_from_string(const std::string& s) {
  if (s == "verifier_params") return Predictor::verifier_params;
  if (s == "drafter_params") return Predictor::drafter_params;
  if (s == "prefill_tokens") return Predictor::prefill_tokens;
  if (s == "effective_tokens") return Predictor::effective_tokens;
  throw ValidationError("unknown predictor: '" + s + "'");
}

ScalingTrend fit_scaling_trend(const std::vector<ScalingPoint>& points,
                               Predictor kind) {
  if (points.size() < 2)
    throw InsufficientDataError("trend fit needs >= 2 points");
  double mx = 0.0, my = 0.0;
  for (const auto& p : points) {
    mx += p.predictor;
    my += p.coefficient;
  }
  mx /= points.size();
  my /= points.size();
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : points) {
    sxx += (p.predictor - mx) * (p.predictor - mx);
    sxy += (p.predictor - mx) * (p.coefficient - my);
    syy += (p.coefficient - my) * (p.coefficient - my);
  }
  if (sxx == 0.0)
    throw DegenerateError("predictor values have zero variance");
  ScalingTrend t;
  t.slope = sxy / sxx;
  t.intercept = my - t.slope * mx;
  t.predictor = kind;
  if (syy == 0.0) {
    t.r2 = 1.0;
  } else {
    double ssres = 0.0;
    for (const auto& p : points) {
      double d = p.coefficient - t.predict(p.predictor);
      ssres += d * d;
    }
    t.r2 = 1.0 - ssres / syy;
  }
  return t;
}

namespace {

std::uint64_t bounded_rand(std::mt19937_64& gen, std::uint64_t n) {
  std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = gen();
  } while (x >= limit);
  return x % n;
}

}  // namespace

LeaveNOutSummary leave_n_out(const std::vector<ScalingPoint>& configs, int n,
                             Predictor kind, const LeaveNOutOptions& opts) {
  const long count = long(configs.size());
  if (n < 1) throw ValidationError("n must be >= 1");
  if (n >= count)
    throw InsufficientDataError("n must be below the config count");
  if (count - n < 2)
    throw InsufficientDataError("need >= 2 configs left to fit the trend");

  long double total = 1.0L;
  bool huge = false;
  for (int i = 1; i <= n; ++i) {
    total = total * (count - n + i) / i;
    if (total > 4e18L) {
      huge = true;
      break;
    }
  }
  bool exhaustive = !huge && total <= (long double)opts.max_subsets;

  std::vector<std::vector<int>> folds;
  if (exhaustive) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
      folds.push_back(idx);
      int j = n - 1;
      while (j >= 0 && idx[j] == count - n + j) --j;
      if (j < 0) break;
      ++idx[j];
      for (int t = j + 1; t < n; ++t) idx[t] = idx[t - 1] + 1;
    }
  } else {
    std::mt19937_64 gen(opts.seed);
    std::vector<int> pool(count);
    for (long s = 0; s < opts.max_subsets; ++s) {
      std::iota(pool.begin(), pool.end(), 0);
      std::vector<int> pick(n);
      for (int j = 0; j < n; ++j) {
        long r = long(bounded_rand(gen, std::uint64_t(count - j)));
        std::swap(pool[j], pool[j + r]);
        pick[j] = pool[j];
      }
      std::sort(pick.begin(), pick.end());
      folds.push_back(std::move(pick));
    }
  }

  double full_mean = 0.0;
  for (const auto& c : configs) full_mean += c.coefficient;
  full_mean /= count;

  std::vector<double> pooled_obs, pooled_pred;
  double fold_sum = 0.0;
  double fold_min = kInf;
  long fold_r2_count = 0;

  for (const auto& held : folds) {
    std::vector<ScalingPoint> train;
    train.reserve(count - n);
    std::size_t hi = 0;
    for (long i = 0; i < count; ++i) {
      if (hi < held.size() && held[hi] == i) {
        ++hi;
        continue;
      }
      train.push_back(configs[i]);
    }
    ScalingTrend trend;
    try {
      trend = fit_scaling_trend(train, kind);
    } catch (const DegenerateError&) {
      continue;
    }
    double ssres = 0.0, sstot = 0.0;
    for (int i : held) {
      double y = configs[i].coefficient;
      double yhat = trend.predict(configs[i].predictor);
      pooled_obs.push_back(y);
      pooled_pred.push_back(yhat);
      ssres += (y - yhat) * (y - yhat);
      sstot += (y - full_mean) * (y - full_mean);
    }
    if (sstot > 0.0) {
      double fr2 = 1.0 - ssres / sstot;
      fold_sum += fr2;
      fold_min = std::min(fold_min, fr2);
      ++fold_r2_count;
    }
  }
  if (pooled_obs.empty())
    throw InsufficientDataError("every fold was degenerate");

  LeaveNOutSummary out;
  out.n = n;
  out.folds = long(folds.size());
  out.exhaustive = exhaustive;
  {
    double mean = 0.0;
    for (double v : pooled_obs) mean += v;
    mean /= pooled_obs.size();
    double sstot = 0.0, ssres = 0.0;
    for (std::size_t i = 0; i < pooled_obs.size(); ++i) {
      sstot += (pooled_obs[i] - mean) * (pooled_obs[i] - mean);
      ssres += (pooled_obs[i] - pooled_pred[i]) * (pooled_obs[i] - pooled_pred[i]);
    }
    out.r2_pooled = sstot == 0.0 ? (ssres < 1e-20 ? 1.0 : 0.0)
                                 : 1.0 - ssres / sstot;
  }
  out.r2_fold_mean = fold_r2_count > 0 ? fold_sum / fold_r2_count : 0.0;
  out.r2_fold_min = fold_r2_count > 0 ? fold_min : 0.0;
  out.r2 = opts.fold_average ? out.r2_fold_mean : out.r2_pooled;
  return out;
}

}  // namespace sdserve
