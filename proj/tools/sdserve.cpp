#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sdserve/fit.hpp"
#include "sdserve/io.hpp"
#include "sdserve/model.hpp"
#include "sdserve/moe_model.hpp"
#include "sdserve/sim.hpp"
#include "sdserve/spec_model.hpp"

using namespace sdserve;

namespace {

struct MoePair {
  int m = 0;
  int M = 0;
};

MoePair parse_moe(const std::string& s) {
  auto comma = s.find(',');
  if (comma == std::string::npos)
    throw ValidationError("--moe expects m,M (e.g. 1,8)");
  MoePair p;
  try {
    p.m = std::stoi(s.substr(0, comma));
    p.M = std::stoi(s.substr(comma + 1));
  } catch (const std::exception&) {
    throw ValidationError("--moe expects integers m,M");
  }
  MoeRouting{p.m, p.M}.validate();
  return p;
}

std::vector<double> parse_grid(const std::string& s) {
  double start = 0.0, stop = 0.0;
  int n = 0;
  auto c1 = s.find(':');
  auto c2 = s.find(':', c1 == std::string::npos ? c1 : c1 + 1);
  if (c1 == std::string::npos || c2 == std::string::npos)
    throw ValidationError("--rps-grid expects start:stop:n");
  try {
    start = std::stod(s.substr(0, c1));
    stop = std::stod(s.substr(c1 + 1, c2 - c1 - 1));
    n = std::stoi(s.substr(c2 + 1));
  } catch (const std::exception&) {
    throw ValidationError("--rps-grid expects numbers start:stop:n");
  }
  if (n < 2 || stop < start)
    throw ValidationError("--rps-grid needs n >= 2 and stop >= start");
  std::vector<double> grid;
  for (int i = 0; i < n; ++i)
    grid.push_back(start + (stop - start) * i / (n - 1));
  return grid;
}

SweepDataset merge_points(const std::vector<SweepDataset>& sets) {
  if (sets.size() == 1) return sets[0];
  throw ValidationError(
      "input holds several workload configs; this model fits exactly one");
}

// Six significant digits, trailing zeros kept ("4.00000").
std::string print_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%#.6g", v);
  return buf;
}

void print_run_check(const std::string& label, const SimResult& r) {
  double rl = r.achieved_rps * r.mean_latency;
  double rel = rl > 0.0 ? std::abs(r.time_avg_concurrency - rl) / rl : 0.0;
  std::cout << label << ": rps=" << format_double(r.achieved_rps)
            << " mean_latency_s=" << format_double(r.mean_latency)
            << " concurrency=" << format_double(r.time_avg_concurrency)
            << " rps*latency=" << format_double(rl)
            << " rel_err=" << format_double(rel)
            << (r.saturated ? " saturated" : "") << "\n";
}

LoadPoint to_point(const SimResult& r, double offered) {
  LoadPoint p;
  p.rps = offered > 0.0 ? offered : r.achieved_rps;
  p.mean_latency = r.mean_latency;
  p.p95_latency = r.p95_latency;
  p.p99_latency = r.p99_latency;
  p.n_requests = long(r.per_request.size());
  p.saturated = r.saturated;
  return p;
}

int run_fit(const std::string& input, const std::string& model,
            const std::string& column, const std::string& moe,
            const std::string& output, bool strict) {
  auto datasets = read_sweep_csv(input);
  FitOptions opts;
  opts.column = latency_column_from_string(column);

  FitResult fit;
  if (model == "eq1") {
    fit = fit_basic(merge_points(datasets), opts);
  } else if (model == "eq3") {
    fit = fit_spec(datasets, opts);
  } else if (model == "eq4" || model == "eq5") {
    if (moe.empty())
      throw MissingInputError("--moe m,M is required for " + model);
    auto p = parse_moe(moe);
    MoeRouting routing{p.m, p.M};
    fit = model == "eq4" ? fit_moe(merge_points(datasets), routing, opts)
                         : fit_moe_spec(datasets, routing, opts);
  } else {
    throw ValidationError("unknown model: '" + model + "'");
  }

  if (fit.identifiability_warning)
    std::cerr << "IdentifiabilityWarning: the (alpha, k) grid or routing "
                 "leaves some parameters weakly constrained\n";

  auto doc = coefficient_document(fit);
  doc.input_digests[std::filesystem::path(input).filename().string()] =
      file_digest_hex(input);
  doc.tool_version = kToolVersion;
  write_coefficients(doc, output);

  std::cout << "model=" << fit.model << " r2=" << format_double(fit.r2)
            << " rmse=" << format_double(fit.rmse)
            << " n_points=" << fit.n_points
            << " converged=" << (fit.converged ? "true" : "false") << "\n";
  if (strict && !fit.converged) return 2;
  return 0;
}

int run_predict(const std::string& coeffs_path, double rps,
                std::optional<double> alpha, std::optional<int> k,
                std::optional<int> g, const std::string& moe) {
  auto doc = read_coefficients(coeffs_path);
  double latency = 0.0;
  if (doc.kind == "eq1") {
    ServingCoefficients c{doc.params.at("c1"), doc.params.at("c2")};
    try {
      latency = predict_latency(c, rps);
    } catch (const StabilityError&) {
      throw StabilityError("rps " + format_double(rps) +
                           " is at or past the saturation rate 1/c2 = " +
                           format_double(saturation_rate(c)));
    }
  } else if (doc.kind == "eq3") {
    if (!k || !g)
      throw MissingInputError("eq3 prediction needs --k and --g");
    SpecCostCoefficients c;
    c.c1p = doc.params.at("c1p");
    c.c1v = doc.params.at("c1v");
    c.c1d = doc.params.at("c1d");
    c.c2p = doc.params.at("c2p");
    c.c2v = doc.params.at("c2v");
    c.c2d = doc.params.at("c2d");
    SpecParams spec{alpha.value_or(0.0), *k};
    try {
      latency = predict_sd_latency(c, spec, *g, rps);
    } catch (const StabilityError&) {
      auto eff = effective_coefficients(c, spec, *g);
      throw StabilityError("rps " + format_double(rps) +
                           " is at or past the saturation rate 1/c2 = " +
                           format_double(saturation_rate(eff)));
    }
  } else if (doc.kind == "eq4") {
    if (moe.empty()) throw MissingInputError("eq4 prediction needs --moe m,M");
    auto p = parse_moe(moe);
    MoeCoefficients c{doc.params.at("c1u"), doc.params.at("c1s"),
                      doc.params.at("c2u"), doc.params.at("c2s")};
    latency = predict_moe_latency(c, {p.m, p.M}, rps);
  } else if (doc.kind == "eq5") {
    if (moe.empty() || !k || !g)
      throw MissingInputError("eq5 prediction needs --moe, --k and --g");
    auto p = parse_moe(moe);
    MoeSpecCoefficients c{doc.params.at("c1p"),  doc.params.at("c1vu"),
                          doc.params.at("c1vs"), doc.params.at("c1d"),
                          doc.params.at("c2p"),  doc.params.at("c2vu"),
                          doc.params.at("c2vs"), doc.params.at("c2d")};
    latency =
        predict_moe_sd_latency(c, {p.m, p.M}, {alpha.value_or(0.0),
                                               k.value_or(0)},
                               g.value_or(1), rps);
  } else {
    throw VersionError("unknown document kind: '" + doc.kind + "'");
  }
  std::cout << print_g6(latency) << "\n";
  return 0;
}

int run_speedup(const std::string& dense_path, const std::string& sd_path,
                const std::string& grid_spec) {
  auto dense_doc = read_coefficients(dense_path);
  auto sd_doc = read_coefficients(sd_path);
  if (dense_doc.kind != "eq1" || sd_doc.kind != "eq1")
    throw MissingInputError("speedup expects two eq1 coefficient files");
  ServingCoefficients dense{dense_doc.params.at("c1"),
                            dense_doc.params.at("c2")};
  ServingCoefficients sd{sd_doc.params.at("c1"), sd_doc.params.at("c2")};

  ReportInputs inputs;
  inputs.dense = dense;
  inputs.sd = sd;
  inputs.rps_grid = parse_grid(grid_spec);

  auto tmp = std::filesystem::temp_directory_path() /
             ("sdserve_speedup_" + std::to_string(::getpid()) + ".csv");
  emit_report(ReportKind::speedup_curve, inputs, tmp.string());
  std::ifstream in(tmp);
  std::cout << in.rdbuf();
  std::filesystem::remove(tmp);

  auto ratios = cost_ratios(dense, sd);
  if (ratios.c2r < 1.0)
    std::cout << "# speedup increases with load (c2 ratio "
              << format_double(ratios.c2r) << " < 1)\n";
  else if (ratios.c2r > 1.0)
    std::cout << "# speedup decreases with load (c2 ratio "
              << format_double(ratios.c2r) << " > 1)\n";
  else
    std::cout << "# speedup constant with load (c2 ratio 1)\n";
  return 0;
}

int run_optimize_k(const std::string& coeffs_path, double alpha, int g,
                   double rps, int k_max) {
  auto doc = read_coefficients(coeffs_path);
  if (doc.kind != "eq3")
    throw MissingInputError("optimize-k expects an eq3 coefficient file");
  SpecCostCoefficients c;
  c.c1p = doc.params.at("c1p");
  c.c1v = doc.params.at("c1v");
  c.c1d = doc.params.at("c1d");
  c.c2p = doc.params.at("c2p");
  c.c2v = doc.params.at("c2v");
  c.c2d = doc.params.at("c2d");
  int k = optimal_draft_length(c, alpha, g, rps, k_max);
  double latency = predict_sd_latency(c, {alpha, k}, g, rps);
  if (k == 0)
    std::cout << "k=0 (speculation off), latency_s=" << print_g6(latency)
              << "\n";
  else
    std::cout << "k=" << k << ", latency_s=" << print_g6(latency) << "\n";
  return 0;
}

int run_simulate(const std::string& config_path, double rps,
                 const std::string& out) {
  auto cfg = read_sim_config(config_path);
  auto result = run_sim(cfg, rps);
  print_run_check("run 0", result);
  SweepDataset ds;
  ds.config = cfg.workload;
  ds.points.push_back(to_point(result, rps));
  write_sweep_csv({ds}, out);
  return 0;
}

int run_sweep_cmd(const std::string& config_path, const std::string& out) {
  auto cfg = read_sim_config(config_path);
  auto sweep = run_sweep(cfg);
  // Replays each point with the run index run_sweep used (0 for the
  // baseline, i for the i-th rate) so the printed concurrency is the
  // measured one, not rps * latency.
  for (size_t i = 0; i < sweep.points.size(); ++i) {
    SimResult r = i == 0 ? run_closed_loop(cfg, 0)
                         : run_sim(cfg, sweep.points[i].rps, i);
    print_run_check("run " + std::to_string(i), r);
  }
  write_sweep_csv({sweep}, out);
  return 0;
}

int run_scaling(const std::string& table_path, const std::string& predictor,
                std::optional<int> leave_n) {
  auto kind = predictor_from_string(predictor);
  auto table = read_csv(table_path);

  int coeff_col = -1;
  int pred_col = -1;
  int prefill_col = -1, decode_col = -1;
  for (size_t i = 0; i < table.header.size(); ++i) {
    if (table.header[i] == "coefficient") coeff_col = int(i);
    if (table.header[i] == predictor) pred_col = int(i);
    if (table.header[i] == "prefill_tokens") prefill_col = int(i);
    if (table.header[i] == "decode_tokens") decode_col = int(i);
  }
  if (coeff_col < 0)
    throw SchemaError("coefficient table needs a 'coefficient' column");
  if (kind == Predictor::effective_tokens && pred_col < 0 &&
      (prefill_col < 0 || decode_col < 0))
    throw SchemaError(
        "effective_tokens needs either its own column or prefill_tokens and "
        "decode_tokens");
  if (kind != Predictor::effective_tokens && pred_col < 0)
    throw SchemaError("coefficient table lacks column '" + predictor + "'");

  std::vector<ScalingPoint> points;
  for (size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    try {
      ScalingPoint p;
      if (pred_col >= 0)
        p.predictor = std::stod(row.at(pred_col));
      else
        p.predictor = effective_token_count(std::stod(row.at(prefill_col)),
                                            std::stod(row.at(decode_col)));
      p.coefficient = std::stod(row.at(coeff_col));
      points.push_back(p);
    } catch (const std::exception&) {
      throw ParseError("line " + std::to_string(r + 2) +
                       ": cannot parse scaling table row");
    }
  }

  auto trend = fit_scaling_trend(points, kind);
  std::cout << "predictor=" << to_string(kind)
            << " slope=" << format_double(trend.slope)
            << " intercept=" << format_double(trend.intercept)
            << " r2=" << format_double(trend.r2) << "\n";
  if (leave_n) {
    auto s = leave_n_out(points, *leave_n, kind, {});
    std::cout << "leave_" << s.n << "_out: folds=" << s.folds
              << (s.exhaustive ? "" : " (sampled)")
              << " r2=" << format_double(s.r2)
              << " fold_mean=" << format_double(s.r2_fold_mean)
              << " fold_min=" << format_double(s.r2_fold_min) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speculative decoding serving-latency toolkit"};
  app.require_subcommand(1);

  std::string input, model = "eq1", column = "mean", moe, output;
  bool strict = false;
  auto* fit_cmd = app.add_subcommand("fit", "fit a latency model to a sweep");
  fit_cmd->add_option("--input", input, "sweep csv")->required();
  fit_cmd->add_option("--model", model, "eq1|eq3|eq4|eq5");
  fit_cmd->add_option("--column", column, "mean|p95|p99");
  fit_cmd->add_option("--moe", moe, "routing m,M (eq4/eq5)");
  fit_cmd->add_option("--output", output, "coefficient document")->required();
  fit_cmd->add_flag("--strict", strict, "exit 2 when the fit fails to converge");

  std::string coeffs;
  double rps = 0.0;
  double alpha = 0.0;
  int k = 0, g = 0, k_max = 10;
  auto* predict_cmd =
      app.add_subcommand("predict", "evaluate a fitted model at a rate");
  predict_cmd->add_option("--coeffs", coeffs, "coefficient document")
      ->required();
  predict_cmd->add_option("--rps", rps, "request rate")->required();
  auto* alpha_opt =
      predict_cmd->add_option("--alpha", alpha, "acceptance rate (eq3/eq5)");
  auto* k_opt = predict_cmd->add_option("--k", k, "draft length (eq3/eq5)");
  auto* g_opt =
      predict_cmd->add_option("--g", g, "decode tokens per request (eq3/eq5)");
  predict_cmd->add_option("--moe", moe, "routing m,M (eq4/eq5)");

  std::string dense_path, sd_path, grid_spec;
  auto* speedup_cmd =
      app.add_subcommand("speedup", "speedup curve from two eq1 fits");
  speedup_cmd->add_option("--dense", dense_path, "dense eq1 document")
      ->required();
  speedup_cmd->add_option("--sd", sd_path, "sd eq1 document")->required();
  speedup_cmd->add_option("--rps-grid", grid_spec, "start:stop:n")->required();

  auto* opt_cmd =
      app.add_subcommand("optimize-k", "pick the latency-minimizing k");
  opt_cmd->add_option("--coeffs", coeffs, "eq3 coefficient document")
      ->required();
  opt_cmd->add_option("--alpha", alpha, "acceptance rate")->required();
  opt_cmd->add_option("--g", g, "decode tokens per request")->required();
  opt_cmd->add_option("--rps", rps, "request rate")->required();
  opt_cmd->add_option("--k-max", k_max, "largest k to consider");

  std::string config_path, out_path;
  auto* sim_cmd = app.add_subcommand("simulate", "one run at a fixed rate");
  sim_cmd->add_option("--config", config_path, "sim config")->required();
  sim_cmd->add_option("--rps", rps, "offered rate; <= 0 runs the closed loop")
      ->required();
  sim_cmd->add_option("--out", out_path, "sweep csv to write")->required();

  auto* sweep_cmd =
      app.add_subcommand("sweep", "baseline plus eight rates, written as csv");
  sweep_cmd->add_option("--config", config_path, "sim config")->required();
  sweep_cmd->add_option("--out", out_path, "sweep csv to write")->required();

  std::string table_path, predictor;
  int leave_n = 0;
  auto* scaling_cmd =
      app.add_subcommand("scaling", "coefficient-vs-predictor trend");
  scaling_cmd->add_option("--coeff-table", table_path, "csv table")
      ->required();
  scaling_cmd
      ->add_option("--predictor", predictor,
                   "verifier_params|drafter_params|prefill_tokens|"
                   "effective_tokens")
      ->required();
  auto* leave_opt =
      scaling_cmd->add_option("--leave-n", leave_n, "held-out subset size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (fit_cmd->parsed())
      return run_fit(input, model, column, moe, output, strict);
    if (predict_cmd->parsed())
      return run_predict(coeffs, rps,
                         alpha_opt->count() ? std::optional<double>(alpha)
                                            : std::nullopt,
                         k_opt->count() ? std::optional<int>(k) : std::nullopt,
                         g_opt->count() ? std::optional<int>(g) : std::nullopt,
                         moe);
    if (speedup_cmd->parsed()) return run_speedup(dense_path, sd_path, grid_spec);
    if (opt_cmd->parsed())
      return run_optimize_k(coeffs, alpha, g, rps, k_max);
    if (sim_cmd->parsed()) return run_simulate(config_path, rps, out_path);
    if (sweep_cmd->parsed()) return run_sweep_cmd(config_path, out_path);
    if (scaling_cmd->parsed())
      return run_scaling(table_path, predictor,
                         leave_opt->count() ? std::optional<int>(leave_n)
                                            : std::nullopt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
