#include "sdserve/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sdserve/model.hpp"
#include "sdserve/spec_model.hpp"

namespace sdserve {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

double parse_double_field(const std::string& s, const char* column,
                          std::size_t line) {
  double v;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("line " + std::to_string(line) + ", column '" + column +
                     "': cannot parse '" + s + "'");
  return v;
}

long parse_long_field(const std::string& s, const char* column,
                      std::size_t line) {
  long v;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("line " + std::to_string(line) + ", column '" + column +
                     "': cannot parse '" + s + "'");
  return v;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

void check_plain_field(const std::string& s, const char* what) {
  for (char c : s) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r')
      throw ValidationError(std::string(what) +
                            " must not contain commas, quotes or newlines");
  }
}

}  // namespace

std::string file_digest_hex(const std::string& path) {
  return to_hex(fnv1a64(read_file(path)));
}

std::vector<SweepDataset> read_sweep_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty sweep file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kSweepCsvHeader)
    throw SchemaError("sweep header mismatch in " + path);

  std::map<WorkloadConfig, std::vector<LoadPoint>> groups;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_fields(line);
    if (f.size() != 12)
      throw ParseError("line " + std::to_string(lineno) + ": expected 12 " +
                       "fields, got " + std::to_string(f.size()));
    WorkloadConfig cfg;
    cfg.model_id = f[0];
    cfg.hardware_id = f[1];
    cfg.prefill_tokens =
        int(parse_long_field(f[2], "prefill_tokens", lineno));
    cfg.decode_tokens = int(parse_long_field(f[3], "decode_tokens", lineno));
    try {
      cfg.mode = decoding_mode_from_string(f[4]);
    } catch (const ValidationError&) {
      throw ParseError("line " + std::to_string(lineno) +
                       ", column 'mode': cannot parse '" + f[4] + "'");
    }
    if (!f[5].empty()) cfg.alpha = parse_double_field(f[5], "alpha", lineno);
    if (!f[6].empty())
      cfg.draft_k = int(parse_long_field(f[6], "draft_k", lineno));

    LoadPoint p;
    p.rps = parse_double_field(f[7], "rps", lineno);
    p.mean_latency = parse_double_field(f[8], "mean_latency_s", lineno);
    if (!f[9].empty())
      p.p95_latency = parse_double_field(f[9], "p95_latency_s", lineno);
    if (!f[10].empty())
      p.p99_latency = parse_double_field(f[10], "p99_latency_s", lineno);
    p.n_requests = parse_long_field(f[11], "n_requests", lineno);

    try {
      cfg.validate();
      p.validate();
      if (!(p.rps > 0.0))
        throw ValidationError("rps must be > 0 in sweep files");
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " +
                            e.what());
    }
    groups[cfg].push_back(p);
  }

  std::vector<SweepDataset> out;
  for (auto& [cfg, pts] : groups) {
    std::stable_sort(pts.begin(), pts.end(),
                     [](const LoadPoint& a, const LoadPoint& b) {
                       return a.rps < b.rps;
                     });
    SweepDataset ds;
    ds.config = cfg;
    ds.points = std::move(pts);
    ds.validate();
    out.push_back(std::move(ds));
  }
  return out;
}

void write_sweep_csv(const std::vector<SweepDataset>& datasets,
                     const std::string& path) {
  std::ostringstream out;
  out << kSweepCsvHeader << "\n";
  for (const auto& ds : datasets) {
    ds.validate();
    check_plain_field(ds.config.model_id, "model_id");
    check_plain_field(ds.config.hardware_id, "hardware_id");
    for (const auto& p : ds.points) {
      out << ds.config.model_id << ',' << ds.config.hardware_id << ','
          << ds.config.prefill_tokens << ',' << ds.config.decode_tokens << ','
          << to_string(ds.config.mode) << ',';
      if (ds.config.alpha) out << format_double(*ds.config.alpha);
      out << ',';
      if (ds.config.draft_k) out << *ds.config.draft_k;
      out << ',' << format_double(p.rps) << ','
          << format_double(p.mean_latency) << ',';
      if (p.p95_latency) out << format_double(*p.p95_latency);
      out << ',';
      if (p.p99_latency) out << format_double(*p.p99_latency);
      out << ',' << p.n_requests << "\n";
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot write file: " + path);
  f << out.str();
}

CsvTable read_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty csv file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_fields(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_fields(line);
    if (f.size() != t.header.size())
      throw ParseError("line " + std::to_string(lineno) +
                       ": field count differs from header");
    t.rows.push_back(std::move(f));
  }
  return t;
}

const std::vector<std::string>& coefficient_param_names(
    const std::string& kind) {
  static const std::map<std::string, std::vector<std::string>> kinds = {
      {"eq1", {"c1", "c2"}},
      {"eq3", {"c1p", "c1v", "c1d", "c2p", "c2v", "c2d"}},
      {"eq4", {"c1u", "c1s", "c2u", "c2s"}},
      {"eq5", {"c1p", "c1vu", "c1vs", "c1d", "c2p", "c2vu", "c2vs", "c2d"}},
  };
  auto it = kinds.find(kind);
  if (it == kinds.end())
    throw VersionError("unknown coefficient document kind: '" + kind + "'");
  return it->second;
}

void CoefficientDocument::validate() const {
  if (version != 1)
    throw VersionError("unsupported document version " +
                       std::to_string(version));
  const auto& names = coefficient_param_names(kind);
  for (const auto& name : names) {
    if (!params.count(name))
      throw SchemaError(kind + " document missing parameter '" + name + "'");
  }
  if (params.size() != names.size()) {
    for (const auto& [name, v] : params) {
      (void)v;
      if (std::find(names.begin(), names.end(), name) == names.end())
        throw SchemaError(kind + " document has unexpected parameter '" +
                          name + "'");
    }
  }
}

CoefficientDocument coefficient_document(const FitResult& fit) {
  CoefficientDocument doc;
  doc.kind = fit.model;
  for (std::size_t i = 0; i < fit.param_names.size(); ++i)
    doc.params[fit.param_names[i]] = fit.params[i];
  doc.r2 = fit.r2;
  doc.rmse = fit.rmse;
  doc.n_points = fit.n_points;
  doc.latency_column = fit.latency_column;
  doc.converged = fit.converged;
  doc.tool_version = kToolVersion;
  doc.validate();
  return doc;
}

void write_coefficients(const CoefficientDocument& doc,
                        const std::string& path) {
  doc.validate();
  json j;
  j["version"] = doc.version;
  j["kind"] = doc.kind;
  j["params"] = doc.params;
  j["fit"] = {{"r2", doc.r2},
              {"rmse", doc.rmse},
              {"n_points", doc.n_points},
              {"latency_column", to_string(doc.latency_column)},
              {"converged", doc.converged}};
  j["provenance"] = {{"inputs", doc.input_digests},
                     {"seed", doc.seed},
                     {"tool_version", doc.tool_version}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot write file: " + path);
  f << j.dump(2) << "\n";
}

CoefficientDocument read_coefficients(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError("cannot parse " + path + ": " + e.what());
  }
  CoefficientDocument doc;
  try {
    if (!j.contains("version") || !j["version"].is_number_integer())
      throw VersionError("document lacks an integer version");
    doc.version = j["version"].get<int>();
    if (doc.version != 1)
      throw VersionError("unsupported document version " +
                         std::to_string(doc.version));
    doc.kind = j.at("kind").get<std::string>();
    doc.params =
        j.at("params").get<std::map<std::string, double>>();
    const json& fit = j.at("fit");
    doc.r2 = fit.at("r2").get<double>();
    doc.rmse = fit.at("rmse").get<double>();
    doc.n_points = fit.at("n_points").get<int>();
    doc.latency_column =
        latency_column_from_string(fit.at("latency_column").get<std::string>());
    doc.converged = fit.at("converged").get<bool>();
    const json& prov = j.at("provenance");
    doc.input_digests =
        prov.at("inputs").get<std::map<std::string, std::string>>();
    doc.seed = prov.at("seed").get<std::uint64_t>();
    doc.tool_version = prov.at("tool_version").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError("malformed coefficient document " + path + ": " +
                     e.what());
  }
  doc.validate();
  return doc;
}

namespace {

PhaseCost parse_phase(const json& j) {
  PhaseCost c;
  c.fixed_s = j.value("fixed_s", 0.0);
  c.per_batch_s = j.value("per_batch_s", 0.0);
  return c;
}

StepCosts parse_step_costs(const json& j) {
  StepCosts c;
  if (j.contains("prefill")) c.prefill = parse_phase(j["prefill"]);
  if (j.contains("verify")) c.verify = parse_phase(j["verify"]);
  if (j.contains("draft")) c.draft = parse_phase(j["draft"]);
  return c;
}

}  // namespace

SimConfig parse_sim_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("cannot parse sim config: ") + e.what());
  }
  static const std::set<std::string> known = {
      "seed",          "workload",       "costs",
      "routing",       "moe_saturation", "arrival",
      "max_concurrency", "warmup_requests", "measured_requests"};
  for (const auto& [key, v] : j.items()) {
    (void)v;
    if (!known.count(key))
      throw SchemaError("unknown sim config key: '" + key + "'");
  }

  SimConfig cfg;
  try {
    if (!j.contains("seed"))
      throw SchemaError("sim config requires a seed");
    cfg.seed = j["seed"].get<std::uint64_t>();

    const json& w = j.at("workload");
    cfg.workload.model_id = w.value("model_id", "sim");
    cfg.workload.hardware_id = w.value("hardware_id", "sim");
    cfg.workload.prefill_tokens = w.value("prefill_tokens", 1);
    cfg.workload.decode_tokens = w.value("decode_tokens", 1);
    cfg.workload.mode =
        decoding_mode_from_string(w.value("mode", std::string("dense")));
    if (w.contains("alpha")) cfg.workload.alpha = w["alpha"].get<double>();
    if (w.contains("draft_k")) cfg.workload.draft_k = w["draft_k"].get<int>();

    cfg.costs = parse_step_costs(j.at("costs"));
    if (j.contains("routing")) {
      MoeRouting r;
      r.m = j["routing"].value("experts_per_token", 1);
      r.M = j["routing"].value("total_experts", 1);
      cfg.routing = r;
    }
    if (j.contains("moe_saturation"))
      cfg.moe_saturation = parse_step_costs(j["moe_saturation"]);
    if (j.contains("arrival"))
      cfg.arrival =
          arrival_process_from_string(j["arrival"].get<std::string>());
    if (j.contains("max_concurrency"))
      cfg.max_concurrency = j["max_concurrency"].get<long>();
    cfg.warmup_requests = j.value("warmup_requests", 0L);
    cfg.measured_requests = j.value("measured_requests", 1L);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed sim config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SimConfig read_sim_config(const std::string& path) {
  return parse_sim_config(read_file(path));
}

std::string to_string(ReportKind kind) {
  switch (kind) {
    case ReportKind::collapse: return "collapse";
    case ReportKind::speedup_curve: return "speedup_curve";
    case ReportKind::ratio_minima: return "ratio_minima";
    case ReportKind::scaling: return "scaling";
  }
  return "collapse";
}

ReportKind report_kind_from_string(const std::string& s) {
  if (s == "collapse") return ReportKind::collapse;
  if (s == "speedup_curve") return ReportKind::speedup_curve;
  if (s == "ratio_minima") return ReportKind::ratio_minima;
  if (s == "scaling") return ReportKind::scaling;
  throw ValidationError("unknown report kind: '" + s + "'");
}

void emit_report(ReportKind kind, const ReportInputs& inputs,
                 const std::string& path) {
  std::ostringstream out;
  switch (kind) {
    case ReportKind::collapse: {
      if (inputs.datasets.empty() ||
          inputs.datasets.size() != inputs.fits.size())
        throw MissingInputError(
            "collapse needs datasets with one fit per dataset");
      out << "x,y,y_model\n";
      for (std::size_t i = 0; i < inputs.datasets.size(); ++i) {
        for (const auto& p : inputs.datasets[i].points) {
          if (p.saturated) continue;
          NormalizedPoint np = normalize_point(inputs.fits[i], p);
          if (np.x >= 1.0) continue;
          out << format_double(np.x) << ',' << format_double(np.y) << ','
              << format_double(1.0 / (1.0 - np.x)) << "\n";
        }
      }
      break;
    }
    case ReportKind::speedup_curve: {
      if (!inputs.dense || !inputs.sd || inputs.rps_grid.empty())
        throw MissingInputError(
            "speedup_curve needs dense and sd coefficients plus an rps grid");
      out << "rps,r,speedup_formula,speedup_ratio\n";
      for (double rps : inputs.rps_grid) {
        double r = rps * inputs.dense->c2;
        if (r >= 1.0 || rps * inputs.sd->c2 >= 1.0) continue;
        double formula = speedup(*inputs.dense, *inputs.sd, rps);
        double ratio = predict_latency(*inputs.dense, rps) /
                       predict_latency(*inputs.sd, rps);
        out << format_double(rps) << ',' << format_double(r) << ','
            << format_double(formula) << ',' << format_double(ratio) << "\n";
      }
      break;
    }
    case ReportKind::ratio_minima: {
      if (!inputs.dense || inputs.per_alpha.empty())
        throw MissingInputError(
            "ratio_minima needs dense coefficients and a per-alpha map");
      out << "alpha,min_c1r,argmin_k_c1r,min_c2r,argmin_k_c2r\n";
      for (const auto& [alpha, per_k] : inputs.per_alpha) {
        RatioMinima m = min_cost_ratios_over_k(per_k, *inputs.dense);
        out << format_double(alpha) << ',' << format_double(m.min_c1r) << ','
            << m.argmin_k_c1r << ',' << format_double(m.min_c2r) << ','
            << m.argmin_k_c2r << "\n";
      }
      break;
    }
    case ReportKind::scaling: {
      if (inputs.scaling_points.empty() || !inputs.trend)
        throw MissingInputError("scaling needs points and a fitted trend");
      out << "predictor,coefficient,fitted_line\n";
      for (const auto& p : inputs.scaling_points) {
        out << format_double(p.predictor) << ','
            << format_double(p.coefficient) << ','
            << format_double(inputs.trend->predict(p.predictor)) << "\n";
      }
      break;
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot write file: " + path);
  f << out.str();
}

}  // namespace sdserve
