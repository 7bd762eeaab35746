#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sdserve/fit.hpp"
#include "sdserve/sim.hpp"
#include "sdserve/types.hpp"

namespace sdserve {

inline constexpr const char* kSweepCsvHeader =
    "model_id,hardware_id,prefill_tokens,decode_tokens,mode,alpha,draft_k,"
    "rps,mean_latency_s,p95_latency_s,p99_latency_s,n_requests";

inline constexpr const char* kToolVersion = "0.1.0";

// Shortest decimal form that parses back to the same binary value; never
// locale dependent.
std::string format_double(double v);

std::uint64_t fnv1a64(std::string_view bytes);
std::string file_digest_hex(const std::string& path);

// Rows grouped by workload configuration, points sorted by rps within each
// group. Throws ParseError (with line number), SchemaError (bad header), or
// ValidationError (e.g. sd row with blank alpha).
std::vector<SweepDataset> read_sweep_csv(const std::string& path);
void write_sweep_csv(const std::vector<SweepDataset>& datasets,
                     const std::string& path);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path);

struct CoefficientDocument {
  int version = 1;
  std::string kind;  // eq1 | eq3 | eq4 | eq5
  std::map<std::string, double> params;
  double r2 = 0.0;
  double rmse = 0.0;
  int n_points = 0;
  LatencyColumn latency_column = LatencyColumn::mean;
  bool converged = false;
  std::map<std::string, std::string> input_digests;  // label -> fnv1a64 hex
  std::uint64_t seed = 0;
  std::string tool_version;

  bool operator==(const CoefficientDocument&) const = default;
  void validate() const;  // SchemaError on param-name mismatch for the kind
};

// Expected parameter names per document kind.
const std::vector<std::string>& coefficient_param_names(const std::string& kind);

CoefficientDocument coefficient_document(const FitResult& fit);

void write_coefficients(const CoefficientDocument& doc, const std::string& path);
CoefficientDocument read_coefficients(const std::string& path);

SimConfig read_sim_config(const std::string& path);
SimConfig parse_sim_config(const std::string& json_text);

enum class ReportKind { collapse, speedup_curve, ratio_minima, scaling };

std::string to_string(ReportKind kind);
ReportKind report_kind_from_string(const std::string& s);

// Inputs are per-kind; emit_report throws MissingInputError when the fields
// its kind needs are absent.
struct ReportInputs {
  // collapse: one fitted (c1, c2) per dataset, same order.
  std::vector<SweepDataset> datasets;
  std::vector<ServingCoefficients> fits;
  // speedup_curve
  std::optional<ServingCoefficients> dense;
  std::optional<ServingCoefficients> sd;
  std::vector<double> rps_grid;
  // ratio_minima: alpha -> (k -> effective coefficients), plus the dense fit.
  std::map<double, std::map<int, ServingCoefficients>> per_alpha;
  // scaling
  std::vector<ScalingPoint> scaling_points;
  std::optional<ScalingTrend> trend;
};

void emit_report(ReportKind kind, const ReportInputs& inputs,
                 const std::string& path);

}  // namespace sdserve
