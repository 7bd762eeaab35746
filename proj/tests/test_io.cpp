#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sdserve/io.hpp"
#include "sdserve/model.hpp"

using namespace sdserve;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("sdserve_io_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SweepDataset sample_dataset() {
  SweepDataset ds;
  ds.config = {"qwen-32b", "h100", 1024, 256, DecodingMode::sd, 0.85, 3};
  for (int i = 0; i < 4; ++i) {
    LoadPoint p;
    p.rps = 0.5 * (i + 1) + 0.013;
    p.mean_latency = 0.1 * (i + 1) / 3.0;
    p.p95_latency = p.mean_latency * 1.4;
    p.p99_latency = p.mean_latency * 1.9;
    p.n_requests = 2000;
    ds.points.push_back(p);
  }
  return ds;
}

}  // namespace

TEST_CASE("format_double round-trips exactly") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 1e300, 0.0, 42.0, 0.8500000000001}) {
    std::string s = format_double(v);
    double back = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), back);
    CHECK(ec == std::errc());
    CHECK(ptr == s.data() + s.size());
    CHECK(back == v);
  }
  CHECK(format_double(42.0) == "42");
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("fnv1a64 known values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("file digest is stable and content addressed") {
  TempDir tmp;
  write_text(tmp.file("a.txt"), "hello\n");
  write_text(tmp.file("b.txt"), "hello\n");
  write_text(tmp.file("c.txt"), "world\n");
  auto da = file_digest_hex(tmp.file("a.txt"));
  CHECK(da == file_digest_hex(tmp.file("b.txt")));
  CHECK(da != file_digest_hex(tmp.file("c.txt")));
  CHECK(da.size() == 16);
}

TEST_CASE("sweep csv round-trip preserves everything") {
  TempDir tmp;
  auto ds = sample_dataset();
  SweepDataset dense;
  dense.config = {"llama-8b", "a100", 512, 128, DecodingMode::dense, {}, {}};
  LoadPoint p;
  p.rps = 1.25;
  p.mean_latency = 0.31;
  p.n_requests = 500;
  dense.points.push_back(p);

  auto path = tmp.file("sweep.csv");
  write_sweep_csv({ds, dense}, path);
  auto back = read_sweep_csv(path);
  REQUIRE(back.size() == 2);
  // Datasets come back grouped by config key, points ascending in rps.
  const auto& sd = back[0].config.mode == DecodingMode::sd ? back[0] : back[1];
  const auto& dn = back[0].config.mode == DecodingMode::sd ? back[1] : back[0];
  CHECK(sd.config == ds.config);
  CHECK(dn.config == dense.config);
  REQUIRE(sd.points.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(sd.points[i].rps == ds.points[i].rps);
    CHECK(sd.points[i].mean_latency == ds.points[i].mean_latency);
    CHECK(*sd.points[i].p95_latency == *ds.points[i].p95_latency);
    CHECK(*sd.points[i].p99_latency == *ds.points[i].p99_latency);
    CHECK(sd.points[i].n_requests == ds.points[i].n_requests);
  }
  CHECK_FALSE(dn.points[0].p95_latency.has_value());

  std::string text = read_text(path);
  CHECK(text.substr(0, std::string(kSweepCsvHeader).size()) == kSweepCsvHeader);
  CHECK(text.find("\r") == std::string::npos);
  CHECK(text.back() == '\n');
}

TEST_CASE("sweep csv single dense row") {
  TempDir tmp;
  auto path = tmp.file("one.csv");
  write_text(path, std::string(kSweepCsvHeader) +
                       "\nm1,h1,16,64,dense,,,2.5,0.21,,,100\n");
  auto sets = read_sweep_csv(path);
  REQUIRE(sets.size() == 1);
  REQUIRE(sets[0].points.size() == 1);
  CHECK(sets[0].config.model_id == "m1");
  CHECK(sets[0].points[0].rps == doctest::Approx(2.5));
  CHECK_FALSE(sets[0].points[0].p95_latency.has_value());
}

TEST_CASE("sweep csv groups interleaved configs and sorts by rps") {
  TempDir tmp;
  auto path = tmp.file("mix.csv");
  std::string text = std::string(kSweepCsvHeader) + "\n";
  for (int i = 8; i >= 0; --i) {
    text += "m1,h1,16,64,dense,,," + std::to_string(i + 1) + ",0.2,,,100\n";
    text += "m2,h1,16,64,dense,,," + std::to_string(i + 1) + ",0.3,,,100\n";
  }
  write_text(path, text);
  auto sets = read_sweep_csv(path);
  REQUIRE(sets.size() == 2);
  for (const auto& ds : sets) {
    REQUIRE(ds.points.size() == 9);
    for (size_t i = 1; i < 9; ++i)
      CHECK(ds.points[i].rps > ds.points[i - 1].rps);
  }
}

TEST_CASE("sweep csv header must match exactly") {
  TempDir tmp;
  auto path = tmp.file("bad.csv");
  write_text(path, "model,hw\nm1,h1\n");
  CHECK_THROWS_AS(read_sweep_csv(path), SchemaError);
}

TEST_CASE("sweep csv parse errors carry the line number") {
  TempDir tmp;
  auto path = tmp.file("bad2.csv");
  write_text(path, std::string(kSweepCsvHeader) +
                       "\nm1,h1,16,64,dense,,,2.5,0.21,,,100\n"
                       "m1,h1,16,64,dense,,,oops,0.21,,,100\n");
  try {
    read_sweep_csv(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("rps") != std::string::npos);
  }
}

TEST_CASE("sweep csv sd row with blank alpha is a validation error") {
  TempDir tmp;
  auto path = tmp.file("bad3.csv");
  write_text(path, std::string(kSweepCsvHeader) +
                       "\nm1,h1,16,64,sd,,3,2.5,0.21,,,100\n");
  try {
    read_sweep_csv(path);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("sweep csv rejects non-positive rps rows") {
  TempDir tmp;
  auto path = tmp.file("bad4.csv");
  write_text(path, std::string(kSweepCsvHeader) +
                       "\nm1,h1,16,64,dense,,,0,0.21,,,100\n");
  CHECK_THROWS_AS(read_sweep_csv(path), ValidationError);
}

TEST_CASE("write_sweep_csv rejects ids that break the format") {
  TempDir tmp;
  auto ds = sample_dataset();
  ds.config.model_id = "bad,id";
  CHECK_THROWS_AS(write_sweep_csv({ds}, tmp.file("x.csv")), ValidationError);
}

TEST_CASE("missing file errors name the path") {
  try {
    read_sweep_csv("/nonexistent/sweep.csv");
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("/nonexistent/sweep.csv") !=
          std::string::npos);
  }
}

TEST_CASE("read_csv generic table") {
  TempDir tmp;
  auto path = tmp.file("t.csv");
  write_text(path, "a,b,c\n1,2,3\n4,5,6\n");
  auto t = read_csv(path);
  REQUIRE(t.header.size() == 3);
  CHECK(t.header[1] == "b");
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[1][2] == "6");
}

TEST_CASE("coefficient document round-trip") {
  TempDir tmp;
  CoefficientDocument doc;
  doc.kind = "eq3";
  doc.params = {{"c1p", 0.02},  {"c1v", 0.003},  {"c1d", 0.0004},
                {"c2p", 2e-4},  {"c2v", 6e-4},   {"c2d", 8e-5}};
  doc.r2 = 0.9991;
  doc.rmse = 0.004;
  doc.n_points = 108;
  doc.latency_column = LatencyColumn::p95;
  doc.converged = true;
  doc.input_digests = {{"sweep.csv", "0123456789abcdef"}};
  doc.seed = 7;
  doc.tool_version = kToolVersion;
  auto path = tmp.file("coeffs.json");
  write_coefficients(doc, path);
  auto back = read_coefficients(path);
  CHECK(back == doc);
}

TEST_CASE("coefficient document kinds and schemas") {
  CHECK(coefficient_param_names("eq1") ==
        std::vector<std::string>{"c1", "c2"});
  CHECK(coefficient_param_names("eq4") ==
        std::vector<std::string>{"c1u", "c1s", "c2u", "c2s"});
  CHECK(coefficient_param_names("eq5").size() == 8);
  CHECK_THROWS_AS(coefficient_param_names("eq9"), VersionError);

  CoefficientDocument doc;
  doc.kind = "eq3";
  doc.params = {{"c1p", 0.02}, {"c1v", 0.003}, {"c1d", 0.0004},
                {"c2p", 2e-4}, {"c2v", 6e-4}};
  CHECK_THROWS_AS(doc.validate(), SchemaError);
  doc.params["c2d"] = 8e-5;
  CHECK_NOTHROW(doc.validate());
  doc.params["extra"] = 1.0;
  CHECK_THROWS_AS(doc.validate(), SchemaError);
}

TEST_CASE("coefficient document version gate") {
  TempDir tmp;
  auto path = tmp.file("v2.json");
  write_text(path, "{\"version\": 2, \"kind\": \"eq1\", "
                   "\"params\": {\"c1\": 1.0, \"c2\": 0.1}}\n");
  CHECK_THROWS_AS(read_coefficients(path), VersionError);
  auto path2 = tmp.file("nov.json");
  write_text(path2, "{\"kind\": \"eq1\", "
                    "\"params\": {\"c1\": 1.0, \"c2\": 0.1}}\n");
  CHECK_THROWS_AS(read_coefficients(path2), VersionError);
  auto path3 = tmp.file("junk.json");
  write_text(path3, "{not json\n");
  CHECK_THROWS_AS(read_coefficients(path3), ParseError);
}

TEST_CASE("sim config parsing") {
  std::string text = R"({
    "seed": 11,
    "workload": {
      "model_id": "m", "hardware_id": "h",
      "prefill_tokens": 16, "decode_tokens": 64,
      "mode": "sd", "alpha": 0.8, "draft_k": 3
    },
    "costs": {
      "verify": {"fixed_s": 0.003, "per_batch_s": 0.0006},
      "draft": {"fixed_s": 0.0004, "per_batch_s": 0.00008}
    },
    "arrival": "constant_rate",
    "warmup_requests": 200,
    "measured_requests": 2000
  })";
  auto sc = parse_sim_config(text);
  CHECK(sc.seed == 11);
  CHECK(sc.workload.mode == DecodingMode::sd);
  CHECK(sc.workload.alpha == doctest::Approx(0.8));
  CHECK(sc.costs.verify.fixed_s == doctest::Approx(0.003));
  CHECK(sc.costs.prefill.fixed_s == doctest::Approx(0.0));
  CHECK(sc.measured_requests == 2000);
  CHECK_FALSE(sc.routing.has_value());
}

TEST_CASE("sim config with routing and saturation costs") {
  std::string text = R"({
    "seed": 3,
    "workload": {
      "model_id": "m", "hardware_id": "h",
      "prefill_tokens": 16, "decode_tokens": 64, "mode": "dense"
    },
    "costs": {"verify": {"fixed_s": 0.001, "per_batch_s": 0.0002}},
    "routing": {"experts_per_token": 1, "total_experts": 8},
    "moe_saturation": {"verify": {"fixed_s": 0.004, "per_batch_s": 0.0}},
    "measured_requests": 500
  })";
  auto sc = parse_sim_config(text);
  REQUIRE(sc.routing.has_value());
  CHECK(sc.routing->m == 1);
  CHECK(sc.routing->M == 8);
  REQUIRE(sc.moe_saturation.has_value());
  CHECK(sc.moe_saturation->verify.fixed_s == doctest::Approx(0.004));
}

TEST_CASE("sim config rejects unknown keys and missing seed") {
  CHECK_THROWS_AS(parse_sim_config(R"({"seed": 1, "wrkload": {}})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_sim_config(R"({
    "workload": {"model_id": "m", "hardware_id": "h",
                 "prefill_tokens": 16, "decode_tokens": 64, "mode": "dense"},
    "costs": {"verify": {"fixed_s": 0.001, "per_batch_s": 0.0002}},
    "measured_requests": 10
  })"),
                  SchemaError);
  CHECK_THROWS_AS(parse_sim_config("{oops"), ParseError);
}

TEST_CASE("collapse report embeds the reference curve") {
  TempDir tmp;
  ServingCoefficients truth{2.0, 0.1};
  SweepDataset ds;
  ds.config = {"m", "h", 16, 64, DecodingMode::dense, {}, {}};
  for (int i = 0; i < 6; ++i) {
    LoadPoint p;
    p.rps = (i + 1) * 0.9 / (6 * truth.c2);
    p.mean_latency = predict_latency(truth, p.rps);
    p.n_requests = 100;
    ds.points.push_back(p);
  }
  ReportInputs inputs;
  inputs.datasets = {ds};
  inputs.fits = {truth};
  auto path = tmp.file("collapse.csv");
  emit_report(ReportKind::collapse, inputs, path);
  auto t = read_csv(path);
  REQUIRE(t.header == std::vector<std::string>{"x", "y", "y_model"});
  REQUIRE(t.rows.size() == 6);
  for (const auto& row : t.rows)
    CHECK(std::abs(std::stod(row[1]) - std::stod(row[2])) < 1e-12);
}

TEST_CASE("speedup curve report carries the embedded identity") {
  TempDir tmp;
  ReportInputs inputs;
  inputs.dense = ServingCoefficients{1.0, 0.1};
  inputs.sd = ServingCoefficients{0.8, 0.08};
  for (int i = 0; i <= 16; ++i) inputs.rps_grid.push_back(i * 0.6);
  auto path = tmp.file("speedup.csv");
  emit_report(ReportKind::speedup_curve, inputs, path);
  auto t = read_csv(path);
  REQUIRE(t.header ==
          std::vector<std::string>{"rps", "r", "speedup_formula",
                                   "speedup_ratio"});
  REQUIRE(t.rows.size() == 17);
  for (const auto& row : t.rows) {
    double f = std::stod(row[2]), r = std::stod(row[3]);
    CHECK(std::abs(f - r) / r < 1e-12);
  }
}

TEST_CASE("speedup curve report drops unstable grid points") {
  TempDir tmp;
  ReportInputs inputs;
  inputs.dense = ServingCoefficients{1.0, 0.1};
  inputs.sd = ServingCoefficients{0.8, 0.12};
  inputs.rps_grid = {1.0, 5.0, 8.5, 10.5};  // sd saturates at 8.33, dense at 10
  auto path = tmp.file("speedup2.csv");
  emit_report(ReportKind::speedup_curve, inputs, path);
  auto t = read_csv(path);
  CHECK(t.rows.size() == 2);
}

TEST_CASE("report input checks") {
  TempDir tmp;
  ReportInputs empty;
  CHECK_THROWS_AS(
      emit_report(ReportKind::speedup_curve, empty, tmp.file("x.csv")),
      MissingInputError);
  CHECK_THROWS_AS(emit_report(ReportKind::collapse, empty, tmp.file("y.csv")),
                  MissingInputError);
}

TEST_CASE("report kind strings") {
  CHECK(to_string(ReportKind::collapse) == "collapse");
  CHECK(report_kind_from_string("scaling") == ReportKind::scaling);
  CHECK_THROWS_AS(report_kind_from_string("pie_chart"), ValidationError);
}
