#include "vvc/io.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace vvc;

namespace {

ScenarioTrace small_trace(const ScenarioConfig& cfg) {
  ScenarioConfig c = cfg;
  c.horizon = 12;
  return run(load_case(c.case_path.string()), Policy::Proposed, scenario_profile(c), c, c.seed);
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST(Fnv1a, KnownVectors) {
  const auto path = std::filesystem::temp_directory_path() / "vvc_fnv.txt";
  std::ofstream(path, std::ios::binary) << "a";
  EXPECT_EQ(io::fnv1a_file(path), "af63dc4c8601ec8c");
  std::ofstream(path, std::ios::binary | std::ios::trunc) << "";
  EXPECT_EQ(io::fnv1a_file(path), "cbf29ce484222325");
  std::filesystem::remove(path);
  EXPECT_THROW(io::fnv1a_file(path), ParseError);
}

TEST(TraceCsv, HeaderIsStable) {
  const ScenarioConfig cfg = load_scenario_config(VVC_SCENARIO);
  const ScenarioTrace t = small_trace(cfg);
  std::ostringstream os;
  io::write_trace_csv(os, t);
  const std::string header = first_line(os.str());
  EXPECT_EQ(header.rfind("t,pv_scale,load_scale,q_6A,q_6B,q_6C,q_12A,", 0), 0u) << header;
  EXPECT_NE(header.find(",vmeas_4A,"), std::string::npos);
  EXPECT_NE(header.find(",vtrue_33C,"), std::string::npos);
  EXPECT_EQ(header.substr(header.size() - 30), "loss,t_regress_ms,t_control_ms");

  const auto cols = io::trace_header(t).size();
  std::istringstream in(os.str());
  std::string line;
  long rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1, cols);
    ++rows;
  }
  EXPECT_EQ(rows, 13);
}

TEST(MetricsCsv, HeaderAndRow) {
  EXPECT_STREQ(io::metrics_header(),
               "policy,status,steps,counted_from,violations,violations_all_steps,total_loss,mae,mae_steps,v_min,v_max,"
               "v_lo,v_hi");
  ScenarioTrace t;
  Metrics m;
  m.steps = 3;
  std::ostringstream os;
  io::write_metrics_row(os, "droop", t, m);
  EXPECT_EQ(os.str().rfind("droop,complete,3,1,0,0,0,nan,0,", 0), 0u) << os.str();
}

TEST(Manifest, ReproducibleAndDigested) {
  const ScenarioConfig cfg = load_scenario_config(VVC_SCENARIO);
  const nlohmann::json a = io::manifest("run", cfg);
  const nlohmann::json b = io::manifest("run", cfg);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a["seed"], cfg.seed);
  EXPECT_EQ(a["inputs"]["case"]["fnv1a64"].get<std::string>().size(), 16u);
  EXPECT_EQ(a["inputs"]["profile"]["fnv1a64"], io::fnv1a_file(cfg.profile_path));

  // A manifest is itself a valid configuration for a rerun.
  const auto path = std::filesystem::temp_directory_path() / "vvc_manifest.json";
  std::ofstream(path) << a.dump(2);
  const ScenarioConfig again = load_scenario_config(path);
  EXPECT_EQ(scenario_config_to_json(again), scenario_config_to_json(cfg));
  std::filesystem::remove(path);

  const ScenarioTrace t1 = small_trace(cfg);
  const ScenarioTrace t2 = small_trace(again);
  std::ostringstream s1, s2;
  io::write_series_csv(s1, t1);
  io::write_series_csv(s2, t2);
  EXPECT_EQ(s1.str(), s2.str());
}

TEST(CompareCsv, OneRowPerStep) {
  const ScenarioConfig cfg = load_scenario_config(VVC_SCENARIO);
  const ScenarioTrace t = small_trace(cfg);
  const std::vector<const ScenarioTrace*> traces{&t, &t};
  const std::vector<std::vector<double>> mae{compute_mae(t, true), compute_mae(t)};
  std::ostringstream os;
  io::write_compare_csv(os, {"proposed", "again"}, traces, mae);
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 13);
  EXPECT_NE(first_line(s).find("proposed"), std::string::npos);
}

TEST(Svg, WellFormed) {
  const ScenarioConfig cfg = load_scenario_config(VVC_SCENARIO);
  const ScenarioTrace t = small_trace(cfg);
  const std::vector<const ScenarioTrace*> traces{&t};
  for (const std::string& svg : {io::voltage_envelope_svg(traces, 0.95, 1.05), io::loss_svg(traces)}) {
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find("<polyline"), std::string::npos);
  }
}
