// vvc_cli: run scenarios, compare policies, run the oracle suites.
//
//   vvc_cli run     --config data/scenario.json --out out/run [--seed N] [--svg]
//   vvc_cli compare --config data/scenario.json --policies proposed,droop --out out/cmp [--series] [--svg]
//   vvc_cli verify  --suite regression|powerflow|convergence --out out/verify [--config ...]
//
// Exit codes: 0 ok, 1 failed verification check, 2 invalid input, 3 plant
// divergence. VVC_LOG=quiet|info|debug sets stderr verbosity.

#include "vvc/io.hpp"
#include "vvc/scenario.hpp"
#include "vvc/verify.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

enum class Level { Quiet = 0, Info = 1, Debug = 2 };

Level log_level() {
  const char* env = std::getenv("VVC_LOG");
  if (env == nullptr) return Level::Info;
  const std::string v = env;
  if (v == "quiet" || v == "0" || v == "error") return Level::Quiet;
  if (v == "debug" || v == "2") return Level::Debug;
  return Level::Info;
}

void log(Level at, const std::string& msg) {
  if (static_cast<int>(log_level()) >= static_cast<int>(at)) std::cerr << "vvc: " << msg << '\n';
}

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kInvalid = 2;
constexpr int kDiverged = 3;

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw vvc::ParseError("cannot write " + path.string());
  return os;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto os = open_out(path);
  os << j.dump(2) << '\n';
}

struct Loaded {
  vvc::ScenarioConfig cfg;
  vvc::NetworkCase network;
  vvc::Profile profile;
};

Loaded load_inputs(const std::string& config_path, std::optional<std::uint64_t> seed) {
  Loaded in;
  in.cfg = vvc::load_scenario_config(config_path);
  if (seed) in.cfg.seed = *seed;
  in.network = vvc::load_case(in.cfg.case_path.string());
  in.profile = vvc::scenario_profile(in.cfg);
  vvc::validate(in.profile);
  vvc::resolve_horizon(in.cfg, in.profile);
  return in;
}

void log_events(const vvc::ScenarioTrace& trace) {
  for (const auto& e : trace.events) log(Level::Info, trace.policy + ": " + e);
}

int cmd_run(const std::string& config, const fs::path& out, std::optional<std::uint64_t> seed, bool svg) {
  const Loaded in = load_inputs(config, seed);
  fs::create_directories(out);
  log(Level::Info, std::string("running ") + vvc::to_string(in.cfg.policy) + " on " + in.network.name + " (" +
                       std::to_string(vvc::resolve_horizon(in.cfg, in.profile)) + " steps, seed " +
                       std::to_string(in.cfg.seed) + ")");
  const vvc::ScenarioTrace trace = vvc::run(in.network, in.cfg.policy, in.profile, in.cfg, in.cfg.seed);
  log_events(trace);
  {
    auto os = open_out(out / "trace.csv");
    vvc::io::write_trace_csv(os, trace);
  }
  const vvc::Metrics m =
      vvc::compute_metrics(trace, in.cfg.v_lo, in.cfg.v_hi, vvc::settled_step(in.cfg), in.cfg.interval);
  {
    auto os = open_out(out / "metrics.csv");
    os << vvc::io::metrics_header() << '\n';
    vvc::io::write_metrics_row(os, vvc::to_string(in.cfg.policy), trace, m);
  }
  nlohmann::json manifest = vvc::io::manifest("run", in.cfg);
  manifest["status"] = trace.complete() ? "complete" : "aborted";
  if (!trace.complete()) manifest["message"] = trace.message;
  write_json(out / "manifest.json", manifest);
  if (svg) {
    const std::vector<const vvc::ScenarioTrace*> traces{&trace};
    vvc::io::write_text(out / "voltage.svg", vvc::io::voltage_envelope_svg(traces, in.cfg.v_lo, in.cfg.v_hi));
    vvc::io::write_text(out / "loss.svg", vvc::io::loss_svg(traces));
  }
  log(Level::Info, "violations " + std::to_string(m.violations) + ", loss " + vvc::io::fmt(m.total_loss) + ", mae " +
                       vvc::io::fmt(m.mae));
  if (!trace.complete()) {
    std::cerr << "vvc: plant diverged: " << trace.message << '\n';
    return kDiverged;
  }
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_compare(const std::string& config, const std::string& policy_list, const fs::path& out,
                std::optional<std::uint64_t> seed, bool series, bool svg) {
  const std::vector<std::string> names = split_list(policy_list);
  if (names.size() < 2) throw vvc::ValidationError("compare needs at least two policies, got " + std::to_string(names.size()));
  std::vector<vvc::Policy> policies;
  for (const auto& n : names) policies.push_back(vvc::parse_policy(n));
  const Loaded in = load_inputs(config, seed);
  fs::create_directories(out);

  std::vector<vvc::ScenarioTrace> traces;
  std::vector<std::vector<double>> mae;
  int status = kOk;
  for (std::size_t k = 0; k < policies.size(); ++k) {
    log(Level::Info, "running " + names[k]);
    traces.push_back(vvc::run(in.network, policies[k], in.profile, in.cfg, in.cfg.seed));
    log_events(traces.back());
    if (!traces.back().complete()) {
      std::cerr << "vvc: " << names[k] << " diverged: " << traces.back().message << '\n';
      status = kDiverged;
    }
  }
  // Stale-model MAE is the frozen linearization's error on whatever dispatch
  // the policy applied; the learned policy reports its one-step-ahead error.
  const vvc::Matrix stale_w = vvc::build_stale_model(in.network, in.profile, in.cfg);
  std::vector<const vvc::ScenarioTrace*> ptrs;
  for (std::size_t k = 0; k < traces.size(); ++k) {
    ptrs.push_back(&traces[k]);
    if (policies[k] == vvc::Policy::Proposed) {
      mae.push_back(vvc::compute_mae(traces[k], true));
    } else if (policies[k] == vvc::Policy::StaleModel) {
      mae.push_back(vvc::compute_mae(stale_w, traces[k]));
    } else {
      mae.push_back(std::vector<double>(traces[k].rows.size(), std::numeric_limits<double>::quiet_NaN()));
    }
  }
  {
    auto os = open_out(out / "compare.csv");
    vvc::io::write_compare_csv(os, names, ptrs, mae);
  }
  {
    auto os = open_out(out / "summary.csv");
    os << vvc::io::metrics_header() << '\n';
    std::cout << "policy        violations  total_loss    mae\n";
    for (std::size_t k = 0; k < traces.size(); ++k) {
      vvc::Metrics m =
          vvc::compute_metrics(traces[k], in.cfg.v_lo, in.cfg.v_hi, vvc::settled_step(in.cfg), in.cfg.interval);
      double sum = 0.0;
      long n = 0;
      for (double e : mae[k])
        if (std::isfinite(e)) sum += e, ++n;
      m.mae = n > 0 ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
      m.mae_steps = n;
      vvc::io::write_metrics_row(os, names[k], traces[k], m);
      char line[128];
      std::snprintf(line, sizeof line, "%-13s %10ld  %10.6g  %9.3g\n", names[k].c_str(), m.violations, m.total_loss, m.mae);
      std::cout << line;
    }
  }
  if (series) {
    for (std::size_t k = 0; k < traces.size(); ++k) {
      auto os = open_out(out / ("series_" + names[k] + ".csv"));
      vvc::io::write_series_csv(os, traces[k]);
    }
  }
  if (svg) {
    vvc::io::write_text(out / "voltage.svg", vvc::io::voltage_envelope_svg(ptrs, in.cfg.v_lo, in.cfg.v_hi));
    vvc::io::write_text(out / "loss.svg", vvc::io::loss_svg(ptrs));
  }
  write_json(out / "manifest.json", vvc::io::manifest("compare", in.cfg, names));
  return status;
}

int cmd_verify(const std::string& suite, const fs::path& out, const std::string& config) {
  vvc::verify::Report report;
  if (suite == "regression") {
    report = vvc::verify::regression_suite();
  } else if (suite == "powerflow") {
    vvc::verify::PowerflowOptions o;
    if (!config.empty()) o.bundled_case = vvc::load_scenario_config(config).case_path.string();
    report = vvc::verify::powerflow_suite(o);
  } else if (suite == "convergence") {
    if (config.empty()) throw vvc::ValidationError("the convergence suite needs --config");
    report = vvc::verify::convergence_suite(vvc::load_scenario_config(config));
  } else {
    throw vvc::ValidationError("unknown suite '" + suite + "' (expected regression, powerflow or convergence)");
  }
  fs::create_directories(out);
  {
    auto os = open_out(out / ("verify_" + suite + ".csv"));
    vvc::verify::write_report(os, report);
  }
  write_json(out / ("verify_" + suite + ".json"), vvc::verify::to_json(report));
  vvc::verify::write_report(std::cout, report);
  return report.passed() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-driven Volt/VAr control simulator"};
  app.require_subcommand(1);

  std::string config, out, policies, suite;
  std::optional<std::uint64_t> seed;
  bool svg = false, series = false;

  auto* run = app.add_subcommand("run", "Run one scenario and write trace, metrics and manifest");
  run->add_option("--config", config, "Scenario configuration (JSON)")->required();
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--seed", seed, "Override the configured seed");
  run->add_flag("--svg", svg, "Also render voltage and loss plots");

  auto* cmp = app.add_subcommand("compare", "Run several policies on the same seeded scenario");
  cmp->add_option("--config", config, "Scenario configuration (JSON)")->required();
  cmp->add_option("--policies", policies, "Comma-separated: proposed,droop,stale_model")->required();
  cmp->add_option("--out", out, "Output directory")->required();
  cmp->add_option("--seed", seed, "Override the configured seed");
  cmp->add_flag("--series", series, "Write per-channel voltage series per policy");
  cmp->add_flag("--svg", svg, "Also render voltage and loss plots");

  auto* ver = app.add_subcommand("verify", "Run an oracle suite and write a pass/fail report");
  ver->add_option("--suite", suite, "regression | powerflow | convergence")->required();
  ver->add_option("--out", out, "Output directory")->required();
  ver->add_option("--config", config, "Scenario configuration (bundled case for powerflow, required for convergence)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInvalid;
  }

  try {
    if (*run) return cmd_run(config, out, seed, svg);
    if (*cmp) return cmd_compare(config, policies, out, seed, series, svg);
    if (*ver) return cmd_verify(suite, out, config);
  } catch (const vvc::ConvergenceError& e) {
    std::cerr << "vvc: plant diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const vvc::Error& e) {
    std::cerr << "vvc: " << e.what() << '\n';
    return kInvalid;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "vvc: " << e.what() << '\n';
    return kInvalid;
  }
  return kInvalid;
}
