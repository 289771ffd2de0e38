#pragma once

// Oracle suites behind `vvc_cli verify` and the acceptance runner. Each
// check records what was measured, the tolerance it was held to, and
// whether it passed; informational checks are reported but never fail a
// suite.

#include "vvc/baselines.hpp"
#include "vvc/controller.hpp"
#include "vvc/core.hpp"
#include "vvc/netmodel.hpp"
#include "vvc/oracles.hpp"
#include "vvc/powerflow.hpp"
#include "vvc/regression.hpp"
#include "vvc/scenario.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace vvc::verify {

struct Check {
  std::string name;
  double measured = std::numeric_limits<double>::quiet_NaN();
  double tolerance = std::numeric_limits<double>::quiet_NaN();
  bool passed = false;
  std::string detail;
  bool informational = false;
};

struct Report {
  std::string suite;
  std::vector<Check> checks;

  bool passed() const {
    for (const Check& c : checks)
      if (!c.informational && !c.passed) return false;
    return true;
  }

  Check& add(std::string name, double measured, double tolerance, bool passed, std::string detail = {}) {
    checks.push_back({std::move(name), measured, tolerance, passed, std::move(detail), false});
    return checks.back();
  }

  Check& info(std::string name, double measured, std::string detail = {}) {
    checks.push_back({std::move(name), measured, std::numeric_limits<double>::quiet_NaN(), true, std::move(detail), true});
    return checks.back();
  }
};

inline std::string num(double x) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

inline void write_report(std::ostream& os, const Report& r) {
  os << "suite,check,result,measured,tolerance,detail\n";
  for (const Check& c : r.checks) {
    std::string detail = c.detail;
    for (char& ch : detail)
      if (ch == ',' || ch == '\n') ch = ';';
    os << r.suite << ',' << c.name << ',' << (c.informational ? "INFO" : (c.passed ? "PASS" : "FAIL")) << ','
       << num(c.measured) << ',' << num(c.tolerance) << ',' << detail << '\n';
  }
}

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json j;
  j["suite"] = r.suite;
  j["passed"] = r.passed();
  j["checks"] = nlohmann::json::array();
  for (const Check& c : r.checks)
    j["checks"].push_back({{"name", c.name},
                           {"result", c.informational ? "info" : (c.passed ? "pass" : "fail")},
                           {"measured", std::isfinite(c.measured) ? nlohmann::json(c.measured) : nlohmann::json(num(c.measured))},
                           {"tolerance", std::isfinite(c.tolerance) ? nlohmann::json(c.tolerance) : nlohmann::json(nullptr)},
                           {"detail", c.detail}});
  return j;
}

// --- regression -----------------------------------------------------------------

struct RegressionOptions {
  int inputs = 25;  // G
  int outputs = 26; // M
  std::size_t window = 10;
  double beta = 0.95;
  double lambda = 1e-2;
  int updates = 500;
  double noise = 0.01;
  std::uint64_t seed = 7;
  double tolerance = 1e-8;
};

struct RegressionRun {
  double max_w_error = 0.0;
  double max_phi_error = 0.0;
  long first_w_exceed = -1;    // update index (1-based) of the first W error above tolerance
  long first_phi_exceed = -1;
  double w_error_at_first = 0.0;
  long compared = 0;
  long reinitializations = 0;
  std::size_t update_factorizations = 0;  // inside successful update() calls
  double seconds = 0.0;
  double min_ridge = 0.0;
};

/// Streams random full-rank samples through the recursive model and refits
/// every intermediate window from scratch. A degenerate removal is handled
/// like the controller does: refit in batch on the newest L samples.
/// Comparisons start L updates after every (re)initialization.
inline RegressionRun regression_equivalence(const RegressionOptions& o) {
  RegressionRun run;
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> n01;
  Matrix w_true(o.inputs + 1, o.outputs);
  for (Eigen::Index k = 0; k < w_true.size(); ++k) w_true.data()[k] = n01(rng);
  long t = 0;
  auto draw = [&] {
    Vector q(o.inputs);
    for (Eigen::Index k = 0; k < q.size(); ++k) q(k) = n01(rng);
    Vector y = w_true.topRows(o.inputs).transpose() * q + w_true.row(o.inputs).transpose();
    for (Eigen::Index k = 0; k < y.size(); ++k) y(k) += o.noise * n01(rng);
    return make_sample(q, y, ++t);
  };

  const auto start = std::chrono::steady_clock::now();
  std::deque<Sample> recent;
  for (std::size_t k = 0; k < o.window; ++k) recent.push_back(draw());
  std::vector<Sample> init(recent.begin(), recent.end());
  ResponseModel model = ResponseModel::init_batch(init, o.beta, o.lambda);
  long since_init = 0;
  run.min_ridge = model.effective_ridge();

  for (int k = 1; k <= o.updates; ++k) {
    const Sample s = draw();
    recent.push_back(s);
    if (recent.size() > o.window) recent.pop_front();
    const std::size_t before = instrumentation::regression_factorizations.load();
    try {
      model.update(s);
      run.update_factorizations += instrumentation::regression_factorizations.load() - before;
      ++since_init;
    } catch (const DegenerateWindowError&) {
      std::vector<Sample> fresh(recent.begin(), recent.end());
      model = ResponseModel::init_batch(fresh, o.beta, o.lambda);
      ++run.reinitializations;
      since_init = 0;
      continue;
    }
    run.min_ridge = std::min(run.min_ridge, model.effective_ridge());
    if (since_init < static_cast<long>(o.window)) continue;

    const Matrix w_ref = oracle::batch_weighted_ridge(model.window(), o.beta, model.effective_ridge());
    const Matrix phi_ref = oracle::weighted_gram_inverse(model.window(), o.beta, model.effective_ridge());
    const double ew = oracle::relative_frobenius(model.weights(), w_ref);
    const double ep = oracle::relative_frobenius(model.phi(), phi_ref);
    ++run.compared;
    if (!(ew <= run.max_w_error)) run.max_w_error = std::isnan(ew) ? std::numeric_limits<double>::infinity() : ew;
    if (!(ep <= run.max_phi_error)) run.max_phi_error = std::isnan(ep) ? std::numeric_limits<double>::infinity() : ep;
    if (run.first_w_exceed < 0 && !(ew <= o.tolerance)) {
      run.first_w_exceed = k;
      run.w_error_at_first = ew;
    }
    if (run.first_phi_exceed < 0 && !(ep <= o.tolerance)) run.first_phi_exceed = k;
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

struct GuardProbe {
  bool threw = false;
  double denominator = std::numeric_limits<double>::quiet_NaN();
  bool state_restored = false;
};

/// A window whose only sample exciting one input direction is the oldest;
/// every newer sample is the same vector. Removing the oldest must trip the
/// denominator guard and leave the model unchanged.
inline GuardProbe collinear_window_probe(int inputs = 5, std::size_t window = 10, double beta = 0.95,
                                         double lambda = 1e-12) {
  std::vector<Sample> samples;
  Vector lone = Vector::Zero(inputs);
  lone(0) = 1.0;
  Vector repeated = Vector::Zero(inputs);
  repeated(1) = 0.5;
  Vector y = Vector::Constant(3, 1.0);
  samples.push_back(make_sample(lone, y, 1));
  for (std::size_t k = 1; k < window; ++k) samples.push_back(make_sample(repeated, y, static_cast<long>(k + 1)));
  ResponseModel model = ResponseModel::init_batch(samples, beta, lambda);
  const Matrix w_before = model.weights();
  const Matrix phi_before = model.phi();
  GuardProbe probe;
  try {
    model.update(make_sample(repeated, y, static_cast<long>(window + 1)));
  } catch (const DegenerateWindowError& e) {
    probe.threw = true;
    probe.denominator = e.denominator();
  }
  probe.state_restored = model.weights() == w_before && model.phi() == phi_before && model.window().size() == window;
  return probe;
}

inline Report regression_suite(const RegressionOptions& o = {}) {
  Report r;
  r.suite = "regression";
  const RegressionRun run = regression_equivalence(o);
  std::string where = "G=" + std::to_string(o.inputs) + " M=" + std::to_string(o.outputs) + " L=" +
                      std::to_string(o.window) + " beta=" + num(o.beta) + " lambda=" + num(o.lambda) + " updates=" +
                      std::to_string(o.updates) + " compared=" + std::to_string(run.compared) +
                      " reinit=" + std::to_string(run.reinitializations);
  r.add("w_vs_batch_max_rel_error", run.max_w_error, o.tolerance, run.max_w_error <= o.tolerance,
        where + (run.first_w_exceed > 0 ? "; first above tolerance at update " + std::to_string(run.first_w_exceed) +
                                               " (error " + num(run.w_error_at_first) + ")"
                                         : ""));
  r.add("phi_vs_direct_inverse_max_rel_error", run.max_phi_error, o.tolerance, run.max_phi_error <= o.tolerance,
        run.first_phi_exceed > 0 ? "first above tolerance at update " + std::to_string(run.first_phi_exceed) : "");
  r.add("runtime_s", run.seconds, 5.0, run.seconds < 5.0);
  r.info("min_effective_ridge", run.min_ridge);
  r.add("update_factorizations", static_cast<double>(run.update_factorizations), 0.0, run.update_factorizations == 0);
  const GuardProbe probe = collinear_window_probe();
  r.add("collinear_window_guard", probe.denominator, kRemovalDenominatorFloor, probe.threw && probe.state_restored,
        probe.threw ? (probe.state_restored ? "DegenerateWindowError raised; model unchanged" : "raised but state changed")
                    : "guard did not fire");
  return r;
}

// --- power flow -----------------------------------------------------------------

namespace cases {

inline CMatrix coupled(int phases, Complex self, double mutual) {
  CMatrix z(phases, phases);
  for (int r = 0; r < phases; ++r)
    for (int c = 0; c < phases; ++c) z(r, c) = r == c ? self : mutual * self;
  return z;
}

/// Source bus 1 feeding bus 2 (phase A only) through z; constant-power load s.
inline NetworkCase two_bus(Complex z, Complex s, double v_slack = 1.0) {
  NetworkCase c;
  c.name = "two_bus";
  c.bases = {1.0, 1.0};
  c.v_slack = v_slack;
  c.slack = 1;
  const PhaseSet a = *PhaseSet::parse("A");
  c.nodes = {{1, a}, {2, a}};
  c.branches = {{1, 2, a, CMatrix::Constant(1, 1, z)}};
  c.loads = {{{2, Phase::A}, s, ZipCoefficients::constant_power(), ZipCoefficients::constant_power()}};
  c.monitored = {{2, Phase::A}};
  return c;
}

/// Three-phase 3-bus line with mutual coupling and ZIP loads.
inline NetworkCase three_bus_line() {
  NetworkCase c;
  c.name = "three_bus_line";
  c.bases = {1.0, 1.0};
  c.slack = 1;
  const PhaseSet abc = *PhaseSet::parse("ABC");
  c.nodes = {{1, abc}, {2, abc}, {3, abc}};
  c.branches = {{1, 2, abc, coupled(3, {0.01, 0.02}, 0.3)}, {2, 3, abc, coupled(3, {0.015, 0.025}, 0.25)}};
  const ZipCoefficients zp{0.3, 0.3, 0.4}, zq{0.5, 0.2, 0.3};
  c.loads = {{{2, Phase::A}, {0.30, 0.10}, zp, zq}, {{2, Phase::B}, {0.25, 0.12}, zp, zq},
             {{2, Phase::C}, {0.35, 0.08}, zp, zq}, {{3, Phase::A}, {0.40, 0.15}, zq, zp},
             {{3, Phase::B}, {0.20, 0.05}, zq, zp}, {{3, Phase::C}, {0.30, 0.20}, zq, zp}};
  c.inverters = {{{3, Phase::B}, 0.3, 0.25, true}};
  c.monitored = {{2, Phase::A}, {3, Phase::A}, {3, Phase::B}, {3, Phase::C}};
  return c;
}

/// 4-bus feeder with a two-phase lateral.
inline NetworkCase four_bus_lateral() {
  NetworkCase c;
  c.name = "four_bus_lateral";
  c.bases = {1.0, 1.0};
  c.v_slack = 1.02;
  c.slack = 1;
  const PhaseSet abc = *PhaseSet::parse("ABC");
  const PhaseSet ac = *PhaseSet::parse("AC");
  c.nodes = {{1, abc}, {2, abc}, {3, abc}, {4, ac}};
  c.branches = {{1, 2, abc, coupled(3, {0.008, 0.016}, 0.3)},
                {2, 3, abc, coupled(3, {0.012, 0.020}, 0.3)},
                {2, 4, ac, coupled(2, {0.020, 0.030}, 0.2)}};
  const ZipCoefficients zp{0.24, 0.30, 0.46}, zq{0.60, 0.30, 0.10};
  c.loads = {{{2, Phase::A}, {0.20, 0.08}, zp, zq}, {{2, Phase::B}, {0.22, 0.07}, zp, zq},
             {{3, Phase::A}, {0.25, 0.10}, zq, zp}, {{3, Phase::B}, {0.30, 0.12}, zq, zp},
             {{3, Phase::C}, {0.18, 0.06}, zq, zp}, {{4, Phase::A}, {0.15, 0.05}, zp, zp},
             {{4, Phase::C}, {0.12, 0.04}, zp, zp}};
  c.inverters = {{{4, Phase::A}, 0.2, 0.18, true}, {{3, Phase::C}, 0.2, 0.15, true}};
  c.monitored = {{3, Phase::A}, {4, Phase::A}, {4, Phase::C}};
  return c;
}

/// Every load switched to constant impedance.
inline NetworkCase constant_impedance(NetworkCase c) {
  for (ZipLoad& l : c.loads) l.zip_p = l.zip_q = ZipCoefficients{1.0, 0.0, 0.0};
  return c;
}

}  // namespace cases

/// Voltages in (node, phase) order from the production solver, inverter
/// outputs injected as constant power.
inline VoltageSolution solve_case(const NetworkCase& c, const std::map<NodePhase, Complex>& extra,
                                  const SolverSettings& settings) {
  const AdmittanceSystem sys = build_admittance(c);
  InjectionSet inj = case_injections(c, sys);
  for (const auto& [np, s] : extra) add_injection(inj, sys, np, s);
  return solve(sys, inj, settings);
}

inline double max_abs_difference(const VoltageSolution& sol, const std::vector<NodePhase>& order, const CVector& ref) {
  double worst = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k)
    worst = std::max(worst, std::abs(sol.at(order[k]) - ref(static_cast<Eigen::Index>(k))));
  return worst;
}

struct BalanceTerms {
  double generation = 0.0;  // slack + inverter active power
  double load = 0.0;
  double loss = 0.0;        // sum of branch I^2 R from branch currents
  double residual() const { return generation - load - loss; }
};

/// Active-power balance of a solved case, rebuilt branch by branch.
inline BalanceTerms power_balance(const NetworkCase& c, const VoltageSolution& sol,
                                  const std::map<NodePhase, Complex>& extra) {
  BalanceTerms b;
  for (const Branch& br : c.branches) {
    const Eigen::Index k = br.phases.size();
    CVector vf(k), vt(k);
    Eigen::Index r = 0;
    for (Phase p : kAllPhases) {
      if (!br.phases.contains(p)) continue;
      vf(r) = sol.at({br.from, p});
      vt(r) = sol.at({br.to, p});
      ++r;
    }
    const CVector current = br.z.fullPivLu().solve(vf - vt);
    b.loss += ((vf - vt).array() * current.array().conjugate()).sum().real();
    if (br.from == c.slack) b.generation += (vf.array() * current.array().conjugate()).sum().real();
    if (br.to == c.slack) b.generation -= (vt.array() * current.array().conjugate()).sum().real();
  }
  for (const ZipLoad& l : c.loads) {
    if (l.at.node == c.slack) continue;
    const double m = std::abs(sol.at(l.at));
    b.load += l.s0.real() * (l.zip_p.z * m * m + l.zip_p.i * m + l.zip_p.p);
  }
  for (const auto& [np, s] : extra)
    if (np.node != c.slack) b.generation += s.real();
  return b;
}

struct PowerflowOptions {
  std::string bundled_case;  // empty: skip the bundled-case checks
  int balance_samples = 60;
  std::uint64_t seed = 11;
};

inline Report powerflow_suite(const PowerflowOptions& o = {}) {
  Report r;
  r.suite = "powerflow";
  SolverSettings tight;
  tight.tol = 1e-13;
  tight.max_iter = 5000;

  double worst = 0.0;
  const std::vector<std::pair<Complex, Complex>> two_bus = {
      {{0.01, 0.02}, {0.5, 0.2}}, {{0.05, 0.05}, {1.0, 0.5}}, {{0.02, 0.08}, {2.0, -0.3}}, {{0.1, 0.03}, {-0.4, 0.1}}};
  for (const auto& [z, s] : two_bus) {
    const NetworkCase c = cases::two_bus(z, s);
    const VoltageSolution sol = solve_case(c, {}, tight);
    worst = std::max(worst, std::abs(std::abs(sol.at({2, Phase::A})) - oracle::two_bus_voltage(c.v_slack, z, s)));
  }
  r.add("two_bus_analytic_max_error", worst, 1e-8, worst <= 1e-8, std::to_string(two_bus.size()) + " cases");

  std::vector<NetworkCase> linear = {cases::constant_impedance(cases::three_bus_line()),
                                     cases::constant_impedance(cases::four_bus_lateral())};
  if (!o.bundled_case.empty()) linear.push_back(cases::constant_impedance(load_case(o.bundled_case)));
  worst = 0.0;
  for (const NetworkCase& c : linear) {
    const VoltageSolution sol = solve_case(c, {}, tight);
    worst = std::max(worst, max_abs_difference(sol, c.node_phases(), oracle::constant_impedance_voltages(c)));
  }
  r.add("constant_impedance_vs_linear_solve", worst, 1e-10, worst <= 1e-10, std::to_string(linear.size()) + " cases");

  worst = 0.0;
  int compared = 0;
  for (const NetworkCase& c : {cases::two_bus({0.02, 0.04}, {0.8, 0.3}), cases::three_bus_line(), cases::four_bus_lateral()}) {
    std::map<NodePhase, Complex> extra;
    for (const Inverter& inv : c.inverters) extra[inv.at] += Complex(inv.p_peak, -0.05);
    const VoltageSolution sol = solve_case(c, extra, tight);
    const oracle::GaussSeidelResult gs = oracle::gauss_seidel(c, extra);
    worst = std::max(worst, max_abs_difference(sol, gs.order, gs.v));
    ++compared;
  }
  r.add("small_cases_vs_gauss_seidel", worst, 1e-6, worst <= 1e-6, std::to_string(compared) + " cases");

  if (!o.bundled_case.empty()) {
    const NetworkCase c = load_case(o.bundled_case);
    const auto net = std::make_shared<const NetworkPlant>(c, SolverSettings{});
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst_balance = 0.0;
    int solves = 0;
    for (int k = 0; k < o.balance_samples; ++k) {
      Exogenous ex{0.0, 1.1 * u(rng), 0.2 + 0.8 * u(rng), k % 2 == 0};
      const Vector q_max = net->q_max(ex);
      Vector q(q_max.size());
      for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = q_max(i) * (2.0 * u(rng) - 1.0);
      const Vector qx_max = net->external_q_max(ex);
      Vector qx(qx_max.size());
      for (Eigen::Index i = 0; i < qx.size(); ++i) qx(i) = qx_max(i) * (2.0 * u(rng) - 1.0);
      VoltageSolution sol;
      try {
        sol = net->solve(ex, q, qx);
      } catch (const ConvergenceError&) {
        continue;
      }
      NetworkCase scaled = c;
      for (ZipLoad& l : scaled.loads) {
        l.s0 *= ex.load_scale;
        if (!ex.nonlinear_loads) l.zip_p = l.zip_q = ZipCoefficients::constant_power();
      }
      std::map<NodePhase, Complex> gen;
      for (Eigen::Index i = 0; i < q.size(); ++i) {
        const InverterChannel& ch = net->channels()[static_cast<std::size_t>(i)];
        gen[ch.at] += Complex(net->active_power(ch.inverter, ex), q(i));
      }
      for (Eigen::Index i = 0; i < qx.size(); ++i) {
        const int idx = net->external()[static_cast<std::size_t>(i)];
        gen[c.inverters[static_cast<std::size_t>(idx)].at] += Complex(net->active_power(idx, ex), qx(i));
      }
      worst_balance = std::max(worst_balance, std::abs(power_balance(scaled, sol, gen).residual()));
      ++solves;
    }
    r.add("bundled_power_balance", worst_balance, 1e-8, solves > 0 && worst_balance <= 1e-8,
          std::to_string(solves) + " converged solves at the default tolerance");
  }
  return r;
}

// --- convergence ----------------------------------------------------------------

struct ConvergenceOptions {
  long horizon = 300;
  double rate_slack = 0.05;
  double distance_target = 1e-6;
  double noise_sigma = 0.001;
  long snapshot_step = 1;
  std::uint64_t seed = 5;
};

struct ContractionResult {
  Vector q_star;
  int oracle_iterations = 0;
  double max_ratio = 0.0;        // over steps with |q_t - q*| above the target
  long first_violation = -1;     // step whose ratio exceeded the bound
  double min_distance = std::numeric_limits<double>::infinity();
  double final_distance = 0.0;
  bool reached = false;
  long reached_step = -1;
  ConvergenceReport report;
};

/// Noiseless learned loop on a frozen snapshot against the model-exact optimum.
inline ContractionResult contraction_run(const std::shared_ptr<const NetworkPlant>& net, const Exogenous& ex,
                                         const ControllerConfig& cc, const ConvergenceOptions& o, double noise_sigma) {
  ContractionResult res;
  FrozenPlant reference(net, ex, Vector(), 0.0, 0);
  const OracleResult oracle = ideal_qp_oracle(reference, reference.q_max(), cc, Vector::Zero(net->channel_count()), 1e-9, 2000, 1e-5);
  res.q_star = oracle.q;
  res.oracle_iterations = oracle.iterations;
  FrozenPlant plant(net, ex, Vector(), noise_sigma, o.seed);
  const ScenarioTrace trace = run_algorithm1(plant, cc, o.horizon, o.seed);
  if (!trace.complete()) throw Error("convergence run aborted: " + trace.message);
  res.report = convergence_report(trace, cc, res.q_star, o.rate_slack, o.distance_target);
  const double bound = res.report.rate + o.rate_slack;
  const auto& d = res.report.distances;
  for (std::size_t k = 0; k < d.size(); ++k) {
    res.min_distance = std::min(res.min_distance, d[k]);
    if (!res.reached && d[k] <= o.distance_target) {
      res.reached = true;
      res.reached_step = res.report.steps[k];
    }
    if (res.reached || k + 1 >= d.size()) continue;
    const double ratio = res.report.ratios[k];
    res.max_ratio = std::max(res.max_ratio, ratio);
    if (res.first_violation < 0 && ratio > bound) res.first_violation = res.report.steps[k];
  }
  res.final_distance = d.empty() ? 0.0 : d.back();
  return res;
}

inline Report convergence_suite(const ScenarioConfig& cfg, const ConvergenceOptions& o = {}) {
  Report r;
  r.suite = "convergence";
  const NetworkCase c = load_case(cfg.case_path.string());
  const Profile profile = scenario_profile(cfg);
  SolverSettings tight = cfg.powerflow;
  tight.tol = 1e-13;
  tight.max_iter = std::max(tight.max_iter, 1000);
  auto net = std::make_shared<const NetworkPlant>(c, tight);
  const Exogenous ex = exogenous_at(profile, o.snapshot_step);
  ControllerConfig cc = resolve_controller(cfg.controller, net->monitored_count());
  cc.alpha1 = 10.0;
  cc.alpha2 = 5.0;
  cc.step = 0.1;
  FrozenPlant frozen(net, ex, Vector(), 0.0, 0);
  const double bound = std::abs(1.0 - cc.alpha2 * cc.step) + o.rate_slack;

  const ContractionResult strict = contraction_run(net, ex, cc, o, 0.0);
  std::string detail = "|q*|=" + num(strict.q_star.norm()) + " min |q-q*|=" + num(strict.min_distance) +
                       " final=" + num(strict.final_distance);
  if (strict.first_violation > 0) detail += "; ratio bound first exceeded at step " + std::to_string(strict.first_violation);
  r.add("contraction_ratio_max", strict.max_ratio, bound, strict.first_violation < 0, detail);
  r.add("reaches_q_star", strict.min_distance, o.distance_target, strict.reached,
        strict.reached ? "at step " + std::to_string(strict.reached_step) : "target distance not reached in " +
                                                                                std::to_string(o.horizon) + " steps");

  const ContractionResult noisy = contraction_run(net, ex, cc, o, o.noise_sigma);
  r.add("noisy_terminal_neighborhood", noisy.report.max_after_entry, 3.0 * noisy.report.terminal_radius,
        noisy.report.stays_in_neighborhood(3.0),
        "entry radius " + num(noisy.report.terminal_radius) + " at step " + std::to_string(noisy.report.entry_step));
  r.info("theta_hat_noisy", noisy.report.bounds.theta_hat);

  // Same run with the target set to the uncontrolled voltages, where q* = 0
  // lies in every window's span.
  ControllerConfig centered = cc;
  centered.v_target = frozen(Vector::Zero(net->channel_count()));
  const ContractionResult ref = contraction_run(net, ex, centered, o, 0.0);
  r.info("contraction_ratio_max_centered_target", ref.max_ratio,
         std::string(ref.first_violation < 0 ? "within" : "above") + " bound " + num(bound) +
             (ref.reached ? "; reached 1e-6 at step " + std::to_string(ref.reached_step) : "; 1e-6 not reached"));
  return r;
}

// --- closed loop ----------------------------------------------------------------

struct ClosedLoop {
  ScenarioTrace proposed;
  ScenarioTrace droop;
  Metrics proposed_metrics;
  Metrics droop_metrics;
  Matrix stale_w;
  std::vector<double> online_mae;  // one-step-ahead: W_{t-1} applied to q_t
  std::vector<double> stale_mae;   // fixed W_stale on the same dispatch
  std::vector<long> judged_steps;
  long online_better = 0;
  double seconds = 0.0;
  std::size_t factorizations = 0;
  long initializations = 0;
  double mean_step_ms = 0.0;
  long timed_steps = 0;
};

/// Steps (1-based) at which each event first takes effect.
inline std::vector<long> event_steps(const Profile& p) {
  std::vector<long> out;
  for (const Event& e : p.events) {
    for (std::size_t k = 0; k < p.points.size(); ++k) {
      if (p.points[k].time_s + 1e-9 >= e.time_s) {
        out.push_back(static_cast<long>(k + 1));
        break;
      }
    }
  }
  return out;
}

inline ClosedLoop closed_loop(const ScenarioConfig& cfg, long excluded_after_event = 3) {
  ClosedLoop out;
  const auto start = std::chrono::steady_clock::now();
  const NetworkCase c = load_case(cfg.case_path.string());
  const Profile profile = scenario_profile(cfg);
  const std::size_t before = instrumentation::regression_factorizations.load();
  out.proposed = run(c, Policy::Proposed, profile, cfg, cfg.seed);
  out.factorizations = instrumentation::regression_factorizations.load() - before;
  out.droop = run(c, Policy::Droop, profile, cfg, cfg.seed);
  out.stale_w = build_stale_model(c, profile, cfg);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const long from = settled_step(cfg);
  out.proposed_metrics = compute_metrics(out.proposed, cfg.v_lo, cfg.v_hi, from, cfg.interval);
  out.droop_metrics = compute_metrics(out.droop, cfg.v_lo, cfg.v_hi, from, cfg.interval);
  out.online_mae = compute_mae(out.proposed, true);
  out.stale_mae = compute_mae(out.stale_w, out.proposed);

  const std::vector<long> events = event_steps(profile);
  double total_ms = 0.0;
  for (std::size_t k = 0; k < out.proposed.rows.size(); ++k) {
    const TraceRow& row = out.proposed.rows[k];
    if (row.mode == StepMode::Control) {
      total_ms += row.t_regress_ms + row.t_control_ms;
      ++out.timed_steps;
    }
    if (!std::isfinite(out.online_mae[k])) continue;
    bool excluded = false;
    for (long e : events)
      if (row.t >= e && row.t < e + excluded_after_event) excluded = true;
    if (excluded) continue;
    out.judged_steps.push_back(row.t);
    if (out.online_mae[k] < out.stale_mae[k]) ++out.online_better;
  }
  for (const TraceRow& row : out.proposed.rows)
    if (row.mode == StepMode::Warmup && row.v_pred.size() > 0) ++out.initializations;
  out.mean_step_ms = out.timed_steps > 0 ? total_ms / static_cast<double>(out.timed_steps) : 0.0;
  return out;
}

}  // namespace vvc::verify
