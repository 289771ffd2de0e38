#include "vvc/oracles.hpp"
#include "vvc/powerflow.hpp"
#include "vvc/verify.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace vvc;
namespace cases = vvc::verify::cases;

namespace {

const SolverSettings kTight{1e-13, 5000};

NetworkCase bundled() { return load_case(std::string(VVC_DATA_DIR) + "/ieee33_3ph.json"); }

}  // namespace

TEST(Admittance, SingleBranchScalar) {
  const NetworkCase c = cases::two_bus({0.0, 0.1}, {0.0, 0.0});
  const AdmittanceSystem sys = build_admittance(c);
  ASSERT_EQ(sys.dimension(), 1);
  EXPECT_NEAR(sys.ynn()(0, 0).real(), 0.0, 1e-12);
  EXPECT_NEAR(sys.ynn()(0, 0).imag(), -10.0, 1e-12);
}

TEST(Admittance, BundledDimension) {
  const NetworkCase c = bundled();
  long phases = 0;
  for (const Node& n : c.nodes)
    if (n.id != c.slack) phases += n.phases.size();
  const AdmittanceSystem sys = build_admittance(c);
  EXPECT_EQ(sys.dimension(), phases);
}

TEST(Admittance, ZeroImpedanceIsSingular) {
  const NetworkCase c = cases::two_bus({0.0, 0.0}, {0.1, 0.0});
  EXPECT_THROW(build_admittance(c), SingularNetworkError);
}

TEST(Admittance, MatchesIncidenceAssembly) {
  const NetworkCase c = cases::four_bus_lateral();
  const AdmittanceSystem sys = build_admittance(c);
  const oracle::IncidenceNetwork ref = oracle::incidence_network(c);
  ASSERT_EQ(ref.free.size(), static_cast<std::size_t>(sys.dimension()));
  for (std::size_t r = 0; r < ref.free.size(); ++r)
    for (std::size_t k = 0; k < ref.free.size(); ++k)
      EXPECT_LT(std::abs(sys.ynn()(r, k) - ref.y(ref.free[r], ref.free[k])), 1e-9);
}

TEST(ZipPower, Laws) {
  ZipLoad l{{2, Phase::A}, {0.4, 0.2}, ZipCoefficients::constant_power(), ZipCoefficients::constant_power()};
  EXPECT_LT(std::abs(zip_power(l, std::polar(0.87, 0.3)) - l.s0), 1e-15);

  l.zip_p = l.zip_q = {1.0, 0.0, 0.0};
  EXPECT_LT(std::abs(zip_power(l, {0.9, 0.0}) - 0.81 * l.s0), 1e-15);

  l.zip_p = l.zip_q = {0.2, 0.3, 0.5};
  EXPECT_LT(std::abs(zip_power(l, std::polar(0.95, -0.1)) - 0.9655 * l.s0), 1e-15);
}

TEST(Solve, NoLoadIsFlat) {
  NetworkCase c = cases::three_bus_line();
  c.loads.clear();
  c.v_slack = 1.03;
  const AdmittanceSystem sys = build_admittance(c);
  const VoltageSolution sol = solve(sys, case_injections(c, sys));
  EXPECT_EQ(sol.iterations, 1);
  for (Eigen::Index k = 0; k < sol.v.size(); ++k) EXPECT_NEAR(std::abs(sol.v(k)), 1.03, 1e-14);
  EXPECT_NEAR(sol.loss_total, 0.0, 1e-12);
}

TEST(Solve, TwoBusAnalytic) {
  const Complex z{0.01, 0.05}, s{0.5, 0.2};
  const NetworkCase c = cases::two_bus(z, s);
  const VoltageSolution sol = verify::solve_case(c, {}, kTight);
  EXPECT_NEAR(std::abs(sol.at({2, Phase::A})), oracle::two_bus_voltage(1.0, z, s), 1e-8);
}

TEST(Solve, TwoBusAnalyticAcrossLoading) {
  const Complex z{0.02, 0.04};
  for (double p : {0.1, 0.5, 1.0, 2.0}) {
    const Complex s{p, 0.4 * p};
    const VoltageSolution sol = verify::solve_case(cases::two_bus(z, s, 1.05), {}, kTight);
    EXPECT_NEAR(std::abs(sol.at({2, Phase::A})), oracle::two_bus_voltage(1.05, z, s), 1e-8) << "p = " << p;
  }
}

TEST(Solve, ConstantImpedanceEqualsLinearSolve) {
  for (const NetworkCase& base : {cases::three_bus_line(), cases::four_bus_lateral()}) {
    const NetworkCase c = cases::constant_impedance(base);
    const VoltageSolution sol = verify::solve_case(c, {}, kTight);
    const oracle::IncidenceNetwork net = oracle::incidence_network(c);
    EXPECT_LT(verify::max_abs_difference(sol, net.order, oracle::constant_impedance_voltages(c)), 1e-10) << c.name;
  }
}

TEST(Solve, AgreesWithGaussSeidel) {
  const std::map<NodePhase, Complex> extra{{{3, Phase::C}, {0.15, -0.05}}, {{4, Phase::A}, {0.10, 0.08}}};
  const NetworkCase c = cases::four_bus_lateral();
  const VoltageSolution sol = verify::solve_case(c, extra, kTight);
  const oracle::GaussSeidelResult gs = oracle::gauss_seidel(c, extra);
  EXPECT_LT(verify::max_abs_difference(sol, gs.order, gs.v), 1e-6);
}

TEST(Solve, BundledPowerBalance) {
  const NetworkCase c = bundled();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.02, 0.02);
  std::map<NodePhase, Complex> extra;
  for (const Inverter& inv : c.inverters) extra[inv.at] = {0.6 * inv.p_peak, u(rng)};
  const VoltageSolution sol = verify::solve_case(c, extra, {});
  const verify::BalanceTerms b = verify::power_balance(c, sol, extra);
  EXPECT_LE(std::abs(b.residual()), 1e-8);
  EXPECT_GT(b.loss, 0.0);
}

TEST(Solve, ReportsNonConvergence) {
  // Far beyond the two-bus nose point.
  const NetworkCase c = cases::two_bus({0.1, 0.5}, {3.0, 1.0});
  try {
    verify::solve_case(c, {}, {1e-10, 50});
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.iterations(), 50);
    EXPECT_GT(e.residual(), 1e-10);
  }
}

TEST(Measure, NoiselessIsExact) {
  const NetworkCase c = cases::three_bus_line();
  const VoltageSolution sol = verify::solve_case(c, {}, kTight);
  const std::vector<Eigen::Index> pos = sol.layout->positions(c.monitored);
  std::mt19937_64 rng(1);
  EXPECT_EQ(measure(sol, pos, 0.0, rng), sol.magnitudes(pos));
}

TEST(Measure, NoiseStatistics) {
  const NetworkCase c = cases::two_bus({0.01, 0.05}, {0.5, 0.2});
  const VoltageSolution sol = verify::solve_case(c, {}, kTight);
  const std::vector<Eigen::Index> pos = sol.layout->positions(c.monitored);
  const double truth = sol.magnitudes(pos)(0);
  std::mt19937_64 rng(42);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int k = 0; k < n; ++k) {
    const double e = measure(sol, pos, 0.001, rng)(0) - truth;
    sum += e;
    sq += e * e;
  }
  const double mean = sum / n;
  const double var = (sq - n * mean * mean) / (n - 1);
  EXPECT_LT(std::abs(mean), 1e-4);
  EXPECT_NEAR(var, 1e-6, 0.05e-6);
}

TEST(Measure, SeedDeterminism) {
  const NetworkCase c = cases::three_bus_line();
  const VoltageSolution sol = verify::solve_case(c, {}, kTight);
  const std::vector<Eigen::Index> pos = sol.layout->positions(c.monitored);
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(measure(sol, pos, 0.001, a), measure(sol, pos, 0.001, b));
}
