#include "vvc/controller.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace vvc;

namespace {

/// v = v0 + J^T q, with optional measurement noise.
struct LinearPlant {
  Matrix j;  // G x M
  Vector v0;
  Vector box;
  double sigma = 0.0;
  std::mt19937_64 rng{1};

  Eigen::Index channel_count() const { return j.rows(); }
  Eigen::Index monitored_count() const { return j.cols(); }
  Vector q_max(long) const { return box; }
  PlantObservation apply(long, const Vector& q) {
    PlantObservation obs;
    obs.monitored_true = v0 + j.transpose() * q;
    obs.measured = obs.monitored_true;
    std::normal_distribution<double> n(0.0, 1.0);
    if (sigma > 0.0)
      for (auto& x : obs.measured) x += sigma * n(rng);
    obs.all_true = obs.monitored_true;
    return obs;
  }
};

LinearPlant toy_plant() {
  LinearPlant p;
  p.j.resize(2, 3);
  p.j << 0.05, 0.04, 0.02,
         0.01, 0.03, 0.06;
  p.v0 = Vector::Constant(3, 1.04);
  p.box = Vector::Constant(2, 1.0);
  return p;
}

/// Unconstrained minimizer of alpha1/2 |v0 + J^T q - vt|^2 + alpha2/2 |q|^2.
Vector linear_optimum(const LinearPlant& p, const ControllerConfig& cfg) {
  const Eigen::Index g = p.j.rows();
  const Matrix h = cfg.alpha1 * p.j * p.j.transpose() + cfg.alpha2 * Matrix::Identity(g, g);
  return -h.ldlt().solve(cfg.alpha1 * p.j * (p.v0 - cfg.target(p.j.cols())));
}

ControllerConfig reference_settings() {
  ControllerConfig cfg;
  cfg.alpha1 = 10.0;
  cfg.alpha2 = 5.0;
  cfg.step = 0.1;
  cfg.dither = 0.05;
  cfg.regression = {10, 0.95, 1e-8};
  return cfg;
}

}  // namespace

TEST(QLimit, Capability) {
  EXPECT_DOUBLE_EQ(q_limit(200.0, 200.0).q_max, 0.0);
  EXPECT_DOUBLE_EQ(q_limit(100.0, 60.0).q_max, 80.0);
  EXPECT_DOUBLE_EQ(q_limit(100.0, 0.0).q_max, 100.0);
}

TEST(QLimit, ForecastAboveRating) {
  const QLimit within = q_limit(100.0, 100.5);
  EXPECT_DOUBLE_EQ(within.q_max, 0.0);
  EXPECT_TRUE(within.clamped);
  EXPECT_THROW(q_limit(100.0, 102.0), InfeasibleForecastError);
  EXPECT_THROW(q_limit(0.0, 0.0), ValidationError);
  EXPECT_THROW(q_limit(10.0, -1.0), ValidationError);
}

TEST(Project, Box) {
  const Vector box = Vector::Constant(3, 0.3);
  Vector inside(3);
  inside << 0.1, -0.2, 0.3;
  EXPECT_EQ(project(inside, box), inside);

  Vector out(3);
  out << 0.5, -0.9, 0.0;
  const Vector p = project(out, box);
  EXPECT_DOUBLE_EQ(p(0), 0.3);
  EXPECT_DOUBLE_EQ(p(1), -0.3);
  EXPECT_EQ(project(p, box), p);
  EXPECT_THROW(project(out, Vector::Ones(2)), DimensionError);
}

TEST(Project, IdempotentAndNonExpansive) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vector box(6), a(6), b(6);
    for (int k = 0; k < 6; ++k) {
      box(k) = u(rng);
      a(k) = n(rng);
      b(k) = n(rng);
    }
    const Vector pa = project(a, box);
    EXPECT_EQ(project(pa, box), pa);
    EXPECT_LE((pa - project(b, box)).norm(), (a - b).norm() + 1e-15);
    EXPECT_TRUE(((pa.array().abs() - box.array()) <= 0.0).all());
  }
}

TEST(GradientStep, ZeroVoltageErrorLeavesPenaltyTerm) {
  ControllerConfig cfg = reference_settings();
  const Vector v = Vector::Constant(2, 1.0);
  const Vector q = Vector::Constant(3, 0.2);
  const Vector dq = gradient_step(Matrix::Constant(3, 2, 0.4), v, cfg, q);
  EXPECT_LT((dq - cfg.alpha2 * q).norm(), 1e-15);
}

TEST(GradientStep, NoInformationNoMove) {
  const ControllerConfig cfg = reference_settings();
  const Vector dq = gradient_step(Matrix::Zero(2, 3), Vector::Constant(3, 1.03), cfg, Vector::Zero(2));
  EXPECT_EQ(dq, Vector::Zero(2));
}

TEST(GradientStep, OneChannelToy) {
  ControllerConfig cfg = reference_settings();
  cfg.v_target = Vector::Constant(1, 1.0);
  const Vector dq = gradient_step(Matrix::Constant(1, 1, 0.1), Vector::Constant(1, 1.02), cfg, Vector::Constant(1, 0.1));
  EXPECT_NEAR(dq(0), 0.52, 1e-12);
}

TEST(GradientStep, ShapeCheck) {
  const ControllerConfig cfg = reference_settings();
  EXPECT_THROW(gradient_step(Matrix::Zero(2, 3), Vector::Ones(2), cfg, Vector::Zero(2)), DimensionError);
}

TEST(ControlUpdate, StationaryAndClamped) {
  const Vector box = Vector::Constant(2, 0.5);
  Vector q(2);
  q << 0.2, 0.7;
  EXPECT_EQ(control_update(q, Vector::Zero(2), 0.1, box), project(q, box));

  Vector dq(2);
  dq << -10.0, 0.0;
  EXPECT_DOUBLE_EQ(control_update(q, dq, 0.1, box)(0), 0.5);
}

TEST(ControlUpdate, ScalarContraction) {
  const ControllerConfig cfg = reference_settings();
  Vector q = Vector::Constant(1, 0.4);
  const Vector box = Vector::Constant(1, 10.0);
  for (int k = 0; k < 10; ++k) {
    const Vector dq = gradient_step(Matrix::Constant(1, 1, 0.3), Vector::Constant(1, 1.0), cfg, q);
    const Vector next = control_update(q, dq, cfg.step, box);
    EXPECT_NEAR(next(0) / q(0), 0.5, 1e-12);
    q = next;
  }
}

TEST(Validate, StepSizeBound) {
  ControllerConfig cfg = reference_settings();
  EXPECT_NO_THROW(validate(cfg));
  cfg.step = 0.5;
  try {
    validate(cfg);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("0 < d < 2/alpha2"), std::string::npos) << e.what();
  }
  cfg = reference_settings();
  cfg.regression.lambda = 0.0;
  EXPECT_THROW(validate(cfg), ValidationError);
  cfg = reference_settings();
  cfg.alpha2 = 0.0;
  EXPECT_THROW(validate(cfg), ValidationError);
}

TEST(Objective, Value) {
  ControllerConfig cfg = reference_settings();
  const Vector v = Vector::Constant(2, 1.01);
  const Vector q = Vector::Constant(1, 0.2);
  EXPECT_NEAR(objective(cfg, v, q), 0.5 * (10.0 * 2e-4 + 5.0 * 0.04), 1e-15);
}

TEST(SpectralNorm, MatchesSvd) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(7, 5);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
  const double ref = Eigen::JacobiSVD<Matrix>(m).singularValues()(0);
  EXPECT_NEAR(detail::spectral_norm(m, 1000), ref, 1e-8 * ref);
  EXPECT_EQ(detail::spectral_norm(Matrix::Zero(3, 2)), 0.0);
}

TEST(RunAlgorithm1, WarmupOnlyHorizon) {
  LinearPlant plant = toy_plant();
  const ControllerConfig cfg = reference_settings();
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 10, 7);
  ASSERT_EQ(trace.rows.size(), 10u);
  for (const TraceRow& r : trace.rows) {
    EXPECT_EQ(r.mode, StepMode::Warmup);
    EXPECT_LE(r.q.cwiseAbs().maxCoeff(), cfg.dither * 1.0 + 1e-15);
  }
  // The last warm-up step fits the model but dispatches nothing further.
  EXPECT_EQ(trace.rows.back().v_pred.size(), 3);
}

TEST(RunAlgorithm1, Deterministic) {
  LinearPlant a = toy_plant(), b = toy_plant();
  a.sigma = b.sigma = 0.001;
  const ControllerConfig cfg = reference_settings();
  const ScenarioTrace ta = run_algorithm1(a, cfg, 40, 3);
  const ScenarioTrace tb = run_algorithm1(b, cfg, 40, 3);
  ASSERT_EQ(ta.rows.size(), tb.rows.size());
  for (std::size_t k = 0; k < ta.rows.size(); ++k) EXPECT_EQ(ta.rows[k].q, tb.rows[k].q);
}

TEST(RunAlgorithm1, RejectsBadStep) {
  LinearPlant plant = toy_plant();
  ControllerConfig cfg = reference_settings();
  cfg.step = 0.4;
  EXPECT_THROW(run_algorithm1(plant, cfg, 20, 1), ValidationError);
}

namespace {

// Last control step whose window still holds G + 1 dithered warm-up samples.
long identified_until(const ControllerConfig& cfg, Eigen::Index g) {
  return 2 * static_cast<long>(cfg.regression.window) - static_cast<long>(g) - 1;
}

}  // namespace

TEST(RunAlgorithm1, ContractsToLinearOptimum) {
  LinearPlant plant = toy_plant();
  const ControllerConfig cfg = reference_settings();
  const Vector q_star = linear_optimum(plant, cfg);
  ASSERT_LT(q_star.cwiseAbs().maxCoeff(), 1.0);
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 40, 11);
  const ConvergenceReport rep = convergence_report(trace, cfg, q_star, 0.05, 1e-9);
  EXPECT_DOUBLE_EQ(rep.rate, 0.5);
  // With the exact map the iteration is q - q* <- (I - d H)(q - q*).
  const Matrix h = cfg.alpha1 * plant.j * plant.j.transpose() + cfg.alpha2 * Matrix::Identity(2, 2);
  const Vector mu = (Vector::Ones(2) - cfg.step * h.selfadjointView<Eigen::Lower>().eigenvalues()).cwiseAbs();
  const long last = identified_until(cfg, 2);
  long checked = 0;
  for (std::size_t k = 0; k < rep.ratios.size() && rep.steps[k] <= last; ++k) {
    EXPECT_GE(rep.ratios[k], mu.minCoeff() - 1e-6) << "step " << rep.steps[k];
    EXPECT_LE(rep.ratios[k], mu.maxCoeff() + 1e-6) << "step " << rep.steps[k];
    EXPECT_LE(rep.ratios[k], rep.rate);
    ++checked;
  }
  EXPECT_GE(checked, 5);
}

TEST(RunAlgorithm1, ExcitationFadesWithDither) {
  // Once the dithered samples leave the window the trajectory alone no longer
  // spans the input space and the ridge pulls the estimate toward zero.
  LinearPlant plant = toy_plant();
  ControllerConfig cfg = reference_settings();
  cfg.regression.lambda = 1e-3;
  const double truth = Eigen::JacobiSVD<Matrix>(plant.j).singularValues()(0);
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 40, 11);
  const long last = identified_until(cfg, 2);
  double early = 0.0;
  for (const TraceRow& r : trace.rows)
    if (r.mode == StepMode::Control && r.t <= last) early = std::max(early, r.sensitivity_norm);
  EXPECT_GT(early, 0.5 * truth);
  EXPECT_LT(trace.rows.back().sensitivity_norm, 0.01 * truth);
  // An estimate near zero leaves only the penalty term, so q decays to 0
  // instead of the optimum.
  const Vector q_star = linear_optimum(plant, cfg);
  EXPECT_LT(trace.rows.back().q.norm(), 0.01 * q_star.norm());
}

TEST(RunAlgorithm1, NoisyRunStaysBounded) {
  LinearPlant plant = toy_plant();
  plant.sigma = 0.001;
  const ControllerConfig cfg = reference_settings();
  const Vector q_star = linear_optimum(plant, cfg);
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 300, 12);
  ASSERT_TRUE(trace.complete());
  const ConvergenceReport rep = convergence_report(trace, cfg, q_star);
  EXPECT_GT(rep.terminal_radius, 0.0);
  EXPECT_TRUE(rep.stays_in_neighborhood(3.0));
  for (double d : rep.distances) EXPECT_TRUE(std::isfinite(d));
}

TEST(RunAlgorithm1, FastestAtUnitPenaltyStep) {
  ControllerConfig cfg = reference_settings();
  const Vector q_star = linear_optimum(toy_plant(), cfg);
  const long last = identified_until(cfg, 2);
  double best_rate = 1.0;
  double best_d = 0.0;
  for (double d : {0.05, 0.1, 0.2, 0.3}) {
    cfg.step = d;
    LinearPlant p = toy_plant();
    const ScenarioTrace trace = run_algorithm1(p, cfg, 30, 13);
    const ConvergenceReport rep = convergence_report(trace, cfg, q_star, 0.05, 1e-9);
    // Below ~1e-7 the ridge bias in the estimate sets the fixed point.
    double worst = 0.0;
    for (std::size_t k = 0; k < rep.ratios.size() && rep.steps[k] <= last; ++k)
      if (rep.distances[k] > 1e-6) worst = std::max(worst, rep.ratios[k]);
    if (worst < best_rate) {
      best_rate = worst;
      best_d = d;
    }
  }
  EXPECT_DOUBLE_EQ(best_d, 0.2);
}

TEST(RunAlgorithm1, DegenerateWindowReentersWarmup) {
  // The target is out of reach, so q runs into a corner of the box and stays.
  // Once a single off-corner sample is left it alone excites one direction.
  LinearPlant plant = toy_plant();
  plant.v0 = Vector::Constant(3, 1.2);
  ControllerConfig cfg = reference_settings();
  cfg.alpha1 = 100.0;
  cfg.alpha2 = 0.5;
  cfg.regression.lambda = 1e-12;
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 40, 1);
  ASSERT_TRUE(trace.complete());
  long rewarm = 0;
  for (const TraceRow& r : trace.rows) {
    if (r.note != "rewarmup") continue;
    if (rewarm++ == 0) {
      EXPECT_GT(r.t, static_cast<long>(cfg.regression.window));
    }
  }
  EXPECT_GE(rewarm, 1);
  EXPECT_FALSE(trace.events.empty());
  // The step after a re-entry dithers again.
  for (std::size_t k = 0; k + 1 < trace.rows.size(); ++k) {
    if (trace.rows[k].note == "rewarmup") {
      EXPECT_EQ(trace.rows[k + 1].mode, StepMode::Warmup);
    }
  }
}

TEST(ConvergenceReport, NeedsControlSteps) {
  LinearPlant plant = toy_plant();
  const ControllerConfig cfg = reference_settings();
  const ScenarioTrace trace = run_algorithm1(plant, cfg, 12, 1);
  EXPECT_THROW(convergence_report(trace, cfg, Vector::Zero(2)), Error);
}
