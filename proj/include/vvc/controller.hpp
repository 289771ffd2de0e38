#pragma once

// Data-driven projected-gradient Volt/VAr controller.
//
// Each control interval the control center measures the monitored voltages,
// refreshes the response model, forms
//
//   dq = alpha1 * W~ (v_meas - v_target) + alpha2 * q
//
// and every inverter applies q <- P_box(q - d * dq) locally. The box is the
// per-channel capability |q_i| <= sqrt(S_i^2 - Pbar_i^2).

#include "vvc/core.hpp"
#include "vvc/regression.hpp"
#include "vvc/trace.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

namespace vvc {

struct RegressionParams {
  std::size_t window = 10;
  double beta = 0.95;
  double lambda = 1e-2;
};

struct ControllerConfig {
  double alpha1 = 10.0;  // voltage-deviation weight
  double alpha2 = 5.0;   // injection penalty weight
  double step = 0.1;     // d
  Vector v_target;       // per monitored channel; empty means 1.0 everywhere
  double dither = 0.02;  // warm-up dither as a fraction of q_max
  RegressionParams regression;

  Vector target(Eigen::Index m) const {
    if (v_target.size() == 0) return Vector::Ones(m);
    if (v_target.size() != m) throw DimensionError("v_target length does not match the monitored set");
    return v_target;
  }
};

/// Rejects configurations outside the convergence hypothesis 0 < d < 2/alpha2.
inline void validate(const ControllerConfig& cfg) {
  std::ostringstream os;
  if (!(cfg.alpha1 >= 0.0)) os << "alpha1 must be non-negative; ";
  if (!(cfg.alpha2 > 0.0)) os << "alpha2 must be positive; ";
  if (cfg.alpha2 > 0.0 && !(cfg.step > 0.0 && cfg.step < 2.0 / cfg.alpha2))
    os << "step size d = " << cfg.step << " violates 0 < d < 2/alpha2 = " << 2.0 / cfg.alpha2 << "; ";
  if (cfg.regression.window < 1) os << "regression window L must be at least 1; ";
  if (!(cfg.regression.beta > 0.0 && cfg.regression.beta <= 1.0)) os << "beta must lie in (0, 1]; ";
  if (!(cfg.regression.lambda > 0.0)) os << "lambda must be positive; ";
  if (!(cfg.dither >= 0.0)) os << "dither must be non-negative; ";
  std::string msg = os.str();
  if (!msg.empty()) throw ValidationError("controller config: " + msg.substr(0, msg.size() - 2));
}

struct QLimit {
  double q_max = 0.0;
  bool clamped = false;  // forecast exceeded the rating within the 1% margin
};

/// Reactive capability left by the forecast active output.
inline QLimit q_limit(double s_rating, double p_forecast) {
  if (!(s_rating > 0.0)) throw ValidationError("inverter rating must be positive");
  if (p_forecast < 0.0) throw ValidationError("active power forecast must be non-negative");
  if (p_forecast <= s_rating) return {std::sqrt(s_rating * s_rating - p_forecast * p_forecast), false};
  if (p_forecast <= 1.01 * s_rating) return {0.0, true};
  std::ostringstream os;
  os << "forecast active power " << p_forecast << " exceeds inverter rating " << s_rating;
  throw InfeasibleForecastError(os.str());
}

/// Euclidean projection onto the box [-q_max, q_max].
inline Vector project(const Vector& q, const Vector& q_max) {
  if (q.size() != q_max.size()) throw DimensionError("project: limit vector length mismatch");
  return q.cwiseMax(-q_max).cwiseMin(q_max);
}

/// Gradient estimate with the measurement standing in for the model output.
inline Vector gradient_step(const Matrix& sensitivity, const Vector& v_meas, const ControllerConfig& cfg,
                            const Vector& q) {
  if (sensitivity.rows() != q.size() || sensitivity.cols() != v_meas.size())
    throw DimensionError("gradient_step: sensitivity is not G x M");
  return cfg.alpha1 * sensitivity * (v_meas - cfg.target(v_meas.size())) + cfg.alpha2 * q;
}

inline Vector gradient_step(const ResponseModel& model, const Vector& v_meas, const ControllerConfig& cfg,
                            const Vector& q) {
  return gradient_step(model.sensitivity(), v_meas, cfg, q);
}

inline Vector control_update(const Vector& q, const Vector& dq, double step, const Vector& q_max) {
  return project(q - step * dq, q_max);
}

/// F_v = (alpha1 |v - v_target|^2 + alpha2 |q|^2) / 2.
inline double objective(const ControllerConfig& cfg, const Vector& v, const Vector& q) {
  return 0.5 * (cfg.alpha1 * (v - cfg.target(v.size())).squaredNorm() + cfg.alpha2 * q.squaredNorm());
}

/// A steppable physical system: one `apply` per control interval, 1-based.
template <class P>
concept Plant = requires(P& p, const P& cp, long t, const Vector& q) {
  { cp.channel_count() } -> std::convertible_to<Eigen::Index>;
  { cp.monitored_count() } -> std::convertible_to<Eigen::Index>;
  { p.q_max(t) } -> std::convertible_to<Vector>;
  { p.apply(t, q) } -> std::same_as<PlantObservation>;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline TraceRow make_row(long t, StepMode mode, const Vector& q, const Vector& q_max, const PlantObservation& obs) {
  TraceRow row;
  row.t = t;
  row.time_s = obs.time_s;
  row.pv_scale = obs.pv_scale;
  row.load_scale = obs.load_scale;
  row.mode = mode;
  row.q = q;
  row.q_max = q_max;
  row.v_meas = obs.measured;
  row.v_true_monitored = obs.monitored_true;
  row.v_true_all = obs.all_true;
  row.loss = obs.loss;
  return row;
}

/// Largest singular value by power iteration on M^T M.
inline double spectral_norm(const Matrix& m, int iterations = 100) {
  if (m.size() == 0) return 0.0;
  Vector x = Vector::Ones(m.cols()) / std::sqrt(static_cast<double>(m.cols()));
  double sigma = 0.0;
  for (int k = 0; k < iterations; ++k) {
    const Vector y = m.transpose() * (m * x);
    const double n = y.norm();
    if (n == 0.0) return 0.0;
    const double next = std::sqrt(n);
    x = y / n;
    if (std::abs(next - sigma) <= 1e-12 * next) return next;
    sigma = next;
  }
  return sigma;
}

}  // namespace detail

/// Closed-loop data-driven VVC over `horizon` steps.
///
/// Steps 1..L dither around the held set-point (zero at start) to collect the
/// initial window, then the model is fit in batch. From then on every step
/// measures, updates the model, computes dq and dispatches the projected
/// set-point for the next interval. A degenerate window re-enters warm-up,
/// holding the last dispatched set-point.
template <Plant P>
ScenarioTrace run_algorithm1(P& plant, const ControllerConfig& cfg, long horizon, std::uint64_t seed) {
  validate(cfg);
  const Eigen::Index g = plant.channel_count();
  const Eigen::Index m = plant.monitored_count();
  const std::size_t window = cfg.regression.window;
  cfg.target(m);  // throws on a mis-sized target profile

  ScenarioTrace trace;
  trace.policy = "proposed";
  std::mt19937_64 dither_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::optional<ResponseModel> model;
  std::vector<Sample> buffer;
  Vector hold = Vector::Zero(g);
  Vector q_next = Vector::Zero(g);

  for (long t = 1; t <= horizon; ++t) {
    const Vector q_max = plant.q_max(t);
    const bool warmup = !model.has_value();
    Vector q(g);
    if (warmup) {
      for (Eigen::Index k = 0; k < g; ++k) q(k) = hold(k) + cfg.dither * q_max(k) * unit(dither_rng);
      q = project(q, q_max);
    } else {
      q = project(q_next, q_max);
    }

    PlantObservation obs;
    try {
      obs = plant.apply(t, q);
    } catch (const ConvergenceError& e) {
      trace.status = ScenarioTrace::Status::Aborted;
      std::ostringstream os;
      os << "step " << t << ": " << e.what();
      trace.message = os.str();
      trace.events.push_back(trace.message);
      return trace;
    }
    TraceRow row = detail::make_row(t, warmup ? StepMode::Warmup : StepMode::Control, q, q_max, obs);
    const Sample sample = make_sample(q, obs.measured, t);

    auto t0 = std::chrono::steady_clock::now();
    bool ready = false;
    if (warmup) {
      buffer.push_back(sample);
      if (buffer.size() == window) {
        model = ResponseModel::init_batch(buffer, cfg.regression.beta, cfg.regression.lambda);
        buffer.clear();
        ready = true;
      }
      row.t_regress_ms = detail::elapsed_ms(t0);
    } else {
      row.v_pred_prior = model->predict(q);
      t0 = std::chrono::steady_clock::now();
      try {
        model->update(sample);
        ready = true;
      } catch (const DegenerateWindowError& e) {
        std::ostringstream os;
        os << "step " << t << ": " << e.what() << "; re-entering warm-up for " << window << " steps";
        trace.events.push_back(os.str());
        row.note = "rewarmup";
        model.reset();
        hold = q;
        buffer.clear();
      }
      row.t_regress_ms = detail::elapsed_ms(t0);
    }

    if (ready) {
      row.v_pred = model->predict(q);
      const auto tc = std::chrono::steady_clock::now();
      const Vector dq = gradient_step(*model, obs.measured, cfg, q);
      if (t < horizon) q_next = control_update(q, dq, cfg.step, plant.q_max(t + 1));
      row.t_control_ms = detail::elapsed_ms(tc);
      row.sensitivity_norm = detail::spectral_norm(model->sensitivity());
    }
    trace.rows.push_back(std::move(row));
  }
  return trace;
}

/// Estimated convergence-bound quantities from a frozen-exogenous trace.
struct ConvergenceBounds {
  double theta_s = 0.0;  // optimal-point drift
  double theta_v = 0.0;  // voltage prediction error
  double theta_w = 0.0;  // sensitivity norm
  double theta_hat = 0.0;
};

struct ConvergenceReport {
  ConvergenceBounds bounds;
  double rate = 0.0;  // |1 - alpha2 d|
  std::vector<long> steps;         // control steps considered
  std::vector<double> distances;   // |q_t - q*| for each step
  std::vector<double> ratios;      // distances[k+1] / distances[k]
  std::vector<long> flagged;       // steps whose ratio exceeded rate + tolerance
  double floor = 0.0;              // ratios are only judged above this distance
  double terminal_radius = 0.0;    // max distance over the final quarter
  long entry_step = -1;            // first step within the terminal radius
  double max_after_entry = 0.0;

  bool contracting() const { return flagged.empty(); }
  bool stays_in_neighborhood(double factor = 3.0) const {
    return entry_step >= 0 && max_after_entry <= factor * terminal_radius;
  }
};

/// Contraction diagnostics of a trace relative to an optimum q_star. Ratios
/// are judged only while |q_t - q*| exceeds max(floor, terminal radius).
inline ConvergenceReport convergence_report(const ScenarioTrace& trace, const ControllerConfig& cfg,
                                            const Vector& q_star, double tolerance = 0.05, double floor = 1e-6) {
  ConvergenceReport rep;
  rep.rate = std::abs(1.0 - cfg.alpha2 * cfg.step);
  std::vector<const TraceRow*> rows;
  for (const TraceRow& r : trace.rows)
    if (r.mode == StepMode::Control) rows.push_back(&r);
  if (rows.size() < 5) throw Error("convergence_report: trace has fewer than 5 control steps");

  for (const TraceRow* r : rows) {
    if (r->q.size() != q_star.size()) throw DimensionError("convergence_report: q_star has the wrong length");
    rep.steps.push_back(r->t);
    rep.distances.push_back((r->q - q_star).norm());
    if (std::isfinite(r->sensitivity_norm)) rep.bounds.theta_w = std::max(rep.bounds.theta_w, r->sensitivity_norm);
    if (r->v_pred_prior.size() == r->v_meas.size())
      rep.bounds.theta_v = std::max(rep.bounds.theta_v, (r->v_pred_prior - r->v_meas).norm());
  }
  rep.bounds.theta_s = 0.0;  // single frozen optimum
  rep.bounds.theta_hat = cfg.step * cfg.alpha1 * rep.bounds.theta_v * rep.bounds.theta_w + rep.bounds.theta_s;

  const std::size_t n = rep.distances.size();
  const std::size_t tail = std::max<std::size_t>(1, n / 4);
  for (std::size_t k = n - tail; k < n; ++k) rep.terminal_radius = std::max(rep.terminal_radius, rep.distances[k]);
  rep.floor = std::max(floor, rep.terminal_radius);

  for (std::size_t k = 0; k + 1 < n; ++k) {
    const double ratio = rep.distances[k] > 0.0 ? rep.distances[k + 1] / rep.distances[k] : 0.0;
    rep.ratios.push_back(ratio);
    if (rep.distances[k] > rep.floor && ratio > rep.rate + tolerance) rep.flagged.push_back(rep.steps[k]);
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (rep.entry_step < 0 && rep.distances[k] <= rep.terminal_radius) rep.entry_step = rep.steps[k];
    if (rep.entry_step >= 0) rep.max_after_entry = std::max(rep.max_after_entry, rep.distances[k]);
  }
  return rep;
}

}  // namespace vvc
