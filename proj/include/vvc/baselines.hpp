#pragma once

// Reference policies: local droop, a frozen finite-difference linearization
// (the stale model-based benchmark) and a per-snapshot ideal optimum.
//
// The model-based routines take a `VoltageMap`: any callable mapping a
// reactive dispatch q (R^G) to noiseless monitored magnitudes (R^M) of a
// frozen plant.

#include "vvc/controller.hpp"
#include "vvc/core.hpp"

#include <algorithm>
#include <concepts>
#include <functional>

namespace vvc {

template <class F>
concept VoltageMap = std::invocable<const F&, const Vector&> &&
                     std::convertible_to<std::invoke_result_t<const F&, const Vector&>, Vector>;

struct DroopConfig {
  double gamma = 10.0;  // p.u. reactive per p.u. voltage
  double v_ref = 1.0;
};

inline void validate(const DroopConfig& cfg) {
  if (!(cfg.gamma > 0.0) || !std::isfinite(cfg.gamma)) throw ValidationError("droop gamma must be finite and positive");
  if (!(cfg.v_ref > 0.0)) throw ValidationError("droop v_ref must be positive");
}

/// Q = clamp(-gamma (v_local - v_ref), -q_max, q_max). Sets Q from the
/// deviation directly rather than incrementally.
inline double droop_step(double v_local, double v_ref, double gamma, double q_max) {
  const double q = -gamma * (v_local - v_ref);
  return std::clamp(q, -q_max, q_max);
}

/// Central-difference Jacobian of |v_M| w.r.t. q_G at q0, with the bias row
/// chosen so that W^T [q0; 1] reproduces |v_M|(q0). Shape (G+1) x M.
template <VoltageMap F>
Matrix stale_sensitivity(const F& plant, const Vector& q0, double perturbation) {
  if (!(perturbation > 0.0)) throw ValidationError("finite-difference perturbation must be positive");
  const Vector v0 = plant(q0);
  const Eigen::Index g = q0.size();
  const Eigen::Index m = v0.size();
  Matrix w(g + 1, m);
  Vector q = q0;
  for (Eigen::Index k = 0; k < g; ++k) {
    q(k) = q0(k) + perturbation;
    const Vector up = plant(q);
    q(k) = q0(k) - perturbation;
    const Vector down = plant(q);
    q(k) = q0(k);
    w.row(k) = ((up - down) / (2.0 * perturbation)).transpose();
  }
  w.row(g) = (v0 - w.topRows(g).transpose() * q0).transpose();
  return w;
}

struct OracleResult {
  Vector q;
  int iterations = 0;
  double last_step = 0.0;        // |q_{k+1} - q_k|
  double stationarity = 0.0;     // |q - P(q - grad F(q))| with the exact Jacobian
};

/// |q - P(q - grad F(q))| using a fresh finite-difference Jacobian.
template <VoltageMap F>
double projected_gradient_norm(const F& plant, const Vector& q, const Vector& q_max, const ControllerConfig& cfg,
                               double perturbation = 1e-6) {
  const Matrix jac = stale_sensitivity(plant, q, perturbation).topRows(q.size());
  const Vector grad = gradient_step(jac, plant(q), cfg, q);
  return (q - project(q - grad, q_max)).norm();
}

/// Fixed point of the measurement-feedback projected gradient iteration on a
/// frozen plant, with the exact (finite-difference) sensitivity refreshed at
/// every iterate. Throws after `max_iter` iterations.
template <VoltageMap F>
OracleResult ideal_qp_oracle(const F& plant, const Vector& q_max, const ControllerConfig& cfg,
                             const Vector& q_start, double tol = 1e-8, int max_iter = 10000,
                             double perturbation = 1e-6) {
  validate(cfg);
  OracleResult out;
  out.q = project(q_start, q_max);
  for (int k = 1; k <= max_iter; ++k) {
    const Matrix jac = stale_sensitivity(plant, out.q, perturbation).topRows(out.q.size());
    const Vector dq = gradient_step(jac, plant(out.q), cfg, out.q);
    const Vector next = control_update(out.q, dq, cfg.step, q_max);
    out.last_step = (next - out.q).norm();
    out.q = next;
    out.iterations = k;
    if (out.last_step <= tol) {
      out.stationarity = projected_gradient_norm(plant, out.q, q_max, cfg, perturbation);
      return out;
    }
  }
  throw Error("ideal_qp_oracle did not converge within " + std::to_string(max_iter) + " iterations");
}

}  // namespace vvc
