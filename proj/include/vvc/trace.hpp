#pragma once

// Per-timestep record of a closed-loop run.

#include "vvc/core.hpp"

#include <limits>
#include <string>
#include <vector>

namespace vvc {

enum class StepMode { Warmup, Control, Droop };

inline const char* to_string(StepMode m) {
  switch (m) {
    case StepMode::Warmup: return "warmup";
    case StepMode::Control: return "control";
    case StepMode::Droop: return "droop";
  }
  return "?";
}

/// What the plant reports after one control interval.
struct PlantObservation {
  Vector measured;        // noisy monitored magnitudes
  Vector monitored_true;  // noiseless monitored magnitudes
  Vector all_true;        // |v| at every node-phase
  double loss = 0.0;      // total active loss (p.u.)
  double time_s = 0.0;    // seconds of day
  double pv_scale = 0.0;
  double load_scale = 0.0;
};

struct TraceRow {
  long t = 0;  // 1-based step index
  double time_s = 0.0;
  double pv_scale = 0.0;
  double load_scale = 0.0;
  StepMode mode = StepMode::Warmup;
  Vector q;      // dispatched reactive power, inverter_channels order
  Vector q_max;  // feasible box at this step
  Vector v_meas;
  Vector v_true_monitored;
  Vector v_true_all;
  double loss = 0.0;
  double t_regress_ms = 0.0;
  double t_control_ms = 0.0;
  Vector v_pred;        // W_t^T [q_t; 1] after this step's update (empty if no model)
  Vector v_pred_prior;  // W_{t-1}^T [q_t; 1], before the update
  double sensitivity_norm = std::numeric_limits<double>::quiet_NaN();
  std::string note;
};

struct ScenarioTrace {
  enum class Status { Complete, Aborted };

  std::string policy;
  std::vector<std::string> channel_labels;    // G
  std::vector<std::string> monitored_labels;  // M
  std::vector<std::string> node_phase_labels;
  std::vector<TraceRow> rows;
  Status status = Status::Complete;
  std::string message;
  std::vector<std::string> events;  // human-readable log (re-warm-ups, aborts)

  bool complete() const { return status == Status::Complete; }
};

}  // namespace vvc
