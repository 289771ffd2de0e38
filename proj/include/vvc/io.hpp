#pragma once

// Output artifacts: trace/metrics/compare CSV, run manifests with input
// digests, and minimal SVG line plots.

#include "vvc/scenario.hpp"
#include "vvc/trace.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <ostream>
#include <string>
#include <vector>

#ifndef VVC_VERSION
#define VVC_VERSION "0.0.0"
#endif

namespace vvc::io {

inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
inline std::string fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::vector<std::string> trace_header(const ScenarioTrace& trace) {
  std::vector<std::string> h{"t", "pv_scale", "load_scale"};
  for (const auto& l : trace.channel_labels) h.push_back("q_" + l);
  for (const auto& l : trace.monitored_labels) h.push_back("vmeas_" + l);
  for (const auto& l : trace.node_phase_labels) h.push_back("vtrue_" + l);
  h.insert(h.end(), {"loss", "t_regress_ms", "t_control_ms"});
  return h;
}

inline void write_trace_csv(std::ostream& os, const ScenarioTrace& trace) {
  const auto header = trace_header(trace);
  for (std::size_t k = 0; k < header.size(); ++k) os << (k ? "," : "") << header[k];
  os << '\n';
  for (const TraceRow& r : trace.rows) {
    os << r.t << ',' << fmt(r.pv_scale) << ',' << fmt(r.load_scale);
    for (Eigen::Index k = 0; k < r.q.size(); ++k) os << ',' << fmt(r.q(k));
    for (Eigen::Index k = 0; k < r.v_meas.size(); ++k) os << ',' << fmt(r.v_meas(k));
    for (Eigen::Index k = 0; k < r.v_true_all.size(); ++k) os << ',' << fmt(r.v_true_all(k));
    os << ',' << fmt(r.loss) << ',' << fmt(r.t_regress_ms) << ',' << fmt(r.t_control_ms) << '\n';
  }
}

inline const char* metrics_header() {
  return "policy,status,steps,counted_from,violations,violations_all_steps,total_loss,mae,mae_steps,v_min,v_max,v_lo,v_hi";
}

inline void write_metrics_row(std::ostream& os, const std::string& policy, const ScenarioTrace& trace, const Metrics& m) {
  os << policy << ',' << (trace.complete() ? "complete" : "aborted") << ',' << m.steps << ',' << m.counted_from << ','
     << m.violations << ',' << m.violations_all_steps << ',' << fmt(m.total_loss) << ',' << fmt(m.mae) << ','
     << m.mae_steps << ',' << fmt(m.v_min) << ',' << fmt(m.v_max) << ',' << fmt(m.v_lo) << ',' << fmt(m.v_hi) << '\n';
}

/// Per-step extrema of the true monitored voltages, loss and MAE, side by side.
inline void write_compare_csv(std::ostream& os, const std::vector<std::string>& policies,
                              const std::vector<const ScenarioTrace*>& traces,
                              const std::vector<std::vector<double>>& mae) {
  os << "t,time";
  for (const auto& p : policies) os << ",vmin_" << p << ",vmax_" << p << ",loss_" << p << ",mae_" << p;
  os << '\n';
  std::size_t rows = 0;
  for (const auto* t : traces) rows = std::max(rows, t->rows.size());
  for (std::size_t k = 0; k < rows; ++k) {
    long t = static_cast<long>(k + 1);
    double time = 0.0;
    for (const auto* tr : traces)
      if (k < tr->rows.size()) time = tr->rows[k].time_s;
    os << t << ',' << format_clock(time);
    for (std::size_t p = 0; p < traces.size(); ++p) {
      if (k >= traces[p]->rows.size()) {
        os << ",,,,";
        continue;
      }
      const TraceRow& r = traces[p]->rows[k];
      os << ',' << fmt(r.v_true_monitored.minCoeff()) << ',' << fmt(r.v_true_monitored.maxCoeff()) << ','
         << fmt(r.loss) << ',' << (std::isfinite(mae[p][k]) ? fmt(mae[p][k]) : std::string());
    }
    os << '\n';
  }
}

/// True monitored magnitudes per step, one column per channel.
inline void write_series_csv(std::ostream& os, const ScenarioTrace& trace) {
  os << "t";
  for (const auto& l : trace.monitored_labels) os << ",v_" << l;
  os << '\n';
  for (const TraceRow& r : trace.rows) {
    os << r.t;
    for (Eigen::Index k = 0; k < r.v_true_monitored.size(); ++k) os << ',' << fmt(r.v_true_monitored(k));
    os << '\n';
  }
}

inline nlohmann::json manifest(const std::string& command, const ScenarioConfig& cfg,
                               const std::vector<std::string>& policies = {}) {
  nlohmann::json m;
  m["tool"] = "vvc_cli";
  m["command"] = command;
  m["versions"] = {{"vvc", VVC_VERSION},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  m["seed"] = cfg.seed;
  if (!policies.empty()) m["policies"] = policies;
  m["config"] = scenario_config_to_json(cfg);
  m["inputs"] = {{"case", {{"path", m["config"]["case"]}, {"fnv1a64", fnv1a_file(cfg.case_path)}}},
                 {"profile", {{"path", m["config"]["profile"]}, {"fnv1a64", fnv1a_file(cfg.profile_path)}}}};
  return m;
}

// --- SVG ----------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string color = "#1f77b4";
  bool dashed = false;
};

/// A single-panel line chart with axes, tick labels and a legend.
inline std::string svg_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                            const std::vector<Series>& series) {
  const double w = 760, h = 420, left = 70, right = 180, top = 40, bottom = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k]);
      y1 = std::max(y1, s.y[k]);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  const double pad = (y1 - y0) * 0.05 + 1e-12;
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

  std::string out;
  auto add = [&](const std::string& s) { out += s; };
  add("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(w) + "\" height=\"" + fmt(h) +
      "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
  add("<text x=\"" + fmt(w / 2 - right / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + title + "</text>\n");
  add("<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(w - left - right) + "\" height=\"" +
      fmt(h - top - bottom) + "\" fill=\"none\" stroke=\"#333\"/>\n");
  for (int k = 0; k <= 5; ++k) {
    const double yv = y0 + (y1 - y0) * k / 5.0;
    const double xv = x0 + (x1 - x0) * k / 5.0;
    add("<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(py(yv) + 4) + "\" text-anchor=\"end\">" + fmt(std::round(yv * 1e4) / 1e4) + "</text>\n");
    add("<text x=\"" + fmt(px(xv)) + "\" y=\"" + fmt(h - bottom + 16) + "\" text-anchor=\"middle\">" + fmt(std::round(xv * 10) / 10) + "</text>\n");
  }
  add("<text x=\"" + fmt(left + (w - left - right) / 2) + "\" y=\"" + fmt(h - 10) + "\" text-anchor=\"middle\">" + x_label + "</text>\n");
  add("<text transform=\"translate(16," + fmt(top + (h - top - bottom) / 2) + ") rotate(-90)\" text-anchor=\"middle\">" + y_label + "</text>\n");
  int legend = 0;
  for (const auto& s : series) {
    std::string pts;
    for (std::size_t k = 0; k < s.x.size(); ++k)
      if (std::isfinite(s.y[k])) pts += fmt(px(s.x[k])) + "," + fmt(py(s.y[k])) + " ";
    add("<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.5\"" +
        (s.dashed ? std::string(" stroke-dasharray=\"6,4\"") : std::string()) + " points=\"" + pts + "\"/>\n");
    const double ly = top + 14 + 18 * legend++;
    add("<line x1=\"" + fmt(w - right + 12) + "\" y1=\"" + fmt(ly - 4) + "\" x2=\"" + fmt(w - right + 36) + "\" y2=\"" +
        fmt(ly - 4) + "\" stroke=\"" + s.color + "\" stroke-width=\"2\"" +
        (s.dashed ? std::string(" stroke-dasharray=\"6,4\"") : std::string()) + "/>\n");
    add("<text x=\"" + fmt(w - right + 42) + "\" y=\"" + fmt(ly) + "\">" + s.label + "</text>\n");
  }
  add("</svg>\n");
  return out;
}

inline const char* palette(std::size_t k) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return colors[k % 6];
}

/// Monitored-voltage envelope (min/max per step) of each trace plus bounds.
inline std::string voltage_envelope_svg(const std::vector<const ScenarioTrace*>& traces, double v_lo, double v_hi) {
  std::vector<Series> s;
  std::vector<double> xs;
  for (std::size_t p = 0; p < traces.size(); ++p) {
    Series lo{traces[p]->policy + " min", {}, {}, palette(p), true};
    Series hi{traces[p]->policy + " max", {}, {}, palette(p), false};
    for (const TraceRow& r : traces[p]->rows) {
      lo.x.push_back(static_cast<double>(r.t));
      hi.x.push_back(static_cast<double>(r.t));
      lo.y.push_back(r.v_true_monitored.minCoeff());
      hi.y.push_back(r.v_true_monitored.maxCoeff());
    }
    if (xs.size() < hi.x.size()) xs = hi.x;
    s.push_back(std::move(hi));
    s.push_back(std::move(lo));
  }
  s.push_back({"bounds", xs, std::vector<double>(xs.size(), v_hi), "#777777", true});
  s.push_back({"", xs, std::vector<double>(xs.size(), v_lo), "#777777", true});
  return svg_plot("Monitored voltage envelope", "step", "|v| (p.u.)", s);
}

inline std::string loss_svg(const std::vector<const ScenarioTrace*>& traces) {
  std::vector<Series> s;
  for (std::size_t p = 0; p < traces.size(); ++p) {
    Series line{traces[p]->policy, {}, {}, palette(p), false};
    for (const TraceRow& r : traces[p]->rows) {
      line.x.push_back(static_cast<double>(r.t));
      line.y.push_back(r.loss);
    }
    s.push_back(std::move(line));
  }
  return svg_plot("Network active power loss", "step", "loss (p.u.)", s);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write " + path.string());
  os << text;
}

}  // namespace vvc::io
