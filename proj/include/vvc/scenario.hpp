#pragma once

// Closed-loop experiments on a network case: exogenous profiles and events,
// the simulated plant (power flow + measurement noise + out-of-area droop
// PVs), the three dispatch policies, and trace metrics.

#include "vvc/baselines.hpp"
#include "vvc/controller.hpp"
#include "vvc/core.hpp"
#include "vvc/netmodel.hpp"
#include "vvc/powerflow.hpp"
#include "vvc/trace.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace vvc {

// --- profiles and events ------------------------------------------------------

struct ProfilePoint {
  double time_s = 0.0;  // seconds since midnight
  double pv_scale = 0.0;
  double load_scale = 0.0;
};

enum class EventKind { PvStep, LoadStep, ZipSwitch };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::PvStep: return "pv_step";
    case EventKind::LoadStep: return "load_step";
    case EventKind::ZipSwitch: return "zip_switch";
  }
  return "?";
}

inline EventKind parse_event_kind(const std::string& s) {
  if (s == "pv_step") return EventKind::PvStep;
  if (s == "load_step") return EventKind::LoadStep;
  if (s == "zip_switch") return EventKind::ZipSwitch;
  throw ParseError("unknown event kind '" + s + "'");
}

/// pv_step and load_step add `magnitude` to the respective scale from `time_s`
/// on; zip_switch turns the case's ZIP triples on (loads are constant power
/// before it).
struct Event {
  double time_s = 0.0;
  EventKind kind = EventKind::PvStep;
  double magnitude = 0.0;
};

struct Profile {
  std::vector<ProfilePoint> points;
  std::vector<Event> events;
  double interval = 1.0;

  long size() const { return static_cast<long>(points.size()); }
};

/// "HH:MM:SS" (fractional seconds allowed) or plain seconds.
inline double parse_clock(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r");
  if (first == std::string::npos) throw ParseError("empty time value");
  const std::string s = text.substr(first, text.find_last_not_of(" \t\r") - first + 1);
  if (s.find(':') == std::string::npos) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw ParseError("bad time value '" + text + "'");
    }
    if (used != s.size()) throw ParseError("bad time value '" + text + "'");
    return v;
  }
  int h = 0, m = 0;
  double sec = 0.0;
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> h >> c1 >> m >> c2 >> sec) || c1 != ':' || c2 != ':' || !(is >> std::ws).eof() || h < 0 || m < 0 ||
      m > 59 || sec < 0.0 || sec >= 60.0)
    throw ParseError("bad time value '" + text + "'");
  return 3600.0 * h + 60.0 * m + sec;
}

inline std::string format_clock(double seconds) {
  const long whole = std::lround(std::floor(seconds));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02ld:%02ld:%02ld", whole / 3600, (whole / 60) % 60, whole % 60);
  return buf;
}

inline void validate(const Profile& p) {
  if (p.points.empty()) throw ValidationError("profile is empty");
  if (!(p.interval > 0.0)) throw ValidationError("profile interval must be positive");
  for (std::size_t k = 0; k < p.points.size(); ++k) {
    const ProfilePoint& pt = p.points[k];
    if (!(pt.pv_scale >= 0.0) || !(pt.load_scale >= 0.0) || !std::isfinite(pt.pv_scale) ||
        !std::isfinite(pt.load_scale))
      throw ValidationError("profile row " + std::to_string(k + 1) + ": scales must be finite and non-negative");
    if (k == 0) continue;
    const double gap = pt.time_s - p.points[k - 1].time_s;
    if (!(gap > 0.0))
      throw ValidationError("profile row " + std::to_string(k + 1) + ": timestamps must be strictly increasing");
    if (std::abs(gap - p.interval) > 1e-6)
      throw ValidationError("profile row " + std::to_string(k + 1) + ": timestamp spacing " + std::to_string(gap) +
                            " s differs from the interval " + std::to_string(p.interval) + " s");
  }
}

/// Reads `t,pv_scale,load_scale` CSV.
inline Profile parse_profile(std::istream& in, double interval = 1.0) {
  Profile p;
  p.interval = interval;
  std::string line;
  auto strip = [](std::string s) {
    s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; }), s.end());
    return s;
  };
  long lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "t,pv_scale,load_scale") throw ParseError("profile header must be 't,pv_scale,load_scale'");
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 3) throw ParseError("profile line " + std::to_string(lineno) + ": expected 3 columns");
    ProfilePoint pt;
    try {
      pt.time_s = parse_clock(cells[0]);
      pt.pv_scale = std::stod(cells[1]);
      pt.load_scale = std::stod(cells[2]);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError("profile line " + std::to_string(lineno) + ": non-numeric value");
    }
    p.points.push_back(pt);
  }
  if (!header) throw ParseError("profile has no header");
  validate(p);
  return p;
}

inline Profile load_profile(const std::filesystem::path& path, double interval = 1.0) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open profile " + path.string());
  try {
    return parse_profile(in, interval);
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline Profile constant_profile(long steps, double pv_scale, double load_scale, double start_s = 0.0,
                                double interval = 1.0) {
  Profile p;
  p.interval = interval;
  for (long k = 0; k < steps; ++k) p.points.push_back({start_s + interval * k, pv_scale, load_scale});
  validate(p);
  return p;
}

/// Exogenous inputs in force during one step.
struct Exogenous {
  double time_s = 0.0;
  double pv_scale = 0.0;
  double load_scale = 0.0;
  bool nonlinear_loads = true;  // false: every load constant power
};

/// Profile row t (1-based) with every event at or before its timestamp applied.
inline Exogenous exogenous_at(const Profile& p, long t) {
  if (t < 1 || t > p.size()) throw DimensionError("step " + std::to_string(t) + " outside the profile");
  const ProfilePoint& pt = p.points[static_cast<std::size_t>(t - 1)];
  Exogenous ex{pt.time_s, pt.pv_scale, pt.load_scale, true};
  bool has_switch = false;
  bool switched = false;
  for (const Event& e : p.events) {
    const bool active = e.time_s <= pt.time_s + 1e-9;
    switch (e.kind) {
      case EventKind::PvStep:
        if (active) ex.pv_scale += e.magnitude;
        break;
      case EventKind::LoadStep:
        if (active) ex.load_scale += e.magnitude;
        break;
      case EventKind::ZipSwitch:
        has_switch = true;
        switched = switched || active;
        break;
    }
  }
  ex.pv_scale = std::max(0.0, ex.pv_scale);
  ex.load_scale = std::max(0.0, ex.load_scale);
  ex.nonlinear_loads = !has_switch || switched;
  return ex;
}

// --- configuration ------------------------------------------------------------

enum class Policy { Proposed, Droop, StaleModel };

inline const char* to_string(Policy p) {
  switch (p) {
    case Policy::Proposed: return "proposed";
    case Policy::Droop: return "droop";
    case Policy::StaleModel: return "stale_model";
  }
  return "?";
}

inline Policy parse_policy(const std::string& s) {
  if (s == "proposed") return Policy::Proposed;
  if (s == "droop") return Policy::Droop;
  if (s == "stale_model") return Policy::StaleModel;
  throw ValidationError("unknown policy '" + s + "' (expected proposed, droop or stale_model)");
}

struct StaleConfig {
  double perturbation = 1e-4;  // finite-difference step (p.u.)
  double mismatch = 0.0;       // uniform +/- fraction applied to every branch impedance
  std::uint64_t mismatch_seed = 0;
  long reference_step = 1;     // linearization point
};

struct ScenarioConfig {
  std::filesystem::path case_path;
  std::filesystem::path profile_path;
  double interval = 1.0;
  Policy policy = Policy::Proposed;
  std::uint64_t seed = 1;
  long horizon = 0;  // 0: the whole profile
  double noise_sigma = 0.001;
  double v_lo = 0.95;
  double v_hi = 1.05;
  long settle_steps = 10;  // violations are counted after warm-up plus this many steps
  std::vector<Event> events;
  ControllerConfig controller;
  DroopConfig droop;
  bool droop_per_rating = true;  // gamma in p.u. of each inverter's rating
  bool external_droop = true;    // PVs outside the control area run droop
  StaleConfig stale;
  SolverSettings powerflow;
};

inline void validate(const ScenarioConfig& cfg) {
  validate(cfg.controller);
  validate(cfg.droop);
  if (!(cfg.noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be non-negative");
  if (!(cfg.v_lo < cfg.v_hi)) throw ValidationError("bounds must satisfy v_lo < v_hi");
  if (cfg.horizon < 0) throw ValidationError("horizon must be non-negative");
  if (cfg.settle_steps < 0) throw ValidationError("settle_steps must be non-negative");
  if (!(cfg.stale.perturbation > 0.0)) throw ValidationError("stale perturbation must be positive");
  if (!(cfg.stale.mismatch >= 0.0 && cfg.stale.mismatch < 1.0)) throw ValidationError("stale mismatch must lie in [0, 1)");
  if (cfg.stale.reference_step < 1) throw ValidationError("stale reference_step must be at least 1");
  if (!(cfg.powerflow.tol > 0.0) || cfg.powerflow.max_iter < 1) throw ValidationError("bad power-flow settings");
}

namespace detail {

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  return j.at(key).get<T>();
}

}  // namespace detail

/// Parses a scenario document. Relative paths resolve against `base_dir`.
/// A run manifest is accepted too: its `config` member is used.
inline ScenarioConfig parse_scenario_config(const nlohmann::json& input, const std::filesystem::path& base_dir) {
  using detail::get_or;
  const nlohmann::json& doc = input.contains("config") && input.at("config").is_object() ? input.at("config") : input;
  ScenarioConfig cfg;
  try {
    if (!doc.contains("case")) throw ParseError("scenario: missing key 'case'");
    if (!doc.contains("profile")) throw ParseError("scenario: missing key 'profile'");
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() ? path : (base_dir / path).lexically_normal();
    };
    cfg.case_path = resolve(doc.at("case").get<std::string>());
    cfg.profile_path = resolve(doc.at("profile").get<std::string>());
    cfg.interval = get_or(doc, "interval_s", cfg.interval);
    cfg.policy = parse_policy(get_or<std::string>(doc, "policy", "proposed"));
    cfg.seed = get_or<std::uint64_t>(doc, "seed", cfg.seed);
    cfg.horizon = get_or(doc, "horizon", cfg.horizon);
    cfg.noise_sigma = get_or(doc, "noise_sigma", cfg.noise_sigma);
    if (doc.contains("bounds")) {
      const auto& b = doc.at("bounds");
      if (!b.is_array() || b.size() != 2) throw ParseError("scenario: bounds must be [v_lo, v_hi]");
      cfg.v_lo = b[0].get<double>();
      cfg.v_hi = b[1].get<double>();
    }
    cfg.settle_steps = get_or(doc, "settle_steps", cfg.settle_steps);
    cfg.external_droop = get_or(doc, "external_droop", cfg.external_droop);

    if (doc.contains("events")) {
      for (const auto& e : doc.at("events")) {
        Event ev;
        const auto& tv = e.at("time");
        ev.time_s = tv.is_string() ? parse_clock(tv.get<std::string>()) : tv.get<double>();
        ev.kind = parse_event_kind(e.at("kind").get<std::string>());
        ev.magnitude = get_or(e, "magnitude", 0.0);
        cfg.events.push_back(ev);
      }
    }

    if (doc.contains("controller")) {
      const auto& c = doc.at("controller");
      ControllerConfig& cc = cfg.controller;
      cc.alpha1 = get_or(c, "alpha1", cc.alpha1);
      cc.alpha2 = get_or(c, "alpha2", cc.alpha2);
      cc.step = get_or(c, "d", cc.step);
      cc.dither = get_or(c, "dither", cc.dither);
      cc.regression.window = get_or(c, "L", cc.regression.window);
      cc.regression.beta = get_or(c, "beta", cc.regression.beta);
      cc.regression.lambda = get_or(c, "lambda", cc.regression.lambda);
      if (c.contains("v_target") && !c.at("v_target").is_null()) {
        const auto& vt = c.at("v_target");
        if (vt.is_number()) {
          cc.v_target = Vector::Constant(1, vt.get<double>());
        } else {
          cc.v_target.resize(static_cast<Eigen::Index>(vt.size()));
          for (std::size_t k = 0; k < vt.size(); ++k) cc.v_target(static_cast<Eigen::Index>(k)) = vt[k].get<double>();
        }
      }
    }
    if (doc.contains("droop")) {
      const auto& d = doc.at("droop");
      cfg.droop.gamma = get_or(d, "gamma", cfg.droop.gamma);
      cfg.droop.v_ref = get_or(d, "v_ref", cfg.droop.v_ref);
      cfg.droop_per_rating = get_or(d, "per_rating", cfg.droop_per_rating);
    }
    if (doc.contains("stale")) {
      const auto& s = doc.at("stale");
      cfg.stale.perturbation = get_or(s, "perturbation", cfg.stale.perturbation);
      cfg.stale.mismatch = get_or(s, "mismatch", cfg.stale.mismatch);
      cfg.stale.mismatch_seed = get_or(s, "mismatch_seed", cfg.stale.mismatch_seed);
      cfg.stale.reference_step = get_or(s, "reference_step", cfg.stale.reference_step);
    }
    if (doc.contains("powerflow")) {
      const auto& p = doc.at("powerflow");
      cfg.powerflow.tol = get_or(p, "tol", cfg.powerflow.tol);
      cfg.powerflow.max_iter = get_or(p, "max_iter", cfg.powerflow.max_iter);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("scenario: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

inline ScenarioConfig load_scenario_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open scenario config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return parse_scenario_config(doc, std::filesystem::absolute(path).parent_path());
}

/// Every field materialized; paths absolute.
inline nlohmann::json scenario_config_to_json(const ScenarioConfig& cfg) {
  nlohmann::json j;
  j["case"] = std::filesystem::absolute(cfg.case_path).lexically_normal().string();
  j["profile"] = std::filesystem::absolute(cfg.profile_path).lexically_normal().string();
  j["interval_s"] = cfg.interval;
  j["policy"] = to_string(cfg.policy);
  j["seed"] = cfg.seed;
  j["horizon"] = cfg.horizon;
  j["noise_sigma"] = cfg.noise_sigma;
  j["bounds"] = {cfg.v_lo, cfg.v_hi};
  j["settle_steps"] = cfg.settle_steps;
  j["external_droop"] = cfg.external_droop;
  j["events"] = nlohmann::json::array();
  for (const Event& e : cfg.events)
    j["events"].push_back({{"time", e.time_s}, {"kind", to_string(e.kind)}, {"magnitude", e.magnitude}});
  const ControllerConfig& cc = cfg.controller;
  j["controller"] = {{"alpha1", cc.alpha1},
                     {"alpha2", cc.alpha2},
                     {"d", cc.step},
                     {"dither", cc.dither},
                     {"L", cc.regression.window},
                     {"beta", cc.regression.beta},
                     {"lambda", cc.regression.lambda},
                     {"v_target", cc.v_target.size() ? detail::vector_to_json(cc.v_target) : nlohmann::json(nullptr)}};
  j["droop"] = {{"gamma", cfg.droop.gamma}, {"v_ref", cfg.droop.v_ref}, {"per_rating", cfg.droop_per_rating}};
  j["stale"] = {{"perturbation", cfg.stale.perturbation},
                {"mismatch", cfg.stale.mismatch},
                {"mismatch_seed", cfg.stale.mismatch_seed},
                {"reference_step", cfg.stale.reference_step}};
  j["powerflow"] = {{"tol", cfg.powerflow.tol}, {"max_iter", cfg.powerflow.max_iter}};
  return j;
}

/// A single scalar v_target in the config stands for a uniform profile.
inline ControllerConfig resolve_controller(const ControllerConfig& cc, Eigen::Index monitored) {
  ControllerConfig out = cc;
  if (out.v_target.size() == 1 && monitored != 1) out.v_target = Vector::Constant(monitored, out.v_target(0));
  return out;
}

// --- plant --------------------------------------------------------------------

/// Every branch impedance scaled by an independent uniform factor in
/// [1 - fraction, 1 + fraction].
inline NetworkCase perturb_impedances(const NetworkCase& c, double fraction, std::uint64_t seed) {
  NetworkCase out = c;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-fraction, fraction);
  for (Branch& b : out.branches) b.z *= (1.0 + u(rng));
  return out;
}

/// Static network model: one power flow per (exogenous, dispatch) pair.
class NetworkPlant {
 public:
  NetworkPlant(const NetworkCase& c, SolverSettings settings)
      : case_(std::make_shared<const NetworkCase>(c)), settings_(settings) {
    sys_ = std::make_shared<const AdmittanceSystem>(build_admittance(*case_));
    channels_ = inverter_channels(*case_);
    for (std::size_t k = 0; k < case_->inverters.size(); ++k)
      if (!case_->inverters[k].controllable) external_.push_back(static_cast<int>(k));
    monitored_pos_ = sys_->layout().positions(case_->monitored);
    for (const InverterChannel& ch : channels_) {
      auto it = std::find(case_->monitored.begin(), case_->monitored.end(), ch.at);
      channel_monitor_.push_back(it == case_->monitored.end() ? -1
                                                              : static_cast<Eigen::Index>(it - case_->monitored.begin()));
    }
    for (int k : external_) external_pos_.push_back(sys_->layout().at(case_->inverters[static_cast<std::size_t>(k)].at));
  }

  const NetworkCase& network() const { return *case_; }
  const AdmittanceSystem& system() const { return *sys_; }
  const SolverSettings& settings() const { return settings_; }
  const std::vector<InverterChannel>& channels() const { return channels_; }
  const std::vector<int>& external() const { return external_; }
  Eigen::Index channel_count() const { return static_cast<Eigen::Index>(channels_.size()); }
  Eigen::Index monitored_count() const { return static_cast<Eigen::Index>(monitored_pos_.size()); }
  Eigen::Index external_count() const { return static_cast<Eigen::Index>(external_.size()); }
  /// Index of each channel inside the monitored vector (-1 if unmonitored).
  const std::vector<Eigen::Index>& channel_monitor() const { return channel_monitor_; }

  /// Active output of inverter k: the forecast, clipped at the rating.
  double active_power(int k, const Exogenous& ex) const {
    const Inverter& inv = case_->inverters[static_cast<std::size_t>(k)];
    return std::min(ex.pv_scale * inv.p_peak, inv.s_rating);
  }

  double q_max_of(int k, const Exogenous& ex) const {
    return q_limit(case_->inverters[static_cast<std::size_t>(k)].s_rating, active_power(k, ex)).q_max;
  }

  Vector q_max(const Exogenous& ex) const {
    Vector out(channel_count());
    for (Eigen::Index k = 0; k < out.size(); ++k) out(k) = q_max_of(channels_[static_cast<std::size_t>(k)].inverter, ex);
    return out;
  }

  Vector external_q_max(const Exogenous& ex) const {
    Vector out(external_count());
    for (Eigen::Index k = 0; k < out.size(); ++k) out(k) = q_max_of(external_[static_cast<std::size_t>(k)], ex);
    return out;
  }

  VoltageSolution solve(const Exogenous& ex, const Vector& q, const Vector& q_external) const {
    if (q.size() != channel_count()) throw DimensionError("dispatch length does not match the inverter channels");
    if (q_external.size() != external_count()) throw DimensionError("external dispatch length mismatch");
    const ZipCoefficients constant = ZipCoefficients::constant_power();
    InjectionSet inj = case_injections(*case_, *sys_, ex.load_scale, ex.nonlinear_loads ? nullptr : &constant);
    for (Eigen::Index k = 0; k < q.size(); ++k) {
      const InverterChannel& ch = channels_[static_cast<std::size_t>(k)];
      add_injection(inj, *sys_, ch.at, {active_power(ch.inverter, ex), q(k)});
    }
    for (Eigen::Index k = 0; k < q_external.size(); ++k) {
      const int idx = external_[static_cast<std::size_t>(k)];
      add_injection(inj, *sys_, case_->inverters[static_cast<std::size_t>(idx)].at, {active_power(idx, ex), q_external(k)});
    }
    return vvc::solve(*sys_, inj, settings_);
  }

  Vector monitored(const VoltageSolution& sol) const { return sol.magnitudes(monitored_pos_); }
  const std::vector<Eigen::Index>& monitored_positions() const { return monitored_pos_; }
  Vector external_local(const VoltageSolution& sol) const { return sol.magnitudes(external_pos_); }

  std::vector<std::string> channel_labels() const {
    std::vector<std::string> out;
    for (const InverterChannel& ch : channels_) out.push_back(ch.at.label());
    return out;
  }
  std::vector<std::string> monitored_labels() const {
    std::vector<std::string> out;
    for (const NodePhase& np : case_->monitored) out.push_back(np.label());
    return out;
  }
  std::vector<std::string> node_phase_labels() const {
    std::vector<std::string> out;
    for (const NodePhase& np : sys_->layout().all) out.push_back(np.label());
    return out;
  }

 private:
  std::shared_ptr<const NetworkCase> case_;
  std::shared_ptr<const AdmittanceSystem> sys_;
  SolverSettings settings_;
  std::vector<InverterChannel> channels_;
  std::vector<int> external_;
  std::vector<Eigen::Index> monitored_pos_;
  std::vector<Eigen::Index> channel_monitor_;
  std::vector<Eigen::Index> external_pos_;
};

/// Droop gains per external inverter.
inline Vector droop_gains(const NetworkPlant& plant, const DroopConfig& droop, bool per_rating, bool external) {
  const auto n = external ? plant.external_count() : plant.channel_count();
  Vector g(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const int idx = external ? plant.external()[static_cast<std::size_t>(k)]
                             : plant.channels()[static_cast<std::size_t>(k)].inverter;
    g(k) = droop.gamma * (per_rating ? plant.network().inverters[static_cast<std::size_t>(idx)].s_rating : 1.0);
  }
  return g;
}

/// Profile-driven plant. Out-of-area PVs set their reactive output from the
/// previous interval's local voltage (or stay at zero without external droop).
class ScenarioPlant {
 public:
  ScenarioPlant(std::shared_ptr<const NetworkPlant> net, Profile profile, const ScenarioConfig& cfg, std::uint64_t seed)
      : net_(std::move(net)),
        profile_(std::move(profile)),
        noise_sigma_(cfg.noise_sigma),
        droop_(cfg.droop),
        external_droop_(cfg.external_droop),
        rng_(seed) {
    q_ext_ = Vector::Zero(net_->external_count());
    ext_gain_ = droop_gains(*net_, droop_, cfg.droop_per_rating, true);
  }

  Eigen::Index channel_count() const { return net_->channel_count(); }
  Eigen::Index monitored_count() const { return net_->monitored_count(); }
  Exogenous exogenous(long t) const { return exogenous_at(profile_, t); }
  Vector q_max(long t) const { return net_->q_max(exogenous(t)); }
  const Vector& external_q() const { return q_ext_; }
  const NetworkPlant& network() const { return *net_; }
  const Profile& profile() const { return profile_; }

  PlantObservation apply(long t, const Vector& q) {
    const Exogenous ex = exogenous(t);
    const Vector qmax_ext = net_->external_q_max(ex);
    const Vector q_ext = q_ext_.cwiseMax(-qmax_ext).cwiseMin(qmax_ext);
    const VoltageSolution sol = net_->solve(ex, q, q_ext);
    PlantObservation obs;
    obs.monitored_true = net_->monitored(sol);
    obs.measured = measure(sol, net_->monitored_positions(), noise_sigma_, rng_);
    obs.all_true = sol.magnitudes();
    obs.loss = sol.loss_total;
    obs.time_s = ex.time_s;
    obs.pv_scale = ex.pv_scale;
    obs.load_scale = ex.load_scale;
    last_q_ext_ = q_ext;
    if (external_droop_) {
      const Vector local = net_->external_local(sol);
      for (Eigen::Index k = 0; k < q_ext_.size(); ++k)
        q_ext_(k) = droop_step(local(k), droop_.v_ref, ext_gain_(k), qmax_ext(k));
    }
    return obs;
  }

  /// External dispatch used by the most recent `apply`.
  const Vector& last_external_q() const { return last_q_ext_; }

 private:
  std::shared_ptr<const NetworkPlant> net_;
  Profile profile_;
  double noise_sigma_;
  DroopConfig droop_;
  bool external_droop_;
  std::mt19937_64 rng_;
  Vector q_ext_;
  Vector last_q_ext_;
  Vector ext_gain_;
};

/// The plant with every exogenous input (and the out-of-area dispatch) held
/// fixed. Usable both as a Plant and as a noiseless VoltageMap.
class FrozenPlant {
 public:
  FrozenPlant(std::shared_ptr<const NetworkPlant> net, Exogenous ex, Vector q_external, double noise_sigma,
              std::uint64_t seed)
      : net_(std::move(net)), ex_(ex), q_ext_(std::move(q_external)), noise_sigma_(noise_sigma), rng_(seed) {
    if (q_ext_.size() == 0) q_ext_ = Vector::Zero(net_->external_count());
    q_max_ = net_->q_max(ex_);
  }

  Eigen::Index channel_count() const { return net_->channel_count(); }
  Eigen::Index monitored_count() const { return net_->monitored_count(); }
  Vector q_max(long = 0) const { return q_max_; }
  const Exogenous& exogenous() const { return ex_; }
  const NetworkPlant& network() const { return *net_; }

  Vector operator()(const Vector& q) const { return net_->monitored(net_->solve(ex_, q, q_ext_)); }

  PlantObservation apply(long, const Vector& q) {
    const VoltageSolution sol = net_->solve(ex_, q, q_ext_);
    PlantObservation obs;
    obs.monitored_true = net_->monitored(sol);
    obs.measured = measure(sol, net_->monitored_positions(), noise_sigma_, rng_);
    obs.all_true = sol.magnitudes();
    obs.loss = sol.loss_total;
    obs.time_s = ex_.time_s;
    obs.pv_scale = ex_.pv_scale;
    obs.load_scale = ex_.load_scale;
    return obs;
  }

 private:
  std::shared_ptr<const NetworkPlant> net_;
  Exogenous ex_;
  Vector q_ext_;
  double noise_sigma_;
  std::mt19937_64 rng_;
  Vector q_max_;
};

// --- policies -----------------------------------------------------------------

namespace detail {

template <Plant P>
void label_trace(ScenarioTrace& trace, const NetworkPlant& net, const P&) {
  trace.channel_labels = net.channel_labels();
  trace.monitored_labels = net.monitored_labels();
  trace.node_phase_labels = net.node_phase_labels();
}

inline void abort_trace(ScenarioTrace& trace, long t, const ConvergenceError& e) {
  trace.status = ScenarioTrace::Status::Aborted;
  std::ostringstream os;
  os << "step " << t << ": " << e.what();
  trace.message = os.str();
  trace.events.push_back(trace.message);
}

}  // namespace detail

/// Local droop on every controllable inverter, acting on its own measured
/// voltage from the previous interval.
template <Plant P>
ScenarioTrace run_droop(P& plant, const NetworkPlant& net, const DroopConfig& droop, bool per_rating, long horizon) {
  validate(droop);
  ScenarioTrace trace;
  trace.policy = "droop";
  const Vector gain = droop_gains(net, droop, per_rating, false);
  for (Eigen::Index k = 0; k < net.channel_count(); ++k)
    if (net.channel_monitor()[static_cast<std::size_t>(k)] < 0)
      throw ValidationError("droop policy needs every inverter node-phase in the monitored set");
  Vector q_cmd = Vector::Zero(net.channel_count());
  for (long t = 1; t <= horizon; ++t) {
    const Vector q_max = plant.q_max(t);
    const Vector q = project(q_cmd, q_max);
    PlantObservation obs;
    try {
      obs = plant.apply(t, q);
    } catch (const ConvergenceError& e) {
      detail::abort_trace(trace, t, e);
      return trace;
    }
    TraceRow row = detail::make_row(t, StepMode::Droop, q, q_max, obs);
    const auto tc = std::chrono::steady_clock::now();
    if (t < horizon) {
      const Vector next_max = plant.q_max(t + 1);
      for (Eigen::Index k = 0; k < q_cmd.size(); ++k) {
        const double v_local = obs.measured(net.channel_monitor()[static_cast<std::size_t>(k)]);
        q_cmd(k) = droop_step(v_local, droop.v_ref, gain(k), next_max(k));
      }
    }
    row.t_control_ms = detail::elapsed_ms(tc);
    trace.rows.push_back(std::move(row));
  }
  return trace;
}

/// Projected gradient with a frozen sensitivity W (G+1 x M); no learning.
template <Plant P>
ScenarioTrace run_stale_model(P& plant, const Matrix& w, const ControllerConfig& cfg, long horizon) {
  validate(cfg);
  const Eigen::Index g = plant.channel_count();
  if (w.rows() != g + 1 || w.cols() != plant.monitored_count()) throw DimensionError("stale model must be (G+1) x M");
  ScenarioTrace trace;
  trace.policy = "stale_model";
  const Matrix sens = w.topRows(g);
  const Vector bias = w.row(g).transpose();
  Vector q_next = Vector::Zero(g);
  for (long t = 1; t <= horizon; ++t) {
    const Vector q_max = plant.q_max(t);
    const Vector q = project(q_next, q_max);
    PlantObservation obs;
    try {
      obs = plant.apply(t, q);
    } catch (const ConvergenceError& e) {
      detail::abort_trace(trace, t, e);
      return trace;
    }
    TraceRow row = detail::make_row(t, StepMode::Control, q, q_max, obs);
    row.v_pred = sens.transpose() * q + bias;
    row.v_pred_prior = row.v_pred;
    const auto tc = std::chrono::steady_clock::now();
    const Vector dq = gradient_step(sens, obs.measured, cfg, q);
    if (t < horizon) q_next = control_update(q, dq, cfg.step, plant.q_max(t + 1));
    row.t_control_ms = detail::elapsed_ms(tc);
    trace.rows.push_back(std::move(row));
  }
  return trace;
}

/// Linearization used by the stale_model policy: finite differences of the
/// (optionally impedance-perturbed) network at the reference step, q = 0.
inline Matrix build_stale_model(const NetworkCase& c, const Profile& profile, const ScenarioConfig& cfg) {
  const NetworkCase model_case =
      cfg.stale.mismatch > 0.0 ? perturb_impedances(c, cfg.stale.mismatch, cfg.stale.mismatch_seed) : c;
  auto net = std::make_shared<const NetworkPlant>(model_case, cfg.powerflow);
  if (cfg.stale.reference_step > profile.size()) throw ValidationError("stale reference_step beyond the profile");
  FrozenPlant frozen(net, exogenous_at(profile, cfg.stale.reference_step), Vector(), 0.0, 0);
  return stale_sensitivity(frozen, Vector::Zero(net->channel_count()), cfg.stale.perturbation);
}

/// Profile plus the configuration's events.
inline Profile scenario_profile(const ScenarioConfig& cfg) {
  Profile p = load_profile(cfg.profile_path, cfg.interval);
  p.events.insert(p.events.end(), cfg.events.begin(), cfg.events.end());
  return p;
}

inline long resolve_horizon(const ScenarioConfig& cfg, const Profile& profile) {
  const long h = cfg.horizon == 0 ? profile.size() : cfg.horizon;
  if (h > profile.size())
    throw ValidationError("horizon " + std::to_string(h) + " exceeds the profile length " + std::to_string(profile.size()));
  return h;
}

/// One closed-loop run; deterministic in (case, policy, profile, config, seed).
inline ScenarioTrace run(const NetworkCase& c, Policy policy, const Profile& profile, const ScenarioConfig& cfg,
                         std::uint64_t seed) {
  validate(cfg);
  validate(profile);
  auto net = std::make_shared<const NetworkPlant>(c, cfg.powerflow);
  const long horizon = resolve_horizon(cfg, profile);
  const ControllerConfig cc = resolve_controller(cfg.controller, net->monitored_count());
  ScenarioPlant plant(net, profile, cfg, seed);
  ScenarioTrace trace;
  switch (policy) {
    case Policy::Proposed:
      trace = run_algorithm1(plant, cc, horizon, seed);
      break;
    case Policy::Droop:
      trace = run_droop(plant, *net, cfg.droop, cfg.droop_per_rating, horizon);
      break;
    case Policy::StaleModel:
      trace = run_stale_model(plant, build_stale_model(c, profile, cfg), cc, horizon);
      break;
  }
  detail::label_trace(trace, *net, plant);
  return trace;
}

// --- metrics ------------------------------------------------------------------

/// |prediction - measurement|_1 / M.
inline double mean_abs_error(const Vector& prediction, const Vector& measured) {
  if (prediction.size() != measured.size()) throw DimensionError("mean_abs_error: length mismatch");
  if (measured.size() == 0) return 0.0;
  return (prediction - measured).cwiseAbs().sum() / static_cast<double>(measured.size());
}

/// Per-row MAE of the trace's own prediction (NaN where no model was active).
inline std::vector<double> compute_mae(const ScenarioTrace& trace, bool prior = false) {
  std::vector<double> out;
  out.reserve(trace.rows.size());
  for (const TraceRow& r : trace.rows) {
    const Vector& pred = prior ? r.v_pred_prior : r.v_pred;
    out.push_back(pred.size() == r.v_meas.size() && pred.size() > 0 ? mean_abs_error(pred, r.v_meas)
                                                                    : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

/// Per-row MAE of a fixed linear model W ((G+1) x M) on the trace's dispatch.
inline std::vector<double> compute_mae(const Matrix& w, const ScenarioTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.rows.size());
  for (const TraceRow& r : trace.rows) {
    if (w.rows() != r.q.size() + 1 || w.cols() != r.v_meas.size()) throw DimensionError("compute_mae: model shape mismatch");
    const Vector pred = w.topRows(r.q.size()).transpose() * r.q + w.row(r.q.size()).transpose();
    out.push_back(mean_abs_error(pred, r.v_meas));
  }
  return out;
}

struct Metrics {
  double mae = std::numeric_limits<double>::quiet_NaN();  // mean over rows with a prediction
  long mae_steps = 0;
  long violations = 0;            // (t, channel) pairs outside bounds, t >= counted_from
  long violations_all_steps = 0;  // same, over the whole trace
  double total_loss = 0.0;        // p.u. * s
  double v_min = std::numeric_limits<double>::infinity();
  double v_max = -std::numeric_limits<double>::infinity();
  double v_lo = 0.95;
  double v_hi = 1.05;
  long counted_from = 1;
  long steps = 0;
};

/// Violations use the true monitored magnitudes.
inline Metrics compute_metrics(const ScenarioTrace& trace, double v_lo, double v_hi, long counted_from = 1,
                               double interval = 1.0) {
  Metrics m;
  m.v_lo = v_lo;
  m.v_hi = v_hi;
  m.counted_from = counted_from;
  m.steps = static_cast<long>(trace.rows.size());
  const std::vector<double> mae = compute_mae(trace);
  double mae_sum = 0.0;
  for (std::size_t k = 0; k < trace.rows.size(); ++k) {
    const TraceRow& r = trace.rows[k];
    long bad = 0;
    for (Eigen::Index i = 0; i < r.v_true_monitored.size(); ++i) {
      const double v = r.v_true_monitored(i);
      if (v < v_lo || v > v_hi) ++bad;
      if (r.t >= counted_from) {
        m.v_min = std::min(m.v_min, v);
        m.v_max = std::max(m.v_max, v);
      }
    }
    m.violations_all_steps += bad;
    if (r.t >= counted_from) m.violations += bad;
    m.total_loss += r.loss * interval;
    if (std::isfinite(mae[k])) {
      mae_sum += mae[k];
      ++m.mae_steps;
    }
  }
  if (m.mae_steps > 0) m.mae = mae_sum / static_cast<double>(m.mae_steps);
  return m;
}

/// First step at which violations are counted for a configuration.
inline long settled_step(const ScenarioConfig& cfg) {
  return static_cast<long>(cfg.controller.regression.window) + cfg.settle_steps + 1;
}

}  // namespace vvc
