#pragma once

// Network case: topology, three-phase branch impedances, ZIP loads and the
// inverter fleet, held in per-unit on the case's (v_kv, s_kva) bases.
//
// File schema (JSON): top-level keys `nodes`, `branches`, `loads`,
// `inverters`, `slack`, `bases`, `monitored`. Complex numbers are `[re, im]`,
// impedances in ohm, powers in kVA, voltages in kV (line-to-neutral).

#include "vvc/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace vvc {

/// ZIP polynomial coefficients; z + i + p must equal 1.
struct ZipCoefficients {
  double z = 0.0;
  double i = 0.0;
  double p = 1.0;

  static constexpr ZipCoefficients constant_power() { return {0.0, 0.0, 1.0}; }

  double factor(double vmag) const { return z * vmag * vmag + i * vmag + p; }

  friend bool operator==(const ZipCoefficients&, const ZipCoefficients&) = default;
};

struct Node {
  int id = 0;
  PhaseSet phases;
};

struct Branch {
  int from = 0;
  int to = 0;
  PhaseSet phases;  // phases common to both endpoints
  CMatrix z;        // per-unit series impedance over `phases`
};

struct ZipLoad {
  NodePhase at;
  Complex s0;  // per-unit at |v| = 1
  ZipCoefficients zip_p;
  ZipCoefficients zip_q;
};

struct Inverter {
  NodePhase at;
  double s_rating = 0.0;  // per-unit apparent power rating
  double p_peak = 0.0;    // per-unit active output at pv_scale = 1
  bool controllable = true;
};

struct Bases {
  double v_kv = 1.0;   // line-to-neutral voltage base
  double s_kva = 1.0;  // per-phase power base

  double z_ohm() const { return v_kv * v_kv * 1000.0 / s_kva; }
};

struct NetworkCase {
  std::string name;
  std::string note;
  std::vector<Node> nodes;
  std::vector<Branch> branches;
  std::vector<ZipLoad> loads;
  std::vector<Inverter> inverters;
  int slack = 1;
  Bases bases;
  double v_slack = 1.0;
  std::vector<NodePhase> monitored;

  const Node* find_node(int id) const {
    auto it = std::find_if(nodes.begin(), nodes.end(), [id](const Node& n) { return n.id == id; });
    return it == nodes.end() ? nullptr : &*it;
  }

  bool has(const NodePhase& np) const {
    const Node* n = find_node(np.node);
    return n != nullptr && n->phases.contains(np.phase);
  }

  /// Every node-phase of the case in (node, phase) order.
  std::vector<NodePhase> node_phases() const {
    std::vector<NodePhase> out;
    for (const Node& n : nodes)
      for (Phase p : kAllPhases)
        if (n.phases.contains(p)) out.push_back({n.id, p});
    std::sort(out.begin(), out.end());
    return out;
  }
};

struct ValidationReport {
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }

  std::string summary() const {
    std::ostringstream os;
    for (std::size_t k = 0; k < failures.size(); ++k) os << (k ? "; " : "") << failures[k];
    return os.str();
  }
};

namespace detail {

inline bool all_finite(const CMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      if (!std::isfinite(m(r, c).real()) || !std::isfinite(m(r, c).imag())) return false;
  return true;
}

inline void check_zip(const ZipCoefficients& c, const std::string& what, ValidationReport& report) {
  if (c.z < 0.0 || c.i < 0.0 || c.p < 0.0)
    report.failures.push_back(what + ": ZIP coefficients must be non-negative");
  double sum = c.z + c.i + c.p;
  if (std::abs(sum - 1.0) > 1e-9) {
    std::ostringstream os;
    os << what << ": ZIP coefficients sum to " << sum << ", expected 1";
    report.failures.push_back(os.str());
  }
}

}  // namespace detail

/// Checks every structural invariant of a case; never throws.
inline ValidationReport validate_case(const NetworkCase& c) {
  ValidationReport report;
  auto fail = [&](std::string msg) { report.failures.push_back(std::move(msg)); };

  std::set<int> ids;
  for (const Node& n : c.nodes) {
    if (!ids.insert(n.id).second) fail("duplicate node " + std::to_string(n.id));
    if (n.phases.empty()) fail("node " + std::to_string(n.id) + " has no phases");
  }
  const Node* slack = c.find_node(c.slack);
  if (slack == nullptr) fail("slack node " + std::to_string(c.slack) + " does not exist");
  if (!(c.v_slack > 0.0) || !std::isfinite(c.v_slack)) fail("slack voltage must be positive");
  if (!(c.bases.v_kv > 0.0) || !(c.bases.s_kva > 0.0)) fail("bases must be positive");

  // Branch integrity.
  std::map<int, std::vector<int>> adjacency;
  bool branches_ok = true;
  for (std::size_t k = 0; k < c.branches.size(); ++k) {
    const Branch& b = c.branches[k];
    std::string tag = "branch " + std::to_string(b.from) + "-" + std::to_string(b.to);
    const Node* from = c.find_node(b.from);
    const Node* to = c.find_node(b.to);
    if (from == nullptr || to == nullptr) {
      fail(tag + " references nonexistent node " + std::to_string(from == nullptr ? b.from : b.to));
      branches_ok = false;
      continue;
    }
    if (b.from == b.to) {
      fail(tag + " is a self-loop");
      branches_ok = false;
      continue;
    }
    PhaseSet shared = from->phases.intersect(to->phases);
    if (shared.empty()) fail(tag + " connects nodes without a common phase");
    if (!(b.phases == shared)) fail(tag + " phases " + b.phases.str() + " differ from shared phases " + shared.str());
    if (b.z.rows() != b.phases.size() || b.z.cols() != b.phases.size()) {
      fail(tag + " impedance matrix dimension does not match its phase count");
    } else {
      if (!detail::all_finite(b.z)) fail(tag + " impedance is not finite");
      if ((b.z - b.z.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + b.z.cwiseAbs().maxCoeff()))
        fail(tag + " impedance matrix is not symmetric");
    }
    adjacency[b.from].push_back(b.to);
    adjacency[b.to].push_back(b.from);
  }

  // Radial and connected: a tree rooted at the slack spans every node.
  if (slack != nullptr && branches_ok && !c.nodes.empty()) {
    if (c.branches.size() + 1 != c.nodes.size()) {
      if (c.branches.size() + 1 > c.nodes.size())
        fail("network is not radial: " + std::to_string(c.branches.size()) + " branches for " +
             std::to_string(c.nodes.size()) + " nodes");
      else
        fail("network is not connected");
    } else {
      std::set<int> seen{c.slack};
      std::queue<int> frontier;
      frontier.push(c.slack);
      bool loop = false;
      std::map<int, int> parent{{c.slack, -1}};
      while (!frontier.empty()) {
        int u = frontier.front();
        frontier.pop();
        for (int v : adjacency[u]) {
          if (v == parent[u]) continue;
          if (!seen.insert(v).second) {
            loop = true;
            continue;
          }
          parent[v] = u;
          frontier.push(v);
        }
      }
      if (loop) fail("network is not radial: branches form a loop");
      if (seen.size() != c.nodes.size()) fail("network is not connected to the slack node");
    }
  }

  for (const ZipLoad& l : c.loads) {
    std::string tag = "load at " + l.at.label();
    if (!c.has(l.at)) fail(tag + " is on a missing node-phase");
    if (!std::isfinite(l.s0.real()) || !std::isfinite(l.s0.imag())) fail(tag + " has non-finite power");
    detail::check_zip(l.zip_p, tag + " (P)", report);
    detail::check_zip(l.zip_q, tag + " (Q)", report);
  }

  std::set<NodePhase> inverter_sites;
  for (const Inverter& inv : c.inverters) {
    std::string tag = "inverter at " + inv.at.label();
    if (!c.has(inv.at)) fail(tag + " is on a missing node-phase");
    if (!(inv.s_rating > 0.0)) fail(tag + " must have a positive rating");
    if (inv.p_peak < 0.0) fail(tag + " has negative peak output");
    if (!inverter_sites.insert(inv.at).second) fail("duplicate " + tag);
  }

  if (c.monitored.empty()) fail("monitored set is empty");
  std::set<NodePhase> monitored;
  for (const NodePhase& np : c.monitored) {
    if (!monitored.insert(np).second) fail("monitored channel " + np.label() + " listed twice");
    if (!c.has(np)) fail("monitored channel " + np.label() + " does not exist");
  }
  for (const Inverter& inv : c.inverters)
    if (inv.controllable && !monitored.count(inv.at))
      fail("controllable inverter at " + inv.at.label() + " is not monitored");

  return report;
}

/// One entry of the controllable reactive-power vector q_G.
struct InverterChannel {
  int inverter = 0;  // index into NetworkCase::inverters
  NodePhase at;
};

/// Controllable inverters ordered by (node, phase). Every q_G-shaped vector in
/// the library uses this ordering.
inline std::vector<InverterChannel> inverter_channels(const NetworkCase& c) {
  std::vector<InverterChannel> out;
  for (std::size_t k = 0; k < c.inverters.size(); ++k)
    if (c.inverters[k].controllable) out.push_back({static_cast<int>(k), c.inverters[k].at});
  std::sort(out.begin(), out.end(), [](const InverterChannel& a, const InverterChannel& b) { return a.at < b.at; });
  return out;
}

// --- JSON (de)serialization --------------------------------------------------

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  return j.at(key);
}

inline Complex parse_complex(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ParseError(where + ": complex value must be [re, im]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline ZipCoefficients parse_zip(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw ParseError(where + ": ZIP triple must have three entries");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Phase parse_phase_field(const nlohmann::json& j, const std::string& where) {
  std::string s = j.get<std::string>();
  auto p = s.size() == 1 ? parse_phase(s[0]) : std::nullopt;
  if (!p) throw ParseError(where + ": bad phase '" + s + "'");
  return *p;
}

}  // namespace detail

/// Parses a label such as "12B".
inline NodePhase parse_node_phase(const std::string& label) {
  if (label.size() < 2) throw ParseError("bad node-phase label '" + label + "'");
  auto p = parse_phase(label.back());
  std::string digits = label.substr(0, label.size() - 1);
  if (!p || digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit))
    throw ParseError("bad node-phase label '" + label + "'");
  return {std::stoi(digits), *p};
}

/// Builds a case from its JSON document without validating it.
inline NetworkCase parse_case(const nlohmann::json& doc) {
  using detail::require;
  NetworkCase c;
  try {
    c.name = doc.value("name", std::string{});
    c.note = doc.value("note", std::string{});
    const auto& bases = require(doc, "bases", "case");
    c.bases.v_kv = require(bases, "v_kv", "bases").get<double>();
    c.bases.s_kva = require(bases, "s_kva", "bases").get<double>();
    c.v_slack = bases.value("v_slack_pu", 1.0);
    if (!(c.bases.v_kv > 0.0) || !(c.bases.s_kva > 0.0)) throw ParseError("bases: must be positive");
    const double zb = c.bases.z_ohm();
    const double sb = c.bases.s_kva;
    c.slack = require(doc, "slack", "case").get<int>();

    for (const auto& n : require(doc, "nodes", "case")) {
      Node node;
      node.id = require(n, "id", "node").get<int>();
      auto phases = PhaseSet::parse(require(n, "phases", "node").get<std::string>());
      if (!phases) throw ParseError("node " + std::to_string(node.id) + ": bad phase string");
      node.phases = *phases;
      c.nodes.push_back(node);
    }

    for (const auto& b : require(doc, "branches", "case")) {
      Branch br;
      br.from = require(b, "from", "branch").get<int>();
      br.to = require(b, "to", "branch").get<int>();
      std::string where = "branch " + std::to_string(br.from) + "-" + std::to_string(br.to);
      const auto& z = require(b, "z", where);
      if (!z.is_array()) throw ParseError(where + ": z must be a matrix");
      const auto n = static_cast<Eigen::Index>(z.size());
      br.z.resize(n, n);
      for (Eigen::Index r = 0; r < n; ++r) {
        if (!z[r].is_array() || static_cast<Eigen::Index>(z[r].size()) != n)
          throw ParseError(where + ": z must be square");
        for (Eigen::Index col = 0; col < n; ++col) br.z(r, col) = detail::parse_complex(z[r][col], where) / zb;
      }
      if (b.contains("phases")) {
        auto ph = PhaseSet::parse(b.at("phases").get<std::string>());
        if (!ph) throw ParseError(where + ": bad phase string");
        br.phases = *ph;
      } else {
        const Node* from = c.find_node(br.from);
        const Node* to = c.find_node(br.to);
        if (from && to) br.phases = from->phases.intersect(to->phases);
      }
      c.branches.push_back(std::move(br));
    }

    for (const auto& l : require(doc, "loads", "case")) {
      ZipLoad load;
      load.at.node = require(l, "node", "load").get<int>();
      load.at.phase = detail::parse_phase_field(require(l, "phase", "load"), "load");
      std::string where = "load at " + load.at.label();
      load.s0 = detail::parse_complex(require(l, "s", where), where) / sb;
      load.zip_p = l.contains("zip_p") ? detail::parse_zip(l.at("zip_p"), where) : ZipCoefficients::constant_power();
      load.zip_q = l.contains("zip_q") ? detail::parse_zip(l.at("zip_q"), where) : ZipCoefficients::constant_power();
      c.loads.push_back(load);
    }

    for (const auto& g : require(doc, "inverters", "case")) {
      Inverter inv;
      inv.at.node = require(g, "node", "inverter").get<int>();
      inv.at.phase = detail::parse_phase_field(require(g, "phase", "inverter"), "inverter");
      std::string where = "inverter at " + inv.at.label();
      inv.s_rating = require(g, "s_rating", where).get<double>() / sb;
      inv.p_peak = g.value("p_peak", inv.s_rating * sb) / sb;
      inv.controllable = g.value("controllable", true);
      c.inverters.push_back(inv);
    }

    for (const auto& m : require(doc, "monitored", "case")) c.monitored.push_back(parse_node_phase(m.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("case: ") + e.what());
  }
  return c;
}

/// Inverse of parse_case: writes physical units (ohm, kVA, kV).
inline nlohmann::json case_to_json(const NetworkCase& c) {
  using nlohmann::json;
  const double zb = c.bases.z_ohm();
  const double sb = c.bases.s_kva;
  json doc;
  doc["name"] = c.name;
  if (!c.note.empty()) doc["note"] = c.note;
  doc["bases"] = {{"v_kv", c.bases.v_kv}, {"s_kva", c.bases.s_kva}, {"v_slack_pu", c.v_slack}};
  doc["slack"] = c.slack;
  doc["nodes"] = json::array();
  for (const Node& n : c.nodes) doc["nodes"].push_back({{"id", n.id}, {"phases", n.phases.str()}});
  doc["branches"] = json::array();
  for (const Branch& b : c.branches) {
    json z = json::array();
    for (Eigen::Index r = 0; r < b.z.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index col = 0; col < b.z.cols(); ++col)
        row.push_back({b.z(r, col).real() * zb, b.z(r, col).imag() * zb});
      z.push_back(row);
    }
    doc["branches"].push_back({{"from", b.from}, {"to", b.to}, {"phases", b.phases.str()}, {"z", z}});
  }
  doc["loads"] = json::array();
  for (const ZipLoad& l : c.loads)
    doc["loads"].push_back({{"node", l.at.node},
                            {"phase", std::string(1, phase_letter(l.at.phase))},
                            {"s", {l.s0.real() * sb, l.s0.imag() * sb}},
                            {"zip_p", {l.zip_p.z, l.zip_p.i, l.zip_p.p}},
                            {"zip_q", {l.zip_q.z, l.zip_q.i, l.zip_q.p}}});
  doc["inverters"] = json::array();
  for (const Inverter& inv : c.inverters)
    doc["inverters"].push_back({{"node", inv.at.node},
                                {"phase", std::string(1, phase_letter(inv.at.phase))},
                                {"s_rating", inv.s_rating * sb},
                                {"p_peak", inv.p_peak * sb},
                                {"controllable", inv.controllable}});
  doc["monitored"] = json::array();
  for (const NodePhase& np : c.monitored) doc["monitored"].push_back(np.label());
  return doc;
}

/// Reads, converts to per-unit and validates a case file.
inline NetworkCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open case file '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("case file '" + path + "': " + e.what());
  }
  NetworkCase c = parse_case(doc);
  ValidationReport report = validate_case(c);
  if (!report.ok()) throw ValidationError("case file '" + path + "': " + report.summary());
  return c;
}

}  // namespace vvc
