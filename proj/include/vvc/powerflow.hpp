#pragma once

// Three-phase unbalanced power flow by the implicit Z-bus fixed point:
//
//   Y_nn V^{k+1} = conj(S(V^k) / V^k) - Y_ns V_s
//
// where n ranges over non-slack node-phases and s over the slack phases.
// Y_nn is factorized once per case and reused for every solve.

#include "vvc/core.hpp"
#include "vvc/netmodel.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <vector>

namespace vvc {

struct SolverSettings {
  double tol = 1e-8;
  int max_iter = 200;
};

/// Node-phase ordering shared by an admittance system and its solutions.
struct NodePhaseLayout {
  std::vector<NodePhase> all;          // sorted (node, phase)
  std::vector<Eigen::Index> free_pos;  // position in `all` of each free unknown
  std::vector<Eigen::Index> slack_pos;
  std::map<NodePhase, Eigen::Index> position;  // NodePhase -> index into `all`
  std::map<NodePhase, Eigen::Index> free_index;

  Eigen::Index at(const NodePhase& np) const {
    auto it = position.find(np);
    if (it == position.end()) throw DimensionError("unknown node-phase " + np.label());
    return it->second;
  }

  std::vector<Eigen::Index> positions(std::span<const NodePhase> nps) const {
    std::vector<Eigen::Index> out;
    out.reserve(nps.size());
    for (const NodePhase& np : nps) out.push_back(at(np));
    return out;
  }
};

/// Phasor of the balanced slack source on phase p.
inline Complex slack_phasor(double magnitude, Phase p) {
  constexpr double kShift = 2.0 * std::numbers::pi / 3.0;
  const double angle = p == Phase::A ? 0.0 : (p == Phase::B ? -kShift : kShift);
  return std::polar(magnitude, angle);
}

class AdmittanceSystem {
 public:
  const NodePhaseLayout& layout() const { return *layout_; }
  std::shared_ptr<const NodePhaseLayout> shared_layout() const { return layout_; }
  Eigen::Index dimension() const { return ynn_.rows(); }
  const CMatrix& ynn() const { return ynn_; }
  const CMatrix& yns() const { return yns_; }
  const CMatrix& ysn() const { return ysn_; }
  const CMatrix& yss() const { return yss_; }
  const CVector& slack_voltage() const { return v_slack_; }

  /// Y_nn^{-1} rhs using the stored factorization.
  CVector solve_linear(const CVector& rhs) const { return lu_.solve(rhs); }

 private:
  friend AdmittanceSystem build_admittance(const NetworkCase& c);

  std::shared_ptr<const NodePhaseLayout> layout_;
  CMatrix ynn_, yns_, ysn_, yss_;
  CVector v_slack_;
  Eigen::PartialPivLU<CMatrix> lu_;
};

/// Builds and factorizes the node-phase admittance matrix of a valid case.
inline AdmittanceSystem build_admittance(const NetworkCase& c) {
  auto layout = std::make_shared<NodePhaseLayout>();
  layout->all = c.node_phases();
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(layout->all.size()); ++k) {
    const NodePhase& np = layout->all[k];
    layout->position[np] = k;
    if (np.node == c.slack) {
      layout->slack_pos.push_back(k);
    } else {
      layout->free_index[np] = static_cast<Eigen::Index>(layout->free_pos.size());
      layout->free_pos.push_back(k);
    }
  }
  const auto n_all = static_cast<Eigen::Index>(layout->all.size());

  CMatrix y = CMatrix::Zero(n_all, n_all);
  for (const Branch& b : c.branches) {
    std::ostringstream tag;
    tag << "branch " << b.from << "-" << b.to;
    if (b.z.size() == 0 || b.z.cwiseAbs().maxCoeff() == 0.0)
      throw SingularNetworkError(tag.str() + " has zero impedance");
    Eigen::FullPivLU<CMatrix> zlu(b.z);
    zlu.setThreshold(1e-12);
    if (!zlu.isInvertible()) throw SingularNetworkError(tag.str() + " impedance matrix is singular");
    CMatrix yb = zlu.inverse();

    std::vector<Eigen::Index> from_idx, to_idx;
    for (Phase p : kAllPhases) {
      if (!b.phases.contains(p)) continue;
      from_idx.push_back(layout->at({b.from, p}));
      to_idx.push_back(layout->at({b.to, p}));
    }
    for (std::size_t r = 0; r < from_idx.size(); ++r) {
      for (std::size_t k = 0; k < from_idx.size(); ++k) {
        const Complex v = yb(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
        y(from_idx[r], from_idx[k]) += v;
        y(to_idx[r], to_idx[k]) += v;
        y(from_idx[r], to_idx[k]) -= v;
        y(to_idx[r], from_idx[k]) -= v;
      }
    }
  }

  AdmittanceSystem sys;
  const auto nf = static_cast<Eigen::Index>(layout->free_pos.size());
  const auto ns = static_cast<Eigen::Index>(layout->slack_pos.size());
  sys.ynn_.resize(nf, nf);
  sys.yns_.resize(nf, ns);
  sys.ysn_.resize(ns, nf);
  sys.yss_.resize(ns, ns);
  for (Eigen::Index r = 0; r < nf; ++r) {
    for (Eigen::Index k = 0; k < nf; ++k) sys.ynn_(r, k) = y(layout->free_pos[r], layout->free_pos[k]);
    for (Eigen::Index k = 0; k < ns; ++k) sys.yns_(r, k) = y(layout->free_pos[r], layout->slack_pos[k]);
  }
  for (Eigen::Index r = 0; r < ns; ++r) {
    for (Eigen::Index k = 0; k < nf; ++k) sys.ysn_(r, k) = y(layout->slack_pos[r], layout->free_pos[k]);
    for (Eigen::Index k = 0; k < ns; ++k) sys.yss_(r, k) = y(layout->slack_pos[r], layout->slack_pos[k]);
  }
  sys.v_slack_.resize(ns);
  for (Eigen::Index k = 0; k < ns; ++k) sys.v_slack_(k) = slack_phasor(c.v_slack, layout->all[layout->slack_pos[k]].phase);

  if (nf > 0) {
    sys.lu_.compute(sys.ynn_);
    const double rcond = sys.lu_.rcond();
    if (!(rcond > 1e-13)) {
      // Name the first free node-phase that no branch reaches.
      std::string culprit;
      for (Eigen::Index r = 0; r < nf; ++r)
        if (std::abs(sys.ynn_(r, r)) == 0.0) {
          culprit = " (" + layout->all[layout->free_pos[r]].label() + " is isolated)";
          break;
        }
      throw SingularNetworkError("admittance matrix is singular" + culprit);
    }
  }
  sys.layout_ = std::move(layout);
  return sys;
}

/// Power drawn by a ZIP load at voltage v (per-unit, V0 = 1).
inline Complex zip_power(const ZipLoad& load, Complex v) {
  const double m = std::abs(v);
  return {load.s0.real() * load.zip_p.factor(m), load.s0.imag() * load.zip_q.factor(m)};
}

/// Net complex power injections at the free node-phases. Loads enter with a
/// negative sign through their voltage-dependent ZIP law; everything in
/// `fixed` (inverter outputs) is voltage independent.
struct InjectionSet {
  struct LoadTerm {
    Eigen::Index index;  // free-unknown index
    ZipLoad load;
  };

  CVector fixed;
  std::vector<LoadTerm> loads;

  InjectionSet() = default;
  explicit InjectionSet(Eigen::Index n) : fixed(CVector::Zero(n)) {}

  CVector evaluate(const CVector& v) const {
    CVector s = fixed;
    for (const LoadTerm& t : loads) s(t.index) -= zip_power(t.load, v(t.index));
    return s;
  }
};

/// Loads of the case scaled by `load_scale`, optionally forcing every load to
/// the given ZIP triples. Loads placed on the slack node are ignored.
inline InjectionSet case_injections(const NetworkCase& c, const AdmittanceSystem& sys, double load_scale = 1.0,
                                    const ZipCoefficients* zip_override = nullptr) {
  InjectionSet inj(sys.dimension());
  const auto& free_index = sys.layout().free_index;
  for (const ZipLoad& l : c.loads) {
    auto it = free_index.find(l.at);
    if (it == free_index.end()) continue;
    ZipLoad scaled = l;
    scaled.s0 *= load_scale;
    if (zip_override) scaled.zip_p = scaled.zip_q = *zip_override;
    inj.loads.push_back({it->second, scaled});
  }
  return inj;
}

/// Adds a constant injection (generation positive) at a free node-phase.
inline void add_injection(InjectionSet& inj, const AdmittanceSystem& sys, const NodePhase& at, Complex s) {
  auto it = sys.layout().free_index.find(at);
  if (it == sys.layout().free_index.end()) return;  // slack absorbs it
  inj.fixed(it->second) += s;
}

struct VoltageSolution {
  std::shared_ptr<const NodePhaseLayout> layout;
  CVector v;  // every node-phase, in layout order
  int iterations = 0;
  double residual = 0.0;
  double loss_total = 0.0;
  Complex slack_power;  // complex power delivered by the slack source
  bool converged = false;

  Complex at(const NodePhase& np) const { return v(layout->at(np)); }

  Vector magnitudes() const { return v.cwiseAbs(); }

  Vector magnitudes(std::span<const Eigen::Index> positions) const {
    Vector out(static_cast<Eigen::Index>(positions.size()));
    for (std::size_t k = 0; k < positions.size(); ++k) out(static_cast<Eigen::Index>(k)) = std::abs(v(positions[k]));
    return out;
  }
};

/// Runs the implicit Z-bus fixed point from a flat start. Throws
/// ConvergenceError (carrying the last residual) after `max_iter` sweeps.
inline VoltageSolution solve(const AdmittanceSystem& sys, const InjectionSet& inj, const SolverSettings& settings = {}) {
  if (!(settings.tol > 0.0)) throw Error("power flow tolerance must be positive");
  const NodePhaseLayout& layout = sys.layout();
  const Eigen::Index nf = sys.dimension();

  CVector v(nf);
  for (Eigen::Index k = 0; k < nf; ++k) {
    const Phase p = layout.all[layout.free_pos[k]].phase;
    v(k) = slack_phasor(std::abs(sys.slack_voltage()(0)), p);
  }
  const CVector slack_term = sys.yns() * sys.slack_voltage();

  VoltageSolution sol;
  sol.layout = sys.shared_layout();
  double residual = std::numeric_limits<double>::infinity();
  int it = 0;
  if (nf > 0) {
    for (it = 1; it <= settings.max_iter; ++it) {
      CVector s = inj.evaluate(v);
      CVector current = (s.array() / v.array()).conjugate().matrix();
      CVector next = sys.solve_linear(current - slack_term);
      residual = (next - v).cwiseAbs().maxCoeff();
      v = std::move(next);
      if (!std::isfinite(residual)) break;
      if (residual <= settings.tol) break;
    }
    if (!(residual <= settings.tol)) {
      std::ostringstream os;
      os << "power flow did not converge after " << settings.max_iter << " iterations (residual " << residual << ")";
      throw ConvergenceError(os.str(), residual, settings.max_iter);
    }
  } else {
    residual = 0.0;
  }

  sol.iterations = nf > 0 ? it : 0;
  sol.residual = residual;
  sol.converged = true;
  sol.v.resize(static_cast<Eigen::Index>(layout.all.size()));
  for (Eigen::Index k = 0; k < nf; ++k) sol.v(layout.free_pos[k]) = v(k);
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(layout.slack_pos.size()); ++k)
    sol.v(layout.slack_pos[k]) = sys.slack_voltage()(k);

  const CVector& vs = sys.slack_voltage();
  CVector slack_current = sys.ysn() * v + sys.yss() * vs;
  sol.slack_power = (vs.array() * slack_current.array().conjugate()).sum();
  const Complex bus_injection = nf > 0 ? inj.evaluate(v).sum() : Complex{};
  sol.loss_total = sol.slack_power.real() + bus_injection.real();
  return sol;
}

/// Monitored magnitudes plus independent N(0, sigma^2) noise per channel.
template <class Rng>
Vector measure(const VoltageSolution& sol, std::span<const Eigen::Index> positions, double noise_sigma, Rng& rng) {
  Vector out = sol.magnitudes(positions);
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (Eigen::Index k = 0; k < out.size(); ++k) out(k) += noise(rng);
  }
  return out;
}

}  // namespace vvc
