#pragma once

// Independent reference computations used by the verification suites. None
// of these share code paths with the production solvers: the regression
// oracle refits from scratch by QR, the network oracles assemble their own
// admittance matrix from an incidence formulation.

#include "vvc/core.hpp"
#include "vvc/netmodel.hpp"
#include "vvc/regression.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <vector>

namespace vvc::oracle {

/// Newest sample weight 1, oldest beta^(n-1).
inline Vector window_weights(std::size_t n, double beta) {
  Vector w(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) w(static_cast<Eigen::Index>(k)) = std::pow(beta, static_cast<double>(n - 1 - k));
  return w;
}

/// argmin_W sum_k w_k |y_k - W^T x_k|^2 + ridge |W|_F^2 via a stacked QR.
template <class Samples>
Matrix batch_weighted_ridge(const Samples& samples, double beta, double ridge) {
  const std::size_t n = samples.size();
  const Eigen::Index p = samples.begin()->x.size();
  const Eigen::Index m = samples.begin()->y.size();
  const Vector w = window_weights(n, beta);
  Matrix a = Matrix::Zero(static_cast<Eigen::Index>(n) + p, p);
  Matrix b = Matrix::Zero(static_cast<Eigen::Index>(n) + p, m);
  Eigen::Index r = 0;
  for (const Sample& s : samples) {
    const double sw = std::sqrt(w(r));
    a.row(r) = sw * s.x.transpose();
    b.row(r) = sw * s.y.transpose();
    ++r;
  }
  a.bottomRows(p) = std::sqrt(ridge) * Matrix::Identity(p, p);
  return a.colPivHouseholderQr().solve(b);
}

/// (sum_k w_k x_k x_k^T + ridge I)^-1 by full-pivot LU.
template <class Samples>
Matrix weighted_gram_inverse(const Samples& samples, double beta, double ridge) {
  const std::size_t n = samples.size();
  const Eigen::Index p = samples.begin()->x.size();
  const Vector w = window_weights(n, beta);
  Matrix g = ridge * Matrix::Identity(p, p);
  Eigen::Index r = 0;
  for (const Sample& s : samples) g += w(r++) * s.x * s.x.transpose();
  return g.fullPivLu().inverse();
}

inline double relative_frobenius(const Matrix& a, const Matrix& reference) {
  const double scale = reference.norm();
  return (a - reference).norm() / (scale > 0.0 ? scale : 1.0);
}

/// |V2| of a source V1 feeding a constant-power load S through z:
/// |V2|^2 = (a + sqrt(a^2 - 4 |z|^2 |S|^2)) / 2, a = |V1|^2 - 2 (rP + xQ).
inline double two_bus_voltage(double v1, Complex z, Complex s_load) {
  const double a = v1 * v1 - 2.0 * (z.real() * s_load.real() + z.imag() * s_load.imag());
  const double disc = a * a - 4.0 * std::norm(z) * std::norm(s_load);
  if (disc < 0.0) throw Error("two_bus_voltage: no power-flow solution");
  return std::sqrt(0.5 * (a + std::sqrt(disc)));
}

/// Node-phase admittance matrix assembled as A^T Y_prim A over branch
/// conductors; rows/cols follow `order`.
struct IncidenceNetwork {
  std::vector<NodePhase> order;
  std::map<NodePhase, Eigen::Index> index;
  CMatrix y;
  std::vector<Eigen::Index> slack;
  std::vector<Eigen::Index> free;
  CVector v_slack;  // on `slack` entries
};

inline IncidenceNetwork incidence_network(const NetworkCase& c) {
  IncidenceNetwork net;
  for (const Node& n : c.nodes)
    for (Phase p : kAllPhases)
      if (n.phases.contains(p)) net.order.push_back({n.id, p});
  std::sort(net.order.begin(), net.order.end());
  for (std::size_t k = 0; k < net.order.size(); ++k) net.index[net.order[k]] = static_cast<Eigen::Index>(k);

  std::size_t conductors = 0;
  for (const Branch& b : c.branches) conductors += static_cast<std::size_t>(b.phases.size());
  const auto nb = static_cast<Eigen::Index>(conductors);
  const auto nn = static_cast<Eigen::Index>(net.order.size());
  CMatrix a = CMatrix::Zero(nb, nn);
  CMatrix yprim = CMatrix::Zero(nb, nb);
  Eigen::Index off = 0;
  for (const Branch& b : c.branches) {
    const Eigen::Index k = b.phases.size();
    Eigen::Index r = 0;
    for (Phase p : kAllPhases) {
      if (!b.phases.contains(p)) continue;
      a(off + r, net.index.at({b.from, p})) = 1.0;
      a(off + r, net.index.at({b.to, p})) = -1.0;
      ++r;
    }
    yprim.block(off, off, k, k) = b.z.inverse();
    off += k;
  }
  net.y = a.transpose() * yprim * a;
  for (Eigen::Index k = 0; k < nn; ++k) {
    if (net.order[static_cast<std::size_t>(k)].node == c.slack) {
      net.slack.push_back(k);
    } else {
      net.free.push_back(k);
    }
  }
  net.v_slack.resize(static_cast<Eigen::Index>(net.slack.size()));
  const double shift = 2.0 * std::numbers::pi / 3.0;
  for (std::size_t k = 0; k < net.slack.size(); ++k) {
    const Phase p = net.order[static_cast<std::size_t>(net.slack[k])].phase;
    const double ang = p == Phase::A ? 0.0 : (p == Phase::B ? -shift : shift);
    net.v_slack(static_cast<Eigen::Index>(k)) = std::polar(c.v_slack, ang);
  }
  return net;
}

/// Voltages (in `order`) of a network whose loads are all constant impedance,
/// from one linear solve: (Y_nn + diag(conj(s0))) v = -Y_ns v_s.
inline CVector constant_impedance_voltages(const NetworkCase& c) {
  const IncidenceNetwork net = incidence_network(c);
  const auto nf = static_cast<Eigen::Index>(net.free.size());
  const auto ns = static_cast<Eigen::Index>(net.slack.size());
  std::map<Eigen::Index, Eigen::Index> free_of;
  for (Eigen::Index k = 0; k < nf; ++k) free_of[net.free[static_cast<std::size_t>(k)]] = k;
  CMatrix ynn(nf, nf), yns(nf, ns);
  for (Eigen::Index r = 0; r < nf; ++r) {
    for (Eigen::Index k = 0; k < nf; ++k) ynn(r, k) = net.y(net.free[static_cast<std::size_t>(r)], net.free[static_cast<std::size_t>(k)]);
    for (Eigen::Index k = 0; k < ns; ++k) yns(r, k) = net.y(net.free[static_cast<std::size_t>(r)], net.slack[static_cast<std::size_t>(k)]);
  }
  for (const ZipLoad& l : c.loads) {
    if (!(l.zip_p == ZipCoefficients{1.0, 0.0, 0.0} && l.zip_q == ZipCoefficients{1.0, 0.0, 0.0}))
      throw Error("constant_impedance_voltages: every load must be pure Z");
    auto it = free_of.find(net.index.at(l.at));
    if (it == free_of.end()) continue;
    ynn(it->second, it->second) += std::conj(l.s0);
  }
  const CVector vf = ynn.fullPivLu().solve(-yns * net.v_slack);
  CVector v(static_cast<Eigen::Index>(net.order.size()));
  for (Eigen::Index k = 0; k < nf; ++k) v(net.free[static_cast<std::size_t>(k)]) = vf(k);
  for (Eigen::Index k = 0; k < ns; ++k) v(net.slack[static_cast<std::size_t>(k)]) = net.v_slack(k);
  return v;
}

struct GaussSeidelResult {
  std::vector<NodePhase> order;
  CVector v;
  int sweeps = 0;
};

/// Damped Gauss-Seidel on the incidence admittance matrix. `extra` adds
/// constant injections (generation positive) per node-phase.
inline GaussSeidelResult gauss_seidel(const NetworkCase& c, const std::map<NodePhase, Complex>& extra = {},
                                      double damping = 0.7, double tol = 1e-13, int max_sweeps = 200000) {
  const IncidenceNetwork net = incidence_network(c);
  const auto n = static_cast<Eigen::Index>(net.order.size());
  CVector v(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Phase p = net.order[static_cast<std::size_t>(k)].phase;
    const double shift = 2.0 * std::numbers::pi / 3.0;
    v(k) = std::polar(c.v_slack, p == Phase::A ? 0.0 : (p == Phase::B ? -shift : shift));
  }
  std::vector<std::vector<const ZipLoad*>> loads(static_cast<std::size_t>(n));
  for (const ZipLoad& l : c.loads) loads[static_cast<std::size_t>(net.index.at(l.at))].push_back(&l);
  CVector fixed = CVector::Zero(n);
  for (const auto& [np, s] : extra) fixed(net.index.at(np)) += s;

  GaussSeidelResult out;
  out.order = net.order;
  for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
    double change = 0.0;
    for (Eigen::Index i : net.free) {
      Complex s = fixed(i);
      const double m = std::abs(v(i));
      for (const ZipLoad* l : loads[static_cast<std::size_t>(i)])
        s -= Complex(l->s0.real() * (l->zip_p.z * m * m + l->zip_p.i * m + l->zip_p.p),
                     l->s0.imag() * (l->zip_q.z * m * m + l->zip_q.i * m + l->zip_q.p));
      Complex acc = std::conj(s / v(i));
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) acc -= net.y(i, j) * v(j);
      const Complex target = acc / net.y(i, i);
      const Complex next = (1.0 - damping) * v(i) + damping * target;
      change = std::max(change, std::abs(next - v(i)));
      v(i) = next;
    }
    out.sweeps = sweep;
    if (change <= tol) {
      out.v = v;
      return out;
    }
  }
  throw Error("gauss_seidel: no convergence");
}

}  // namespace vvc::oracle
