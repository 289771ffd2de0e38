#pragma once

// Sliding-window recursive regression of the monitored voltages on the
// augmented reactive injections, v_M ~= W^T [q_G; 1].
//
// The window holds L samples with geometric forgetting beta. The model keeps
//
//   Phi = (sum_tau beta^(t - tau) x_tau x_tau^T + rho I)^(-1)
//   W   = Phi * sum_tau beta^(t - tau) x_tau y_tau^T
//
// where rho is the initial ridge lambda decayed by beta once per added
// sample. After init_batch every step is one rank-one "pull in" of the newest
// sample and one rank-one "push out" of the oldest, both by Sherman-Morrison;
// no factorization is performed past initialization.

#include "vvc/core.hpp"

#include <atomic>
#include <cmath>
#include <deque>
#include <span>
#include <sstream>

namespace vvc {

namespace instrumentation {

/// Dense factorizations/inversions performed by the regression module.
inline std::atomic<std::size_t> regression_factorizations{0};

}  // namespace instrumentation

struct Sample {
  Vector x;  // [q_G; 1]
  Vector y;  // measured monitored magnitudes
  long t = 0;
};

inline Sample make_sample(const Vector& q, const Vector& v, long t) {
  Sample s;
  s.x.resize(q.size() + 1);
  s.x.head(q.size()) = q;
  s.x(q.size()) = 1.0;
  s.y = v;
  s.t = t;
  return s;
}

/// Removal is refused when 1 - beta^L x_old^T Phi x_old drops below this.
inline constexpr double kRemovalDenominatorFloor = 1e-8;

class ResponseModel {
 public:
  /// Weighted ridge fit on exactly L samples: column tau carries weight
  /// beta^(L - tau) so the newest sample has weight 1.
  static ResponseModel init_batch(std::span<const Sample> samples, double beta, double lambda) {
    if (samples.empty()) throw DimensionError("init_batch needs at least one sample");
    if (!(lambda > 0.0)) throw Error("ridge lambda must be positive");
    if (!(beta > 0.0 && beta <= 1.0)) throw Error("forgetting factor must lie in (0, 1]");
    const Eigen::Index n = samples.front().x.size();
    const Eigen::Index m = samples.front().y.size();
    for (const Sample& s : samples) {
      if (s.x.size() != n || s.y.size() != m) throw DimensionError("init_batch samples differ in shape");
      if (s.x(n - 1) != 1.0) throw DimensionError("sample bias entry must equal 1");
    }

    ResponseModel model;
    model.beta_ = beta;
    model.lambda_ = lambda;
    model.ridge_ = lambda;
    model.window_length_ = samples.size();

    Matrix gram = lambda * Matrix::Identity(n, n);
    Matrix cross = Matrix::Zero(n, m);
    const auto count = samples.size();
    for (std::size_t k = 0; k < count; ++k) {
      const double w = std::pow(beta, static_cast<double>(count - 1 - k));
      gram.noalias() += w * samples[k].x * samples[k].x.transpose();
      cross.noalias() += w * samples[k].x * samples[k].y.transpose();
    }
    instrumentation::regression_factorizations.fetch_add(1, std::memory_order_relaxed);
    Eigen::LLT<Matrix> llt(gram);
    model.phi_ = llt.solve(Matrix::Identity(n, n));
    symmetrize(model.phi_);
    model.w_ = model.phi_ * cross;
    model.window_.assign(samples.begin(), samples.end());
    model.step_ = samples.back().t;
    return model;
  }

  /// Pull-in step: the window grows to L + 1.
  void add_sample(const Sample& s) {
    check_shape(s);
    if (window_.size() != window_length_)
      throw Error("add_sample expects a window of exactly L samples");
    const Vector u = phi_ * s.x;
    const double denom = beta_ + s.x.dot(u);
    phi_ = (phi_ - (u * u.transpose()) / denom) / beta_;
    symmetrize(phi_);
    const Vector gain = phi_ * s.x;
    w_.noalias() += gain * (s.y.transpose() - s.x.transpose() * w_);
    ridge_ *= beta_;
    window_.push_back(s);
    step_ = s.t;
  }

  /// Push-out step: drops the oldest sample, which carries weight beta^L.
  /// Throws DegenerateWindowError (leaving the model untouched) if removing
  /// it would leave the Gram matrix numerically singular.
  void remove_oldest() {
    if (window_.size() != window_length_ + 1)
      throw Error("remove_oldest expects a window of L + 1 samples");
    const Sample& old = window_.front();
    const double weight = std::pow(beta_, static_cast<double>(window_length_));
    const Vector u = phi_ * old.x;
    const double denom = 1.0 - weight * old.x.dot(u);
    if (!(denom >= kRemovalDenominatorFloor)) {
      std::ostringstream os;
      os << "regression window lost excitation: removal denominator " << denom << " at step " << step_;
      throw DegenerateWindowError(os.str(), denom);
    }
    phi_ += (weight / denom) * (u * u.transpose());
    symmetrize(phi_);
    const Vector gain = phi_ * old.x;
    w_.noalias() -= weight * gain * (old.y.transpose() - old.x.transpose() * w_);
    window_.pop_front();
  }

  /// One timestep: add the newest sample, then remove the oldest. On a
  /// degenerate removal the model is restored to its pre-call state.
  void update(const Sample& s) {
    const Matrix w_saved = w_;
    const Matrix phi_saved = phi_;
    const double ridge_saved = ridge_;
    const long step_saved = step_;
    add_sample(s);
    try {
      remove_oldest();
    } catch (const DegenerateWindowError&) {
      w_ = w_saved;
      phi_ = phi_saved;
      ridge_ = ridge_saved;
      step_ = step_saved;
      window_.pop_back();
      throw;
    }
  }

  /// W^T [q; 1].
  Vector predict(const Vector& q) const {
    if (q.size() != inputs()) {
      std::ostringstream os;
      os << "predict: expected " << inputs() << " inputs, got " << q.size();
      throw DimensionError(os.str());
    }
    return w_.topRows(inputs()).transpose() * q + w_.row(inputs()).transpose();
  }

  /// W without its bias row: d v_M / d q_G estimate, G x M.
  Matrix sensitivity() const { return w_.topRows(inputs()); }

  Vector bias() const { return w_.row(inputs()).transpose(); }

  Eigen::Index inputs() const { return w_.rows() - 1; }
  Eigen::Index outputs() const { return w_.cols(); }
  const Matrix& weights() const { return w_; }
  const Matrix& phi() const { return phi_; }
  const std::deque<Sample>& window() const { return window_; }
  std::size_t window_length() const { return window_length_; }
  double beta() const { return beta_; }
  double lambda() const { return lambda_; }
  /// Current ridge term inside Phi^-1: lambda * beta^(samples added since init).
  double effective_ridge() const { return ridge_; }
  long step() const { return step_; }

 private:
  ResponseModel() = default;

  static void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

  void check_shape(const Sample& s) const {
    if (s.x.size() != w_.rows() || s.y.size() != w_.cols())
      throw DimensionError("sample shape does not match the model");
    if (s.x(s.x.size() - 1) != 1.0) throw DimensionError("sample bias entry must equal 1");
  }

  Matrix w_;
  Matrix phi_;
  std::deque<Sample> window_;
  std::size_t window_length_ = 0;
  double beta_ = 1.0;
  double lambda_ = 0.0;
  double ridge_ = 0.0;
  long step_ = 0;
};

}  // namespace vvc
