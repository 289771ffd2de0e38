#pragma once

// Shared vocabulary for the vvc library: linear-algebra aliases, phase and
// node-phase identifiers, and the exception hierarchy every module throws.

#include <Eigen/Dense>

#include <compare>
#include <complex>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace vvc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

enum class Phase : std::uint8_t { A = 0, B = 1, C = 2 };

inline constexpr Phase kAllPhases[] = {Phase::A, Phase::B, Phase::C};

constexpr char phase_letter(Phase p) { return static_cast<char>('A' + static_cast<int>(p)); }

constexpr int phase_index(Phase p) { return static_cast<int>(p); }

inline std::optional<Phase> parse_phase(char c) {
  switch (c) {
    case 'A': case 'a': return Phase::A;
    case 'B': case 'b': return Phase::B;
    case 'C': case 'c': return Phase::C;
    default: return std::nullopt;
  }
}

/// Small bitset over {A, B, C}; iteration order is always A < B < C.
class PhaseSet {
 public:
  constexpr PhaseSet() = default;

  static std::optional<PhaseSet> parse(const std::string& text) {
    PhaseSet set;
    for (char c : text) {
      auto p = parse_phase(c);
      if (!p || set.contains(*p)) return std::nullopt;
      set.insert(*p);
    }
    return set;
  }

  constexpr void insert(Phase p) { bits_ |= bit(p); }
  constexpr bool contains(Phase p) const { return (bits_ & bit(p)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr int size() const { return (bits_ & 1) + ((bits_ >> 1) & 1) + ((bits_ >> 2) & 1); }

  constexpr PhaseSet intersect(PhaseSet other) const {
    PhaseSet out;
    out.bits_ = static_cast<std::uint8_t>(bits_ & other.bits_);
    return out;
  }

  std::string str() const {
    std::string s;
    for (Phase p : kAllPhases)
      if (contains(p)) s += phase_letter(p);
    return s;
  }

  friend constexpr bool operator==(PhaseSet, PhaseSet) = default;

 private:
  static constexpr std::uint8_t bit(Phase p) { return static_cast<std::uint8_t>(1u << phase_index(p)); }
  std::uint8_t bits_ = 0;
};

/// One phase conductor at one node. Ordered by node id, then phase.
struct NodePhase {
  int node = 0;
  Phase phase = Phase::A;

  std::string label() const { return std::to_string(node) + phase_letter(phase); }

  friend constexpr auto operator<=>(const NodePhase&, const NodePhase&) = default;
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (JSON syntax, missing keys, bad CSV rows).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A case or configuration that parses but violates an invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Admittance block cannot be factorized (zero-impedance branch, islanded node).
class SingularNetworkError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, int iterations)
      : Error(what), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// The sliding window lost excitation; the regression must be re-initialized.
class DegenerateWindowError : public Error {
 public:
  DegenerateWindowError(const std::string& what, double denominator)
      : Error(what), denominator_(denominator) {}
  double denominator() const { return denominator_; }

 private:
  double denominator_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// PV forecast exceeds the inverter rating by more than the tolerated margin.
class InfeasibleForecastError : public Error {
 public:
  using Error::Error;
};

}  // namespace vvc
