#include "vvc/oracles.hpp"
#include "vvc/regression.hpp"
#include "vvc/verify.hpp"

#include <gtest/gtest.h>

#include <random>
#include <vector>

using namespace vvc;

namespace {

struct Stream {
  std::mt19937_64 rng;
  std::normal_distribution<double> n{0.0, 1.0};
  explicit Stream(std::uint64_t seed) : rng(seed) {}

  Vector q(Eigen::Index g, double scale = 1.0) {
    Vector v(g);
    for (auto& x : v) x = scale * n(rng);
    return v;
  }
  Matrix map(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
    return m;
  }
};

Vector apply(const Matrix& w, const Vector& q) {
  return w.topRows(q.size()).transpose() * q + w.row(q.size()).transpose();
}

std::vector<Sample> window_of(const std::deque<Sample>& d) { return {d.begin(), d.end()}; }

}  // namespace

TEST(InitBatch, IdenticalInputsWithUnitRidge) {
  std::vector<Sample> s;
  const Vector q = Vector::Constant(3, 0.2);
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(q, Vector::Constant(2, 1.0 + 0.01 * t), t));
  const ResponseModel m = ResponseModel::init_batch(s, 0.95, 1.0);
  EXPECT_TRUE(m.weights().allFinite());
  EXPECT_TRUE(m.phi().allFinite());
  EXPECT_LT(oracle::relative_frobenius(m.weights(), oracle::batch_weighted_ridge(s, 0.95, 1.0)), 1e-10);
}

TEST(InitBatch, MatchesBatchOracle) {
  Stream st(1);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(6), st.q(4), t));
  const ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  EXPECT_LT(oracle::relative_frobenius(m.weights(), oracle::batch_weighted_ridge(s, 0.95, 1e-2)), 1e-10);
  EXPECT_LT(oracle::relative_frobenius(m.phi(), oracle::weighted_gram_inverse(s, 0.95, 1e-2)), 1e-10);
}

TEST(InitBatch, RecoversKnownMap) {
  Stream st(2);
  const Matrix w_star = st.map(5, 3);
  std::vector<Sample> s;
  for (int t = 1; t <= 40; ++t) {
    const Vector q = st.q(4);
    s.push_back(make_sample(q, apply(w_star, q), t));
  }
  const ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-8);
  EXPECT_LT((m.weights() - w_star).cwiseAbs().maxCoeff(), 1e-6);

  const Vector held_out = st.q(4);
  EXPECT_LT((m.predict(held_out) - apply(w_star, held_out)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(InitBatch, RejectsBadInput) {
  std::vector<Sample> none;
  EXPECT_THROW(ResponseModel::init_batch(none, 0.95, 1e-2), DimensionError);
  std::vector<Sample> s{make_sample(Vector::Ones(2), Vector::Ones(1), 1)};
  EXPECT_THROW(ResponseModel::init_batch(s, 0.95, 0.0), Error);
  EXPECT_THROW(ResponseModel::init_batch(s, 1.5, 1e-2), Error);
  s[0].x(2) = 0.5;
  EXPECT_THROW(ResponseModel::init_batch(s, 0.95, 1e-2), DimensionError);
}

TEST(AddSample, ZeroResidualLeavesWeights) {
  Stream st(3);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(4), st.q(3), t));
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  const Matrix w = m.weights();
  const Matrix phi = m.phi();
  const Vector q = st.q(4);
  m.add_sample(make_sample(q, m.predict(q), 11));
  EXPECT_LT((m.weights() - w).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((m.phi() - phi).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(AddSample, UnitForgettingMatchesDirectInverse) {
  Stream st(4);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(5), st.q(2), t));
  ResponseModel m = ResponseModel::init_batch(s, 1.0, 1e-1);
  const Sample x = make_sample(st.q(5), st.q(2), 11);
  Matrix gram = oracle::weighted_gram_inverse(s, 1.0, 1e-1).inverse();
  gram += x.x * x.x.transpose();
  m.add_sample(x);
  EXPECT_LT((m.phi() - gram.inverse()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RemoveOldest, DuplicateCancelsAtUnitForgetting) {
  Stream st(5);
  std::vector<Sample> s;
  const Sample dup = make_sample(st.q(3), st.q(2), 1);
  s.push_back(dup);
  for (int t = 2; t <= 8; ++t) s.push_back(make_sample(st.q(3), st.q(2), t));
  ResponseModel m = ResponseModel::init_batch(s, 1.0, 1e-1);
  const Matrix w = m.weights();
  const Matrix phi = m.phi();
  Sample again = dup;
  again.t = 9;
  m.update(again);
  EXPECT_LT((m.weights() - w).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((m.phi() - phi).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Update, MatchesBatchOracleOverShortStream) {
  // Few updates keep the decayed ridge well above rounding.
  Stream st(6);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(25), st.q(26), t));
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  for (int t = 11; t <= 30; ++t) {
    m.update(make_sample(st.q(25), st.q(26), t));
    const auto w = window_of(m.window());
    ASSERT_EQ(w.size(), 10u);
    EXPECT_LT(oracle::relative_frobenius(m.weights(), oracle::batch_weighted_ridge(w, 0.95, m.effective_ridge())), 1e-8)
        << "t = " << t;
    EXPECT_LT(oracle::relative_frobenius(m.phi(), oracle::weighted_gram_inverse(w, 0.95, m.effective_ridge())), 1e-8)
        << "t = " << t;
  }
}

TEST(Update, PhiStaysSymmetric) {
  Stream st(7);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(6), st.q(3), t));
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  for (int t = 11; t <= 60; ++t) {
    m.update(make_sample(st.q(6), st.q(3), t));
    EXPECT_EQ(m.phi(), m.phi().transpose());
  }
}

TEST(Update, NoFactorizationAfterInit) {
  Stream st(8);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(st.q(8), st.q(4), t));
  const std::size_t before = instrumentation::regression_factorizations.load();
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  EXPECT_EQ(instrumentation::regression_factorizations.load(), before + 1);
  for (int t = 11; t <= 200; ++t) m.update(make_sample(st.q(8), st.q(4), t));
  EXPECT_EQ(instrumentation::regression_factorizations.load(), before + 1);
}

TEST(Update, CollinearWindowTripsGuard) {
  const verify::GuardProbe p = verify::collinear_window_probe();
  EXPECT_TRUE(p.threw);
  EXPECT_LT(p.denominator, kRemovalDenominatorFloor);
  EXPECT_TRUE(p.state_restored);
}

TEST(Update, DegenerateRemovalRestoresState) {
  std::vector<Sample> s;
  Vector e1 = Vector::Zero(5);
  e1(0) = 1.0;
  s.push_back(make_sample(e1, Vector::Constant(1, 1.0), 1));
  Vector e2 = Vector::Zero(5);
  e2(1) = 0.5;
  for (int t = 2; t <= 10; ++t) s.push_back(make_sample(e2, Vector::Constant(1, 1.0), t));
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-12);
  const Matrix w = m.weights();
  const Matrix phi = m.phi();
  const double ridge = m.effective_ridge();
  EXPECT_THROW(m.update(make_sample(e2, Vector::Constant(1, 1.0), 11)), DegenerateWindowError);
  EXPECT_EQ(m.weights(), w);
  EXPECT_EQ(m.phi(), phi);
  EXPECT_EQ(m.effective_ridge(), ridge);
  EXPECT_EQ(m.window().size(), 10u);
  EXPECT_EQ(m.window().back().t, 10);
}

TEST(Update, TracksDriftingMap) {
  Stream st(9);
  const Eigen::Index g = 3, mo = 2;
  Matrix w_star = st.map(g + 1, mo);
  std::vector<Sample> s;
  long t = 1;
  for (; t <= 10; ++t) {
    const Vector q = st.q(g);
    s.push_back(make_sample(q, apply(w_star, q), t));
  }
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-6);
  for (int drift = 0; drift < 3; ++drift) {
    w_star += 0.3 * st.map(g + 1, mo);
    const double at_drift = (m.weights() - w_star).norm();
    for (int k = 0; k < 20; ++k, ++t) {
      const Vector q = st.q(g);
      m.update(make_sample(q, apply(w_star, q), t));
    }
    EXPECT_LT((m.weights() - w_star).norm(), 0.01 * at_drift) << "drift " << drift;
  }
}

TEST(Update, StationaryStreamWithoutForgetting) {
  Stream st(10);
  const Matrix w_star = st.map(4, 2);
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) {
    const Vector q = st.q(3);
    s.push_back(make_sample(q, apply(w_star, q), t));
  }
  ResponseModel m = ResponseModel::init_batch(s, 1.0, 1e-9);
  for (int t = 11; t <= 100; ++t) {
    const Vector q = st.q(3);
    m.update(make_sample(q, apply(w_star, q), t));
  }
  EXPECT_LT((m.weights() - w_star).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Predict, BiasOnlyModel) {
  std::vector<Sample> s;
  for (int t = 1; t <= 10; ++t) s.push_back(make_sample(Vector::Zero(3), Vector::Constant(2, 1.01), t));
  const ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-3);
  EXPECT_LT(m.sensitivity().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(m.sensitivity().rows(), 3);
  EXPECT_EQ(m.sensitivity().cols(), 2);
  EXPECT_LT((m.predict(Vector::Zero(3)) - m.bias()).norm(), 1e-15);
  EXPECT_LT((m.predict(Vector::Constant(3, 0.3)) - m.bias()).norm(), 1e-12);
  EXPECT_THROW(m.predict(Vector::Zero(4)), DimensionError);
}

TEST(Update, ShapeMismatch) {
  Stream st(11);
  std::vector<Sample> s;
  for (int t = 1; t <= 4; ++t) s.push_back(make_sample(st.q(3), st.q(2), t));
  ResponseModel m = ResponseModel::init_batch(s, 0.95, 1e-2);
  EXPECT_THROW(m.update(make_sample(st.q(4), st.q(2), 5)), DimensionError);
  EXPECT_THROW(m.remove_oldest(), Error);
}
