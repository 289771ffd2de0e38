#include "vvc/core.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace vvc;

TEST(PhaseSet, ParsesAndPrintsInCanonicalOrder) {
  auto s = PhaseSet::parse("CA");
  ASSERT_TRUE(s.has_value());
  EXPECT_EQ(s->str(), "AC");
  EXPECT_EQ(s->size(), 2);
  EXPECT_TRUE(s->contains(Phase::A));
  EXPECT_FALSE(s->contains(Phase::B));
}

TEST(PhaseSet, RejectsDuplicatesAndUnknownLetters) {
  EXPECT_FALSE(PhaseSet::parse("AA").has_value());
  EXPECT_FALSE(PhaseSet::parse("AD").has_value());
  EXPECT_TRUE(PhaseSet::parse("").has_value());
  EXPECT_TRUE(PhaseSet::parse("")->empty());
}

TEST(PhaseSet, Intersection) {
  auto abc = *PhaseSet::parse("ABC");
  auto bc = *PhaseSet::parse("bc");
  EXPECT_EQ(abc.intersect(bc), bc);
  EXPECT_TRUE(PhaseSet::parse("A")->intersect(bc).empty());
}

TEST(NodePhase, OrdersByNodeThenPhase) {
  std::set<NodePhase> s{{12, Phase::B}, {6, Phase::C}, {12, Phase::A}};
  std::vector<std::string> labels;
  for (const auto& np : s) labels.push_back(np.label());
  EXPECT_EQ(labels, (std::vector<std::string>{"6C", "12A", "12B"}));
}

TEST(Errors, CarryDiagnostics) {
  ConvergenceError c("no", 1e-3, 200);
  EXPECT_DOUBLE_EQ(c.residual(), 1e-3);
  EXPECT_EQ(c.iterations(), 200);
  DegenerateWindowError d("flat", -2.0);
  EXPECT_DOUBLE_EQ(d.denominator(), -2.0);
  const Error& base = d;
  EXPECT_STREQ(base.what(), "flat");
}
