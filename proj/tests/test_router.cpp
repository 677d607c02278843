#include <gtest/gtest.h>

#include <cmath>

#include "come/router.hpp"

using namespace come;

namespace {

GateMatrix gates_from_rows(const Mat& probs) {
  GateMatrix g;
  g.probs = probs;
  g.logits = Mat(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.size(); ++i) g.logits.values()[i] = std::log(probs.values()[i]);
  return g;
}

RouterState zero_router(std::size_t experts, std::size_t width) {
  RouterState s;
  s.w = Mat(experts, width);
  s.b = Mat(1, experts);
  return s;
}

}  // namespace

TEST(Gate, BiasOnlyExamples) {
  RouterState s = zero_router(2, 3);
  s.b(0, 1) = std::log(3.0);
  const GateMatrix g = gate(Mat(2, 3), s);
  EXPECT_NEAR(g.probs(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(g.probs(1, 1), 0.75, 1e-15);
  s.temperature = 0.5;
  const GateMatrix sharp = gate(Mat(1, 3), s);
  EXPECT_NEAR(sharp.probs(0, 1), 0.9, 1e-15);
  EXPECT_NEAR(sharp.logits(0, 1), 2.0 * std::log(3.0), 1e-15);
}

TEST(Gate, UniformWithZeroWeights) {
  const GateMatrix g = gate(Mat(4, 3, 1.5), zero_router(5, 3));
  for (double v : g.probs.values()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Gate, RejectsBadState) {
  RouterState s = zero_router(2, 3);
  s.temperature = 0.0;
  EXPECT_THROW(gate(Mat(1, 3), s), std::invalid_argument);
  s.temperature = 1.0;
  EXPECT_THROW(gate(Mat(1, 4), s), std::invalid_argument);
}

TEST(TopK, OrdersByGate) {
  const Selection s = topk_select(gates_from_rows(Mat::from_rows({{0.15, 0.5, 0.05, 0.3}})), 2);
  ASSERT_EQ(s[0].size(), 2u);
  EXPECT_EQ(s[0][0].expert, 1u);
  EXPECT_EQ(s[0][1].expert, 3u);
  EXPECT_DOUBLE_EQ(s[0][0].gate, 0.5);
  const Selection all = topk_select(gates_from_rows(Mat::from_rows({{0.5, 0.3, 0.15, 0.05}})), 4);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(all[0][r].expert, r);
}

TEST(TopK, TiesGoToLowerIndex) {
  const Selection s = topk_select(gates_from_rows(Mat::from_rows({{0.25, 0.25, 0.25, 0.25}})), 3);
  EXPECT_EQ(s[0][0].expert, 0u);
  EXPECT_EQ(s[0][1].expert, 1u);
  EXPECT_EQ(s[0][2].expert, 2u);
  EXPECT_THROW(topk_select(gates_from_rows(Mat(1, 2, 0.5)), 3), std::invalid_argument);
  EXPECT_THROW(topk_select(gates_from_rows(Mat(1, 2, 0.5)), 0), std::invalid_argument);
}

TEST(Capacity, Examples) {
  EXPECT_EQ(expert_capacity(64, 1, 8, 1.25), 10u);
  EXPECT_EQ(expert_capacity(20, 1, 8, 1.25), 4u);
  EXPECT_EQ(expert_capacity(128, 2, 4, 1.25), 80u);
  EXPECT_THROW(expert_capacity(10, 1, 4, 0.0), std::invalid_argument);
  EXPECT_THROW(expert_capacity(10, 1, 4, -1.0), std::invalid_argument);
}

TEST(Dispatch, AllTokensOnOneExpertOverflow) {
  Selection sel(20, std::vector<ExpertChoice>{{0, 0.9}});
  const DispatchPlan plan = build_dispatch(sel, 20, 8, 1, 1.25);
  EXPECT_EQ(plan.capacity, 4u);
  EXPECT_EQ(plan.admitted[0], (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(plan.overflow_count(), 16u);
  for (std::size_t t = 0; t < 20; ++t) EXPECT_EQ(plan.routes[t][0].admitted, t < 4);
}

TEST(Dispatch, RenormalizedWeights) {
  Selection sel{{{2, 0.6}, {0, 0.2}}};
  const DispatchPlan raw = build_dispatch(sel, 1, 4, 2, 4.0, false);
  EXPECT_DOUBLE_EQ(raw.routes[0][0].weight, 0.6);
  const DispatchPlan norm = build_dispatch(sel, 1, 4, 2, 4.0, true);
  EXPECT_NEAR(norm.routes[0][0].weight, 0.75, 1e-15);
  EXPECT_NEAR(norm.routes[0][1].weight, 0.25, 1e-15);
}

TEST(Dispatch, RandomSelectionsRespectCapacity) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t experts = 2 + rng.index(9);
    const std::size_t k = 1 + rng.index(std::min<std::size_t>(experts, 4));
    const std::size_t tokens = 1 + rng.index(80);
    const double f = rng.uniform(0.1, 2.5);
    Mat probs(tokens, experts);
    for (std::size_t t = 0; t < tokens; ++t) {
      double s = 0.0;
      for (double& v : probs.row(t)) s += (v = std::exp(3.0 * rng.normal()));
      for (double& v : probs.row(t)) v /= s;
    }
    const GateMatrix g = gates_from_rows(probs);
    const Selection sel = topk_select(g, k);
    const DispatchPlan plan = build_dispatch(sel, tokens, experts, k, f);
    const std::size_t cap = expert_capacity(tokens, k, experts, f);
    ASSERT_EQ(plan.capacity, cap);
    std::size_t admitted = 0;
    for (std::size_t j = 0; j < experts; ++j) {
      ASSERT_LE(plan.admitted[j].size(), cap);
      ASSERT_TRUE(std::is_sorted(plan.admitted[j].begin(), plan.admitted[j].end()));
      admitted += plan.admitted[j].size();
      // The admitted set is the first `cap` tokens that chose expert j.
      std::vector<std::size_t> chose;
      for (std::size_t t = 0; t < tokens; ++t)
        for (const auto& c : sel[t])
          if (c.expert == j) chose.push_back(t);
      chose.resize(std::min(chose.size(), cap));
      ASSERT_EQ(plan.admitted[j], chose);
    }
    ASSERT_EQ(admitted + plan.overflow_count(), tokens * k);
    for (std::size_t t = 0; t < tokens; ++t) {
      ASSERT_EQ(plan.routes[t].size(), k);
      for (std::size_t r = 1; r < k; ++r)
        ASSERT_GE(plan.routes[t][r - 1].gate, plan.routes[t][r].gate);
    }
  }
}

TEST(Dispatch, ReplanKeepsDecisions) {
  Rng rng(2);
  RouterState s = RouterState::init(4, 3, rng);
  s.top_k = 2;
  Mat x(10, 3);
  for (double& v : x.values()) v = rng.normal();
  const GateMatrix g = gate(x, s);
  const DispatchPlan plan = build_dispatch(topk_select(g, 2), 10, 4, 2, 0.8);
  for (double& v : s.b.values()) v += 0.5;
  const GateMatrix g2 = gate(x, s);
  const DispatchPlan re = replan_with_gates(plan, g2);
  EXPECT_EQ(re.admitted, plan.admitted);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t r = 0; r < 2; ++r) {
      EXPECT_EQ(re.routes[t][r].expert, plan.routes[t][r].expert);
      EXPECT_EQ(re.routes[t][r].gate, g2.probs(t, plan.routes[t][r].expert));
    }
}
