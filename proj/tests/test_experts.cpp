#include <gtest/gtest.h>

#include <cmath>

#include "come/experts.hpp"
#include "come/router.hpp"

using namespace come;

namespace {

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

Mat naive_ffn(const Ffn& f, std::span<const double> x) {
  Mat out(1, f.w2.rows());
  std::vector<double> h(f.hidden());
  for (std::size_t i = 0; i < h.size(); ++i) {
    double s = f.b1(0, i);
    for (std::size_t d = 0; d < x.size(); ++d) s += f.w1(i, d) * x[d];
    h[i] = std::tanh(s);
  }
  for (std::size_t o = 0; o < out.cols(); ++o) {
    double s = f.b2(0, o);
    for (std::size_t i = 0; i < h.size(); ++i) s += f.w2(o, i) * h[i];
    out(0, o) = s;
  }
  return out;
}

}  // namespace

TEST(FrozenSharedExpert, DeterministicDigestPerSeed) {
  const FrozenSharedExpert a(SharedKind::structure, 8, 1001);
  const FrozenSharedExpert b(SharedKind::structure, 8, 1001);
  const FrozenSharedExpert c(SharedKind::structure, 8, 1002);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.digest().size(), 64u);
  EXPECT_NE(a.digest(), c.digest());
  Rng rng(3);
  const Mat x = random_mat(5, 8, rng);
  (void)a.forward(x);
  EXPECT_EQ(a.digest(), b.digest());
}

TEST(FrozenSharedExpert, ZeroInputGivesTanhOfBias) {
  const FrozenSharedExpert e(SharedKind::semantic, 6, 2002);
  const Mat y = e.forward(Mat(3, 6));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t d = 0; d < 6; ++d) EXPECT_DOUBLE_EQ(y(t, d), std::tanh(e.bias()(0, d)));
}

TEST(FrozenSharedExpert, InputGradientMatchesFiniteDifferences) {
  const FrozenSharedExpert e(SharedKind::structure, 5, 7);
  Rng rng(4);
  const Mat x = random_mat(3, 5, rng);
  const Mat up = random_mat(3, 5, rng);
  const Mat g = e.backward_input(e.forward(x), up);
  const auto r = grad_check(
      [&](std::span<const double> v) {
        const Mat y = e.forward(Mat(3, 5, std::vector<double>(v.begin(), v.end())));
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * up.values()[i];
        return s;
      },
      x.values(), g.values());
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(DimensionReduction, IdentityInitPassesTokensThrough) {
  Rng rng(5);
  const Mat x = random_mat(7, 4, rng);
  const Mat c = random_mat(7, 4, rng);
  EXPECT_EQ(dr_project(x, c, DrParams::identity(4)), x);
}

TEST(DimensionReduction, ClusterBranchReceivesNoGradient) {
  Rng rng(6);
  const Mat x = random_mat(4, 3, rng);
  const Mat c = random_mat(4, 3, rng);
  DrParams p = DrParams::identity(3);
  for (double& v : p.w.values()) v += 0.1 * rng.normal();
  const Mat up = random_mat(4, 3, rng);
  const DrGrads g = dr_backward(x, c, p, up);
  const auto r = grad_check(
      [&](std::span<const double> v) {
        const Mat y = dr_project(Mat(4, 3, std::vector<double>(v.begin(), v.end())), c, p);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * up.values()[i];
        return s;
      },
      x.values(), g.attended.values());
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(ExpertGroups, ContiguousBlocksWithRemainderUnowned) {
  const auto g = expert_groups(10, 4);
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(g[3], (std::vector<std::size_t>{6, 7}));
  Rng rng(1);
  const ExpertBank bank(10, 4, 4, 6, rng);
  EXPECT_EQ(bank.owner(2), std::optional<std::size_t>(1));
  EXPECT_FALSE(bank.owner(8).has_value());
  EXPECT_FALSE(bank.owner(9).has_value());
}

TEST(ExpertForward, MatchesNaiveWeightedSum) {
  Rng rng(7);
  const std::size_t tokens = 12, experts = 4, width = 5;
  const ExpertBank bank(experts, 2, width, 6, rng);
  RouterState router = RouterState::init(experts, width, rng);
  router.top_k = 2;
  router.capacity_factor = 1.0;
  const Mat x = random_mat(tokens, width, rng);
  const GateMatrix gates = gate(x, router);
  const DispatchPlan plan = build_dispatch(topk_select(gates, 2), tokens, experts, 2, 1.0);
  const Mat y = expert_forward(bank, plan, x);
  Mat expected(tokens, width);
  for (std::size_t t = 0; t < tokens; ++t)
    for (const Route& r : plan.routes[t]) {
      if (!r.admitted) continue;
      const Mat e = naive_ffn(bank.experts()[r.expert], x.row(t));
      for (std::size_t d = 0; d < width; ++d) expected(t, d) += r.weight * e(0, d);
    }
  EXPECT_LT(max_abs_diff(y, expected), 1e-12);
}

TEST(ExpertForward, OverflowTokensGetZero) {
  Rng rng(8);
  const ExpertBank bank(2, 1, 3, 4, rng);
  Selection sel(6, std::vector<ExpertChoice>{{0, 0.9}});
  const DispatchPlan plan = build_dispatch(sel, 6, 2, 1, 0.5);
  ASSERT_EQ(plan.capacity, 2u);
  const Mat y = expert_forward(bank, plan, random_mat(6, 3, rng));
  for (std::size_t t = 2; t < 6; ++t)
    for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(y(t, d), 0.0);
}

TEST(Aggregate, ElementwiseSum) {
  const Mat a = Mat::from_rows({{1, 2}});
  const Mat b = Mat::from_rows({{10, 20}});
  const Mat c = Mat::from_rows({{100, 200}});
  EXPECT_EQ(come_aggregate(a, b, c), Mat::from_rows({{111, 222}}));
  EXPECT_THROW(come_aggregate(a, b, Mat(2, 2)), std::invalid_argument);
}
