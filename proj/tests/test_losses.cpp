#include <gtest/gtest.h>

#include <cmath>

#include "come/losses.hpp"

using namespace come;

TEST(ImportanceLoss, UniformIsZero) {
  std::vector<double> ip;
  const LossTerm l = importance_loss(Mat(6, 4, 0.25), &ip);
  EXPECT_DOUBLE_EQ(l.value, 0.0);
  EXPECT_EQ(ip, (std::vector<double>{1.5, 1.5, 1.5, 1.5}));
}

TEST(ImportanceLoss, OneHotExample) {
  std::vector<double> ip;
  const LossTerm l = importance_loss(Mat::from_rows({{1, 0}, {1, 0}}), &ip);
  EXPECT_EQ(ip, (std::vector<double>{2.0, 0.0}));
  EXPECT_DOUBLE_EQ(l.value, 1.0);
}

TEST(LoadLoss, OneHotExample) {
  std::vector<double> load;
  const LossTerm l = load_loss(Mat::from_rows({{1, 0}, {1, 0}}), &load);
  const double a = 2.0 * normal_cdf(1.0), b = 2.0 * normal_cdf(0.0);
  EXPECT_NEAR(load[0], a, 1e-15);
  EXPECT_NEAR(load[1], b, 1e-15);
  EXPECT_NEAR(load[0], 1.6826894921, 1e-9);
  const double mean = (a + b) / 2, var = ((a - mean) * (a - mean) + (b - mean) * (b - mean)) / 2;
  EXPECT_NEAR(l.value, var / (mean * mean), 1e-15);
}

TEST(LoadLoss, UniformIsZero) {
  EXPECT_NEAR(load_loss(Mat(5, 3, 1.0 / 3.0)).value, 0.0, 1e-15);
}

TEST(LoadLossMargin, ThresholdIsKthLargestOtherLogit) {
  std::vector<double> load;
  const Mat z = Mat::from_rows({{3.0, 1.0, 0.0}});
  load_loss_margin(z, 1, &load);
  EXPECT_NEAR(load[0], normal_cdf(3.0 - 1.0), 1e-15);
  EXPECT_NEAR(load[1], normal_cdf(1.0 - 3.0), 1e-15);
  EXPECT_NEAR(load[2], normal_cdf(0.0 - 3.0), 1e-15);
  load_loss_margin(z, 2, &load);
  EXPECT_NEAR(load[0], normal_cdf(3.0 - 0.0), 1e-15);
  EXPECT_NEAR(load[2], normal_cdf(0.0 - 1.0), 1e-15);
}

TEST(TraceabilityLoss, UniformGatesGiveLogTwo) {
  const std::vector<std::vector<std::size_t>> groups{{0, 1}, {2, 3}};
  const std::vector<std::uint32_t> sources{0, 1, 1};
  const LossTerm l = traceability_loss(Mat(3, 4, 0.25), sources, groups);
  EXPECT_NEAR(l.value, std::log(2.0), 1e-15);
  const LossTerm sum = traceability_loss(Mat(3, 4, 0.25), sources, groups, false);
  EXPECT_NEAR(sum.value, 3.0 * std::log(2.0), 1e-14);
}

TEST(TraceabilityLoss, SingletonGroupsMatchLoopReference) {
  Rng rng(9);
  Mat g(10, 3);
  std::vector<std::uint32_t> sources(10);
  for (std::size_t t = 0; t < 10; ++t) {
    double s = 0.0;
    for (double& v : g.row(t)) s += (v = rng.uniform(0.05, 1.0));
    for (double& v : g.row(t)) v /= s;
    sources[t] = static_cast<std::uint32_t>(rng.index(3));
  }
  double expected = 0.0;
  for (std::size_t t = 0; t < 10; ++t) expected -= std::log(g(t, sources[t]));
  const LossTerm l = traceability_loss(g, sources, {{0}, {1}, {2}});
  EXPECT_NEAR(l.value, expected / 10.0, 1e-14);
  for (std::size_t t = 0; t < 10; ++t)
    EXPECT_NEAR(l.grad(t, sources[t]), -1.0 / (10.0 * g(t, sources[t])), 1e-12);
}

TEST(TraceabilityLoss, ClampsZeroMass) {
  const LossTerm l = traceability_loss(Mat::from_rows({{0.0, 1.0}}), std::vector<std::uint32_t>{0},
                                       {{0}, {1}});
  EXPECT_EQ(l.clamped, 1u);
  EXPECT_NEAR(l.value, -std::log(kGroupMassFloor), 1e-9);
  EXPECT_TRUE(std::isfinite(l.grad(0, 0)));
}

TEST(TraceabilityLoss, RejectsUnknownSource) {
  EXPECT_THROW(traceability_loss(Mat(1, 2, 0.5), std::vector<std::uint32_t>{2}, {{0}, {1}}),
               std::invalid_argument);
}

TEST(TaskLoss, ZeroLogitsGiveLogClasses) {
  const LossTerm l = task_loss(Mat(4, 3), std::vector<std::uint32_t>{0, 1, 2, 0});
  EXPECT_NEAR(l.value, std::log(3.0), 1e-15);
  EXPECT_NEAR(l.grad(0, 0), (1.0 / 3.0 - 1.0) / 4.0, 1e-15);
  EXPECT_NEAR(l.grad(0, 1), (1.0 / 3.0) / 4.0, 1e-15);
  EXPECT_THROW(task_loss(Mat(1, 3), std::vector<std::uint32_t>{3}), std::invalid_argument);
}

TEST(TotalLoss, LinearInWeights) {
  const LossReport r = total_loss(1.0, 2.0, 3.0, 4.0, {1.0, 0.1});
  EXPECT_NEAR(r.total, 1.0 + 2.0 + 0.7, 1e-15);
  EXPECT_NEAR(r.l_balance, 7.0, 1e-15);
  const LossReport z = total_loss(1.0, 2.0, 3.0, 4.0, {0.0, 0.0});
  EXPECT_DOUBLE_EQ(z.total, 1.0);
  const LossReport d = total_loss(1.0, 2.0, 3.0, 4.0, {2.0, 0.2});
  EXPECT_NEAR(d.total - 1.0, 2.0 * (r.total - 1.0), 1e-14);
}
