#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>

#include "come/config.hpp"
#include "come/harness.hpp"
#include "come/io.hpp"
#include "come/reports.hpp"

using namespace come;
namespace fs = std::filesystem;

namespace {

RunConfig small_run() {
  RunConfig c;
  c.data.width = 16;
  c.data.tokens = 4;
  c.data.samples = 240;
  c.data.seed = 2;
  c.model.heads = 2;
  c.model.experts = 4;
  c.model.expert_hidden = 16;
  c.model.fine_centers = 8;
  c.model.coarse_centers = 4;
  c.model.lloyd_iters = 5;
  c.train.steps = 30;
  c.train.log_every = 10;
  c.train.seed = 3;
  c.train.optimizer.lr = 1e-3;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("come_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_params(ModelParams a, ModelParams b) {
  auto pa = a.pointers();
  auto pb = b.pointers();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(*pa[i] == *pb[i])) return false;
  return true;
}

}  // namespace

TEST(Train, SameSeedGivesIdenticalRuns) {
  const RunConfig c = small_run();
  const Dataset d = gen_dataset(c.data);
  const TrainResult a = train(c, d);
  const TrainResult b = train(c, d);
  EXPECT_TRUE(same_params(a.model.params(), b.model.params()));
  const fs::path dir = temp_dir("determinism");
  write_metrics_csv(dir / "a.csv", a.history);
  write_metrics_csv(dir / "b.csv", b.history);
  EXPECT_EQ(sha256_file(dir / "a.csv"), sha256_file(dir / "b.csv"));
  // Steps are zero-based: every log_every-th step plus the last one.
  EXPECT_EQ(a.history.size(), 4u);
  EXPECT_EQ(a.history.back().step, 29u);
  EXPECT_FALSE(std::isnan(a.history.back().test_acc));
  EXPECT_TRUE(std::isnan(a.history.front().test_acc));

  RunConfig other = c;
  other.train.seed = 4;
  EXPECT_FALSE(same_params(train(other, d).model.params(), a.model.params()));
}

TEST(Train, ZeroStepsReturnsInitialParameters) {
  RunConfig c = small_run();
  c.train.steps = 0;
  const Dataset d = gen_dataset(c.data);
  const TrainResult r = train(c, d);
  const ComeModel init(effective_model(c), c.train.seed);
  EXPECT_TRUE(same_params(r.model.params(), init.params()));
  EXPECT_EQ(r.steps_completed, 0u);
}

TEST(Train, FrozenExpertsAndAggregateHold) {
  const RunConfig c = small_run();
  const Dataset d = gen_dataset(c.data);
  const TrainResult r = train(c, d);
  EXPECT_EQ(r.ste_digest_before, r.ste_digest_after);
  EXPECT_EQ(r.see_digest_before, r.see_digest_after);
  EXPECT_NE(r.ste_digest_before, r.see_digest_before);
  for (const MetricsRecord& m : r.history) {
    EXPECT_LE(m.aggregate_residual, 1e-9);
    EXPECT_TRUE(std::isfinite(m.total));
  }
  EXPECT_EQ(r.test.capacity_violations, 0u);
}

TEST(Train, LogCallbackSeesEveryRow) {
  const RunConfig c = small_run();
  const Dataset d = gen_dataset(c.data);
  std::vector<std::size_t> steps;
  const TrainResult r = train(c, d, [&](const MetricsRecord& m) { steps.push_back(m.step); });
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 10, 20, 29}));
}

TEST(Evaluate, RepeatableAndRejectsEmptySplit) {
  const RunConfig c = small_run();
  const Dataset d = gen_dataset(c.data);
  const ComeModel m(effective_model(c), 1);
  const EvalRecord a = evaluate(m, d.test, 8, 5);
  const EvalRecord b = evaluate(m, d.test, 8, 5);
  EXPECT_EQ(eval_json(a), eval_json(b));
  EXPECT_EQ(a.samples, d.test.size());
  EXPECT_GE(a.purity, 0.0);
  EXPECT_LE(a.purity, 1.0);
  EXPECT_THROW(evaluate(m, {}, 8, 5), std::invalid_argument);
}

TEST(Evaluate, DenseModelHasNoRoutingMetrics) {
  RunConfig c = small_run();
  c.model.kind = ModelKind::dense;
  const Dataset d = gen_dataset(c.data);
  const ComeModel m(effective_model(c), 1);
  const EvalRecord e = evaluate(m, d.test, 8, 5);
  EXPECT_TRUE(std::isnan(e.purity));
  EXPECT_GE(e.accuracy, 0.0);
}

TEST(RouteDump, PurityAgreesWithEvaluate) {
  const RunConfig c = small_run();
  const Dataset d = gen_dataset(c.data);
  const TrainResult r = train(c, d);
  const fs::path dir = temp_dir("routes");
  const RouteDumpSummary s =
      route_dump(r.model, d.test, c.train.batch_size, c.train.seed, dir / "routes.csv", dir / "proj.csv");
  const EvalRecord e = evaluate(r.model, d.test, c.train.batch_size, c.train.seed);
  EXPECT_NEAR(s.purity, e.purity, 1e-12);
  EXPECT_NEAR(purity_from_route_csv(dir / "routes.csv"), e.purity, 1e-12);
  EXPECT_EQ(s.tokens, d.test.size() * c.data.tokens);
  EXPECT_EQ(s.rows, s.tokens * c.model.top_k);
  EXPECT_GE(s.explained_ratio, 0.0);
  EXPECT_LE(s.explained_ratio, 1.0);
}

TEST(Ablation, VariantsSwitchComponents) {
  const RunConfig base = small_run();
  EXPECT_FALSE(effective_model(with_variant(base, "no_ste")).use_ste);
  EXPECT_TRUE(effective_model(with_variant(base, "no_ste")).use_see);
  const ModelConfig dse = effective_model(with_variant(base, "no_dse"));
  EXPECT_FALSE(dse.use_ste || dse.use_see);
  EXPECT_EQ(effective_model(with_variant(base, "no_clustering")).clustering, ClusterStrategy::none);
  EXPECT_EQ(effective_model(with_variant(base, "no_tb")).traceability_weight, 0.0);
  EXPECT_FALSE(effective_model(with_variant(base, "no_s2e")).use_s2e);
  EXPECT_THROW(with_variant(base, "no_router"), std::invalid_argument);
  EXPECT_EQ(ablation_variants().front(), "full");
}

TEST(Ablation, RemovedSharedExpertsContributeNothing) {
  RunConfig c = with_variant(small_run(), "no_dse");
  const Dataset d = gen_dataset(c.data);
  const ComeModel m(effective_model(c), 1);
  std::vector<std::uint32_t> labels;
  const std::vector<std::size_t> idx{0, 1};
  Rng routing(1);
  const ForwardPass p = m.forward(make_batch(d.train, idx, &labels), labels, routing);
  EXPECT_EQ(max_abs(p.f_st), 0.0);
  EXPECT_EQ(max_abs(p.f_se), 0.0);
  EXPECT_LT(max_abs_diff(p.aggregate, p.f_s2), 1e-15);
}

TEST(Model, DenseBaselineIsParameterMatched) {
  ModelConfig c;
  const std::size_t active = come_active_parameters(c);
  const std::size_t h = matched_dense_hidden(c);
  const std::size_t dense = 2 * c.width * h + h + c.width;
  EXPECT_GE(dense, active);
  EXPECT_LT(2 * c.width * (h - 1) + (h - 1) + c.width, active);
}

TEST(Sweep, AxisValuesAndParsing) {
  EXPECT_EQ(sweep_values(SweepAxis::experts), (std::vector<std::size_t>{4, 8, 10}));
  EXPECT_EQ(sweep_values(SweepAxis::topk), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(parse_sweep_axis("topk"), SweepAxis::topk);
  EXPECT_THROW(parse_sweep_axis("width"), std::invalid_argument);
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(3, 2, [](std::size_t i) {
                 if (i == 1) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}
