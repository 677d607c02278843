#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "come/datagen.hpp"
#include "come/model.hpp"

namespace come {

struct Ablation {
  bool no_ste = false;
  bool no_see = false;
  bool no_dse = false;  // both shared experts removed
  bool no_clustering = false;
  bool no_tb = false;
  bool no_s2e = false;  // routed experts removed, shared experts only

  bool any() const { return no_ste || no_see || no_dse || no_clustering || no_tb || no_s2e; }
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  AdamWConfig optimizer;
  std::size_t log_every = 50;
  std::size_t eval_every = 0;  // 0: evaluate the test split only after the last step
  std::uint64_t seed = 1;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  Ablation ablation;

  void validate() const;
};

// Model configuration actually trained: width, sources and classes come from
// the data section and the ablation switches are applied.
ModelConfig effective_model(const RunConfig& config);

struct EvalRecord {
  std::size_t samples = 0;
  std::size_t tokens = 0;
  double accuracy = 0.0;
  // Fraction of tokens whose highest-gate expert is owned by their source.
  double purity = 0.0;
  // Same, counting only tokens whose highest-gate route was admitted.
  double admitted_purity = 0.0;
  std::vector<double> utilization;  // admitted tokens per expert, mean per batch
  double util_cv = 0.0;
  double overflow_rate = 0.0;  // dropped routes / (tokens · K)
  double task_ce = 0.0, l_tb = 0.0, l_ip = 0.0, l_load = 0.0, total = 0.0;
  std::vector<double> importance, load;  // mean per batch
  double aggregate_residual = 0.0;  // max over batches
  std::size_t capacity_violations = 0;
};

// One logged training step. Loss fields and train_acc describe the step's
// own batch; test fields are NaN unless the step also evaluated.
struct MetricsRecord {
  std::size_t step = 0;
  double task_ce = 0.0, l_tb = 0.0, l_ip = 0.0, l_load = 0.0, total = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double purity = 0.0;
  double test_purity = 0.0;
  double util_cv = 0.0;
  double overflow_rate = 0.0;
  double aggregate_residual = 0.0;
  std::vector<double> importance, load, utilization;
};

struct TrainResult {
  explicit TrainResult(ComeModel m) : model(std::move(m)) {}

  ComeModel model;
  std::vector<MetricsRecord> history;
  EvalRecord test;
  std::size_t steps_completed = 0;
  bool diverged = false;
  std::string diagnostic;
  std::string ste_digest_before, ste_digest_after;
  std::string see_digest_before, see_digest_after;
};

// Per-batch routing statistics, shared by training logs and evaluation.
struct BatchRouting {
  std::size_t pure = 0;
  std::size_t admitted_pure = 0;
  std::size_t overflow = 0;
  std::vector<std::size_t> admitted;  // per expert
  bool capacity_ok = true;
};
BatchRouting routing_stats(const ForwardPass& pass, const std::vector<std::vector<std::size_t>>& groups);

// Routing generator for training step `index` of a run with `seed`.
Rng batch_routing_rng(std::uint64_t seed, std::uint64_t index);
// Routing generator for evaluation batch `index`; disjoint from training steps.
Rng eval_routing_rng(std::uint64_t seed, std::uint64_t index);

EvalRecord evaluate(const ComeModel& model, const std::vector<Sample>& samples,
                    std::size_t batch_size, std::uint64_t seed);

using StepCallback = std::function<void(const MetricsRecord&)>;

TrainResult train(const RunConfig& config, const Dataset& data, const StepCallback& on_log = {});

// Variant names in table order.
const std::vector<std::string>& ablation_variants();
RunConfig with_variant(const RunConfig& base, std::string_view variant);

struct VariantResult {
  std::string variant;
  EvalRecord test;
  bool diverged = false;
};

std::vector<VariantResult> run_ablations(const RunConfig& base, const Dataset& data,
                                         std::size_t threads = 1);

enum class SweepAxis { experts, topk };
std::string_view to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view s);
const std::vector<std::size_t>& sweep_values(SweepAxis axis);

struct SweepRow {
  std::size_t value = 0;
  EvalRecord test;
  bool diverged = false;
};

std::vector<SweepRow> sweep(const RunConfig& base, SweepAxis axis, const Dataset& data,
                            std::size_t threads = 1);

// Runs fn(0..n-1) on up to `threads` worker threads. Results are indexed, so
// the outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace come
