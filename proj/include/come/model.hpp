#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "come/attention.hpp"
#include "come/clustering.hpp"
#include "come/experts.hpp"
#include "come/losses.hpp"
#include "come/router.hpp"
#include "come/tokens.hpp"

namespace come {

enum class ClusterStrategy { fine2coarse, multistep, none };
enum class LoadVariant { literal, margin };
enum class ModelKind { come, dense };

std::string_view to_string(ClusterStrategy s);
std::string_view to_string(LoadVariant v);
std::string_view to_string(ModelKind k);
ClusterStrategy parse_cluster_strategy(std::string_view s);
LoadVariant parse_load_variant(std::string_view s);
ModelKind parse_model_kind(std::string_view s);

struct ModelConfig {
  ModelKind kind = ModelKind::come;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t sources = 4;
  std::size_t classes = 3;
  bool attention_residual = false;

  std::size_t experts = 8;
  std::size_t top_k = 1;
  std::size_t expert_hidden = 0;  // 0 → 4·width
  double capacity_factor = 1.25;
  double gate_temperature = 1.0;
  bool renormalize_gates = false;

  ClusterStrategy clustering = ClusterStrategy::fine2coarse;
  std::size_t fine_centers = 16;
  std::size_t coarse_centers = 8;
  std::size_t lloyd_iters = 20;
  std::size_t multistep_k = 4;
  std::size_t multistep_steps = 5;
  std::size_t multistep_iters = 3;  // Lloyd iterations per step
  double suppress_fraction = 0.01;

  bool use_ste = true;
  bool use_see = true;
  bool use_s2e = true;
  std::uint64_t ste_seed = 1001;
  std::uint64_t see_seed = 2002;

  double traceability_weight = 1.0;
  double balance_weight = 0.1;
  bool average_traceability = true;
  LoadVariant load = LoadVariant::literal;

  std::size_t dense_hidden = 0;  // 0 → matched to the COME layer's active parameters

  std::size_t hidden() const { return expert_hidden == 0 ? 4 * width : expert_hidden; }
  void validate() const;
};

// Parameters touched by one token in the COME layer (shared experts, K
// routed experts, router and dimension reduction), frozen ones included.
std::size_t come_active_parameters(const ModelConfig& config);
// Hidden width that gives a single FFN at least that many parameters.
std::size_t matched_dense_hidden(const ModelConfig& config);

// Trainable parameters. Parts unused by the configured model are left empty.
struct ModelParams {
  MhaParams attention;
  DrParams dr;
  RouterState router;
  ExpertBank bank;
  Ffn dense;
  Mat head_w;  // (C × D)
  Mat head_b;  // (1 × C)

  ModelParams zeros_like() const;

  // Visits every non-empty trainable matrix with a dotted name.
  template <class F>
  void for_each(F&& fn) {
    const auto visit = [&](const std::string& name, Mat& m) {
      if (!m.empty()) fn(name, m);
    };
    attention.for_each([&](std::string_view n, Mat& m) { visit("attention." + std::string(n), m); });
    dr.for_each([&](std::string_view n, Mat& m) { visit("dr." + std::string(n), m); });
    router.for_each([&](std::string_view n, Mat& m) { visit("router." + std::string(n), m); });
    for (std::size_t j = 0; j < bank.experts().size(); ++j)
      bank.experts()[j].for_each([&](std::string_view n, Mat& m) {
        visit("experts." + std::to_string(j) + "." + std::string(n), m);
      });
    dense.for_each([&](std::string_view n, Mat& m) { visit("dense." + std::string(n), m); });
    visit("head.w", head_w);
    visit("head.b", head_b);
  }

  std::vector<Mat*> pointers();
  std::vector<std::string> names();
};

// Discrete routing decisions of a forward pass, replayable so that the
// rest of the graph can be differentiated with them held fixed.
struct RoutingFreeze {
  Mat cluster_features;
  DispatchPlan plan;
};

struct ForwardPass {
  TokenBatch batch;
  std::vector<std::uint32_t> labels;

  MhaCache attention;
  Mat attended;

  std::optional<ClusterModel> clusters;
  std::optional<MultiStepState> multistep;
  Mat cluster_features;
  Mat routed_input;  // F'
  GateMatrix gates;
  DispatchPlan plan;
  ExpertCache expert_cache;
  FfnCache dense_cache;

  Mat f_st, f_se, f_s2;
  Mat aggregate;  // F^E
  Mat pooled;
  Mat logits;

  LossTerm ce, tb, ip, load;
  LossReport loss;
  double aggregate_residual = 0.0;  // ‖F^E − f_st − f_se − f_s2‖∞

  bool routed() const { return !gates.probs.empty(); }
};

class ComeModel {
 public:
  ComeModel(const ModelConfig& config, std::uint64_t init_seed);
  ComeModel(const ModelConfig& config, ModelParams params);

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  const FrozenSharedExpert& structure_expert() const { return ste_; }
  const FrozenSharedExpert& semantic_expert() const { return see_; }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }

  ForwardPass forward(const TokenBatch& batch, std::span<const std::uint32_t> labels, Rng& routing,
                      const RoutingFreeze* freeze = nullptr) const;
  // Gradients of the total loss, shaped like params().
  ModelParams backward(const ForwardPass& pass) const;

  std::size_t trainable_count();

 private:
  ModelConfig config_;
  ModelParams params_;
  FrozenSharedExpert ste_;
  FrozenSharedExpert see_;
  std::vector<std::vector<std::size_t>> groups_;
};

RoutingFreeze freeze_routing(const ForwardPass& pass);

}  // namespace come
