#pragma once

#include <cstddef>
#include <string_view>
#include <utility>
#include <vector>

#include "come/numerics.hpp"

namespace come {

// Linear gating network with temperature-scaled softmax and Top-K dispatch.
struct RouterState {
  Mat w;  // (M' × D)
  Mat b;  // (1 × M')
  double temperature = 1.0;
  std::size_t top_k = 1;
  double capacity_factor = 1.25;
  bool renormalize = false;  // rescale selected gates to sum to 1

  static RouterState init(std::size_t experts, std::size_t width, Rng& rng);
  std::size_t experts() const { return w.rows(); }
  void validate() const;

  template <class F>
  void for_each(F&& fn) {
    fn(std::string_view("w"), w);
    fn(std::string_view("b"), b);
  }
};

struct GateMatrix {
  Mat probs;   // (T × M'), rows sum to 1
  Mat logits;  // (W·F' + b) / temperature
};

struct ExpertChoice {
  std::size_t expert = 0;
  double gate = 0.0;
};

// Per token, the chosen experts in descending gate order.
using Selection = std::vector<std::vector<ExpertChoice>>;

struct Route {
  std::size_t expert = 0;
  double gate = 0.0;
  double weight = 0.0;  // combination weight (gate, or gate / Σ selected gates)
  bool admitted = false;
};

struct DispatchPlan {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::size_t top_k = 0;
  std::size_t capacity = 0;
  bool renormalized = false;
  std::vector<std::vector<Route>> routes;                    // per token
  std::vector<std::vector<std::size_t>> admitted;            // per expert, ascending token
  std::vector<std::pair<std::size_t, std::size_t>> overflow;  // (token, expert)

  std::size_t overflow_count() const { return overflow.size(); }
};

GateMatrix gate(const Mat& features, const RouterState& state);

// K largest gates per row; ties go to the lower expert index.
Selection topk_select(const GateMatrix& gates, std::size_t k);

// ceil(f·T·K / M')
std::size_t expert_capacity(std::size_t tokens, std::size_t top_k, std::size_t experts,
                            double capacity_factor);

// Admits tokens to each expert in ascending token order until the expert is
// full; the rest are recorded as overflow.
DispatchPlan build_dispatch(const Selection& selection, std::size_t tokens, std::size_t experts,
                            std::size_t top_k, double capacity_factor, bool renormalize = false);

// Rebuilds a plan with fresh gate values but the routing decisions (which
// experts, which admitted) of `frozen`. Used to differentiate the forward
// pass with discrete choices held constant.
DispatchPlan replan_with_gates(const DispatchPlan& frozen, const GateMatrix& gates);

struct RouterGrads {
  Mat w;
  Mat b;
  Mat features;
  Mat gates;  // total d/dg that was pushed through the softmax
};

// Converts per-route weight gradients to gate gradients, accounting for
// renormalization when the plan uses it. Only admitted routes carry signal.
Mat route_grads_to_gate_grads(const DispatchPlan& plan,
                              const std::vector<std::vector<double>>& route_weight_grads);

// Backward through softmax and the linear map. `gate_grad` is the total
// d/dg (T × M'); `logit_grad` optionally adds d/d(scaled logits) directly.
RouterGrads router_backward(const Mat& gate_grad, const Mat* logit_grad, const GateMatrix& gates,
                            const Mat& features, const RouterState& state);

}  // namespace come
