#include "come/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace come {

RouterState RouterState::init(std::size_t experts, std::size_t width, Rng& rng) {
  RouterState s;
  s.w = Mat(experts, width);
  s.b = Mat(1, experts);
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& v : s.w.values()) v = rng.uniform(-bound, bound);
  return s;
}

void RouterState::validate() const {
  if (w.rows() == 0 || b.rows() != 1 || b.cols() != w.rows()) {
    throw std::invalid_argument("RouterState: gate weight " + w.shape_str() + " and bias " +
                                b.shape_str() + " are inconsistent");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("RouterState: temperature must be positive");
  }
  if (top_k == 0 || top_k > w.rows()) {
    throw std::invalid_argument("RouterState: top_k must lie in [1, " + std::to_string(w.rows()) +
                                "]");
  }
  if (!(capacity_factor > 0.0)) {
    throw std::invalid_argument("RouterState: capacity factor must be positive");
  }
}

GateMatrix gate(const Mat& features, const RouterState& state) {
  state.validate();
  if (features.cols() != state.w.cols()) {
    throw std::invalid_argument("gate: feature width " + std::to_string(features.cols()) +
                                " does not match router width " + std::to_string(state.w.cols()));
  }
  GateMatrix g;
  g.logits = linear(features, state.w, state.b);
  if (state.temperature != 1.0) {
    for (double& v : g.logits.values()) v /= state.temperature;
  }
  if (!all_finite(g.logits)) {
    throw std::invalid_argument("gate: non-finite router logits");
  }
  g.probs = g.logits;
  softmax_rows_inplace(g.probs);
  return g;
}

Selection topk_select(const GateMatrix& gates, std::size_t k) {
  const Mat& p = gates.probs;
  if (k == 0 || k > p.cols()) {
    throw std::invalid_argument("topk_select: k must lie in [1, " + std::to_string(p.cols()) + "]");
  }
  Selection sel(p.rows());
  std::vector<std::size_t> order(p.cols());
  for (std::size_t t = 0; t < p.rows(); ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (p(t, a) != p(t, b)) return p(t, a) > p(t, b);
                        return a < b;
                      });
    sel[t].reserve(k);
    for (std::size_t i = 0; i < k; ++i) sel[t].push_back({order[i], p(t, order[i])});
  }
  return sel;
}

std::size_t expert_capacity(std::size_t tokens, std::size_t top_k, std::size_t experts,
                            double capacity_factor) {
  if (!(capacity_factor > 0.0)) {
    throw std::invalid_argument("expert_capacity: capacity factor must be positive");
  }
  if (experts == 0) {
    throw std::invalid_argument("expert_capacity: no experts");
  }
  const double raw = capacity_factor * static_cast<double>(tokens) * static_cast<double>(top_k) /
                     static_cast<double>(experts);
  return static_cast<std::size_t>(std::ceil(raw));
}

namespace {

void assign_weights(std::vector<Route>& routes, bool renormalize) {
  double total = 0.0;
  for (const Route& r : routes) total += r.gate;
  for (Route& r : routes) r.weight = renormalize ? r.gate / total : r.gate;
}

}  // namespace

DispatchPlan build_dispatch(const Selection& selection, std::size_t tokens, std::size_t experts,
                            std::size_t top_k, double capacity_factor, bool renormalize) {
  if (selection.size() != tokens) {
    throw std::invalid_argument("build_dispatch: selection covers " +
                                std::to_string(selection.size()) + " tokens, expected " +
                                std::to_string(tokens));
  }
  DispatchPlan plan;
  plan.tokens = tokens;
  plan.experts = experts;
  plan.top_k = top_k;
  plan.capacity = expert_capacity(tokens, top_k, experts, capacity_factor);
  plan.renormalized = renormalize;
  plan.routes.resize(tokens);
  plan.admitted.resize(experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    if (selection[t].size() != top_k) {
      throw std::invalid_argument("build_dispatch: token " + std::to_string(t) + " selects " +
                                  std::to_string(selection[t].size()) + " experts, expected " +
                                  std::to_string(top_k));
    }
    for (const ExpertChoice& c : selection[t]) {
      if (c.expert >= experts) {
        throw std::invalid_argument("build_dispatch: expert index out of range");
      }
      Route r{c.expert, c.gate, c.gate, false};
      auto& queue = plan.admitted[c.expert];
      if (queue.size() < plan.capacity) {
        queue.push_back(t);
        r.admitted = true;
      } else {
        plan.overflow.emplace_back(t, c.expert);
      }
      plan.routes[t].push_back(r);
    }
    assign_weights(plan.routes[t], renormalize);
  }
  return plan;
}

DispatchPlan replan_with_gates(const DispatchPlan& frozen, const GateMatrix& gates) {
  if (gates.probs.rows() != frozen.tokens || gates.probs.cols() != frozen.experts) {
    throw std::invalid_argument("replan_with_gates: gate matrix does not match the plan");
  }
  DispatchPlan plan = frozen;
  for (std::size_t t = 0; t < plan.tokens; ++t) {
    for (Route& r : plan.routes[t]) r.gate = gates.probs(t, r.expert);
    assign_weights(plan.routes[t], plan.renormalized);
  }
  return plan;
}

Mat route_grads_to_gate_grads(const DispatchPlan& plan,
                              const std::vector<std::vector<double>>& route_weight_grads) {
  if (route_weight_grads.size() != plan.tokens) {
    throw std::invalid_argument("route_grads_to_gate_grads: token count mismatch");
  }
  Mat dg(plan.tokens, plan.experts);
  for (std::size_t t = 0; t < plan.tokens; ++t) {
    const auto& routes = plan.routes[t];
    const auto& dw = route_weight_grads[t];
    if (dw.size() != routes.size()) {
      throw std::invalid_argument("route_grads_to_gate_grads: route count mismatch");
    }
    if (!plan.renormalized) {
      for (std::size_t r = 0; r < routes.size(); ++r)
        if (routes[r].admitted) dg(t, routes[r].expert) += dw[r];
      continue;
    }
    // w_r = g_r / S with S = Σ selected gates.
    double total = 0.0;
    for (const Route& r : routes) total += r.gate;
    double mixed = 0.0;
    for (std::size_t r = 0; r < routes.size(); ++r)
      if (routes[r].admitted) mixed += dw[r] * routes[r].gate;
    for (std::size_t r = 0; r < routes.size(); ++r) {
      double g = -mixed / (total * total);
      if (routes[r].admitted) g += dw[r] / total;
      dg(t, routes[r].expert) += g;
    }
  }
  return dg;
}

RouterGrads router_backward(const Mat& gate_grad, const Mat* logit_grad, const GateMatrix& gates,
                            const Mat& features, const RouterState& state) {
  const Mat& p = gates.probs;
  if (!gate_grad.same_shape(p) || features.rows() != p.rows()) {
    throw std::invalid_argument("router_backward: cached gates do not match the gradient");
  }
  if (logit_grad != nullptr && !logit_grad->same_shape(p)) {
    throw std::invalid_argument("router_backward: logit gradient shape mismatch");
  }
  Mat dz(p.rows(), p.cols());
  for (std::size_t t = 0; t < p.rows(); ++t) {
    double inner = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) inner += p(t, j) * gate_grad(t, j);
    for (std::size_t j = 0; j < p.cols(); ++j) {
      double v = p(t, j) * (gate_grad(t, j) - inner);
      if (logit_grad != nullptr) v += (*logit_grad)(t, j);
      dz(t, j) = v / state.temperature;
    }
  }
  RouterGrads g;
  g.w = matmul_tn(dz, features);
  g.b = column_sums(dz);
  g.features = matmul(dz, state.w);
  g.gates = gate_grad;
  return g;
}

}  // namespace come
