#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "come/numerics.hpp"

namespace come {

// A scalar loss and its gradient with respect to the loss input.
struct LossTerm {
  double value = 0.0;
  Mat grad;
  std::size_t clamped = 0;  // tokens whose group mass hit the clamp floor
};

inline constexpr double kGroupMassFloor = 1e-12;

// Per token −log(Σ_{j ∈ group(source)} g_j), averaged over tokens when
// `average` is set (otherwise summed).
LossTerm traceability_loss(const Mat& gates, std::span<const std::uint32_t> sources,
                           const std::vector<std::vector<std::size_t>>& groups,
                           bool average = true);

// CV² of per-expert gate mass IP_j = Σ_t g_tj.
LossTerm importance_loss(const Mat& gates, std::vector<double>* importance = nullptr);

// CV² of L_j = Σ_t Φ(g_tj), with Φ the standard normal CDF.
LossTerm load_loss(const Mat& gates, std::vector<double>* load = nullptr);

// Margin form: L_j = Σ_t Φ(z_tj − z_t,thr(j)) where z are scaled router
// logits and thr(j) is the k-th largest logit among the other experts.
// The gradient is with respect to the logits.
LossTerm load_loss_margin(const Mat& logits, std::size_t top_k, std::vector<double>* load = nullptr);

// Mean softmax cross-entropy; gradient with respect to the logits.
LossTerm task_loss(const Mat& logits, std::span<const std::uint32_t> labels);

struct LossWeights {
  double traceability = 1.0;
  double balance = 0.1;
};

struct LossReport {
  double task_ce = 0.0;
  double l_tb = 0.0;
  double l_ip = 0.0;
  double l_load = 0.0;
  double l_balance = 0.0;
  double total = 0.0;
  std::vector<double> importance;
  std::vector<double> load;
  std::size_t clamped = 0;
};

// total = task + w_tb·l_tb + w_bal·(l_ip + l_load)
LossReport total_loss(double task_ce, double l_tb, double l_ip, double l_load,
                      const LossWeights& weights);

}  // namespace come
