#include "come/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace come {

LossTerm traceability_loss(const Mat& gates, std::span<const std::uint32_t> sources,
                           const std::vector<std::vector<std::size_t>>& groups, bool average) {
  if (sources.size() != gates.rows()) {
    throw std::invalid_argument("traceability_loss: " + std::to_string(sources.size()) +
                                " source ids for " + std::to_string(gates.rows()) + " tokens");
  }
  LossTerm out;
  out.grad = Mat(gates.rows(), gates.cols());
  if (gates.rows() == 0) return out;
  const double scale = average ? 1.0 / static_cast<double>(gates.rows()) : 1.0;
  for (std::size_t t = 0; t < gates.rows(); ++t) {
    const std::uint32_t src = sources[t];
    if (src >= groups.size() || groups[src].empty()) {
      throw std::invalid_argument("traceability_loss: source " + std::to_string(src) +
                                  " owns no experts");
    }
    double mass = 0.0;
    for (std::size_t j : groups[src]) mass += gates(t, j);
    if (mass < kGroupMassFloor) {
      ++out.clamped;
      out.value -= scale * std::log(kGroupMassFloor);
      continue;
    }
    out.value -= scale * std::log(mass);
    for (std::size_t j : groups[src]) out.grad(t, j) = -scale / mass;
  }
  return out;
}

LossTerm importance_loss(const Mat& gates, std::vector<double>* importance) {
  if (gates.rows() == 0) {
    throw std::invalid_argument("importance_loss: empty gate matrix");
  }
  const Mat sums = column_sums(gates);
  const auto ip = sums.values();
  LossTerm out;
  out.value = cv_squared(ip);
  const std::vector<double> d = cv_squared_grad(ip);
  out.grad = Mat(gates.rows(), gates.cols());
  for (std::size_t t = 0; t < gates.rows(); ++t)
    for (std::size_t j = 0; j < gates.cols(); ++j) out.grad(t, j) = d[j];
  if (importance != nullptr) importance->assign(ip.begin(), ip.end());
  return out;
}

LossTerm load_loss(const Mat& gates, std::vector<double>* load) {
  if (gates.rows() == 0) {
    throw std::invalid_argument("load_loss: empty gate matrix");
  }
  std::vector<double> l(gates.cols(), 0.0);
  for (std::size_t t = 0; t < gates.rows(); ++t)
    for (std::size_t j = 0; j < gates.cols(); ++j) l[j] += normal_cdf(gates(t, j));
  LossTerm out;
  out.value = cv_squared(l);
  const std::vector<double> d = cv_squared_grad(l);
  out.grad = Mat(gates.rows(), gates.cols());
  for (std::size_t t = 0; t < gates.rows(); ++t)
    for (std::size_t j = 0; j < gates.cols(); ++j)
      out.grad(t, j) = d[j] * normal_pdf(gates(t, j));
  if (load != nullptr) *load = std::move(l);
  return out;
}

LossTerm load_loss_margin(const Mat& logits, std::size_t top_k, std::vector<double>* load) {
  const std::size_t experts = logits.cols();
  if (logits.rows() == 0) {
    throw std::invalid_argument("load_loss_margin: empty logit matrix");
  }
  if (top_k == 0 || top_k > experts) {
    throw std::invalid_argument("load_loss_margin: top_k out of range");
  }
  // threshold[t][j]: expert whose logit is the k-th largest among the others,
  // or npos when fewer than k other experts exist.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> threshold(logits.rows() * experts, npos);
  std::vector<std::size_t> order(experts);
  std::vector<double> l(experts, 0.0);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits(t, a) > logits(t, b); });
    std::vector<std::size_t> rank(experts);
    for (std::size_t r = 0; r < experts; ++r) rank[order[r]] = r;
    for (std::size_t j = 0; j < experts; ++j) {
      const std::size_t pos = rank[j] < top_k ? top_k : top_k - 1;
      if (pos >= experts) {
        l[j] += 1.0;
        continue;
      }
      const std::size_t thr = order[pos];
      threshold[t * experts + j] = thr;
      l[j] += normal_cdf(logits(t, j) - logits(t, thr));
    }
  }
  LossTerm out;
  out.value = cv_squared(l);
  const std::vector<double> d = cv_squared_grad(l);
  out.grad = Mat(logits.rows(), experts);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    for (std::size_t j = 0; j < experts; ++j) {
      const std::size_t thr = threshold[t * experts + j];
      if (thr == npos) continue;
      const double s = d[j] * normal_pdf(logits(t, j) - logits(t, thr));
      out.grad(t, j) += s;
      out.grad(t, thr) -= s;
    }
  }
  if (load != nullptr) *load = std::move(l);
  return out;
}

LossTerm task_loss(const Mat& logits, std::span<const std::uint32_t> labels) {
  if (labels.size() != logits.rows() || logits.rows() == 0) {
    throw std::invalid_argument("task_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(logits.rows()) + " samples");
  }
  LossTerm out;
  out.grad = Mat(logits.rows(), logits.cols());
  const double scale = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] >= logits.cols()) {
      throw std::invalid_argument("task_loss: label " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(logits.cols()) +
                                  " classes");
    }
    const auto row = logits.row(i);
    const double shift = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double z : row) total += std::exp(z - shift);
    const double log_norm = shift + std::log(total);
    out.value += scale * (log_norm - row[labels[i]]);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double p = std::exp(row[c] - log_norm);
      out.grad(i, c) = scale * (p - (c == labels[i] ? 1.0 : 0.0));
    }
  }
  return out;
}

LossReport total_loss(double task_ce, double l_tb, double l_ip, double l_load,
                      const LossWeights& weights) {
  LossReport r;
  r.task_ce = task_ce;
  r.l_tb = l_tb;
  r.l_ip = l_ip;
  r.l_load = l_load;
  r.l_balance = l_ip + l_load;
  r.total = task_ce + weights.traceability * l_tb + weights.balance * r.l_balance;
  return r;
}

}  // namespace come
