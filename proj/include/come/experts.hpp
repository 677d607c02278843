#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "come/numerics.hpp"

namespace come {

struct DispatchPlan;

enum class SharedKind { structure, semantic };

std::string_view to_string(SharedKind kind);

// Fixed tanh(x·Aᵀ + c) feature extractor standing in for a pretrained,
// frozen backbone. Parameters are generated from `seed` at construction and
// exposed read-only; there is no way to obtain gradients for them.
class FrozenSharedExpert {
 public:
  FrozenSharedExpert(SharedKind kind, std::size_t width, std::uint64_t seed);

  SharedKind kind() const { return kind_; }
  std::size_t width() const { return width_; }
  std::uint64_t seed() const { return seed_; }
  const Mat& weight() const { return weight_; }
  const Mat& bias() const { return bias_; }

  Mat forward(const Mat& x) const;
  // Gradient w.r.t. the input, given the forward output.
  Mat backward_input(const Mat& output, const Mat& upstream) const;

  // SHA-256 over the parameter bytes, hex encoded.
  std::string digest() const;

 private:
  SharedKind kind_;
  std::size_t width_;
  std::uint64_t seed_;
  Mat weight_;
  Mat bias_;
};

// Two-layer tanh FFN: W2·tanh(W1·x + b1) + b2.
struct Ffn {
  Mat w1, b1, w2, b2;

  static Ffn init(std::size_t width, std::size_t hidden, Rng& rng);
  static Ffn zeros(std::size_t width, std::size_t hidden);
  std::size_t width() const { return w1.cols(); }
  std::size_t hidden() const { return w1.rows(); }
  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  template <class F>
  void for_each(F&& fn) {
    fn(std::string_view("w1"), w1);
    fn(std::string_view("b1"), b1);
    fn(std::string_view("w2"), w2);
    fn(std::string_view("b2"), b2);
  }
};

struct FfnCache {
  Mat input;
  Mat activation;  // tanh(hidden pre-activation)
};

Mat ffn_forward(const Ffn& ffn, const Mat& x, FfnCache* cache = nullptr);
// Accumulates parameter gradients into `grads` and returns d/dx.
Mat ffn_backward(const Ffn& ffn, const FfnCache& cache, const Mat& upstream, Ffn& grads);

using SourceExpert = Ffn;

// M' source experts; source m owns experts [m·g, (m+1)·g) with g = ⌊M'/M⌋.
// The M' mod M remainder experts belong to no source.
class ExpertBank {
 public:
  ExpertBank() = default;
  ExpertBank(std::size_t experts, std::size_t sources, std::size_t width, std::size_t hidden,
             Rng& rng);
  ExpertBank(std::vector<SourceExpert> experts, std::size_t sources);

  // Same shapes and groups, all parameters zero (gradient accumulator).
  ExpertBank zeros_like() const;

  std::vector<SourceExpert>& experts() { return experts_; }
  const std::vector<SourceExpert>& experts() const { return experts_; }
  std::size_t size() const { return experts_.size(); }
  std::size_t sources() const { return groups_.size(); }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
  std::optional<std::size_t> owner(std::size_t expert) const;

 private:
  std::vector<SourceExpert> experts_;
  std::vector<std::vector<std::size_t>> groups_;
};

std::vector<std::vector<std::size_t>> expert_groups(std::size_t experts, std::size_t sources);

// Dimension reduction of [attended | cluster feature] back to width D.
struct DrParams {
  Mat w;  // (D × 2D)
  Mat b;  // (1 × D)

  // Token block = identity, cluster block = zeros, bias = zero.
  static DrParams identity(std::size_t width);
  static DrParams zeros(std::size_t width);

  template <class F>
  void for_each(F&& fn) {
    fn(std::string_view("w"), w);
    fn(std::string_view("b"), b);
  }
};

Mat dr_project(const Mat& attended, const Mat& cluster_features, const DrParams& params);

struct DrGrads {
  DrParams params;
  Mat attended;  // the cluster branch is a constant and receives nothing
};

DrGrads dr_backward(const Mat& attended, const Mat& cluster_features, const DrParams& params,
                    const Mat& upstream);

struct ExpertCache {
  // caches[j] covers the admitted tokens of expert j, in plan order.
  std::vector<FfnCache> caches;
  std::vector<Mat> outputs;
};

// Per token: Σ over admitted routes of weight · E_j(F'). Routes dropped by
// capacity contribute nothing. Contributions are summed in expert order.
Mat expert_forward(const ExpertBank& bank, const DispatchPlan& plan, const Mat& features,
                   ExpertCache* cache = nullptr);

struct ExpertGrads {
  std::vector<Ffn> experts;
  Mat features;
  // route_weight[t][r] is d/d(weight) of the r-th route of token t.
  std::vector<std::vector<double>> route_weight;
};

ExpertGrads expert_backward(const ExpertBank& bank, const DispatchPlan& plan,
                            const ExpertCache& cache, const Mat& upstream);

// F^E = f_st + f_se + f_s2, elementwise.
Mat come_aggregate(const Mat& structure, const Mat& semantic, const Mat& source_specific);

}  // namespace come
