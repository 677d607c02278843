#include "come/experts.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "come/router.hpp"

namespace come {

namespace {

Mat uniform_mat(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Mat m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(-bound, bound);
  return m;
}

std::size_t route_index(const DispatchPlan& plan, std::size_t token, std::size_t expert) {
  const auto& routes = plan.routes[token];
  for (std::size_t r = 0; r < routes.size(); ++r)
    if (routes[r].expert == expert) return r;
  throw std::logic_error("dispatch plan admits token " + std::to_string(token) + " to expert " +
                         std::to_string(expert) + " without a route");
}

void check_plan(const ExpertBank& bank, const DispatchPlan& plan, const Mat& features) {
  if (plan.experts != bank.size()) {
    throw std::invalid_argument("expert_forward: plan covers " + std::to_string(plan.experts) +
                                " experts but the bank has " + std::to_string(bank.size()));
  }
  if (plan.tokens != features.rows() || plan.routes.size() != plan.tokens) {
    throw std::invalid_argument("expert_forward: plan covers " + std::to_string(plan.tokens) +
                                " tokens but features have " + std::to_string(features.rows()));
  }
}

}  // namespace

std::string_view to_string(SharedKind kind) {
  return kind == SharedKind::structure ? "structure" : "semantic";
}

FrozenSharedExpert::FrozenSharedExpert(SharedKind kind, std::size_t width, std::uint64_t seed)
    : kind_(kind), width_(width), seed_(seed) {
  if (width == 0) {
    throw std::invalid_argument("FrozenSharedExpert: width must be positive");
  }
  Rng rng(seed);
  weight_ = uniform_mat(width, width, std::sqrt(3.0 / static_cast<double>(width)), rng);
  bias_ = uniform_mat(1, width, 0.1, rng);
}

Mat FrozenSharedExpert::forward(const Mat& x) const {
  if (x.cols() != width_) {
    throw std::invalid_argument("FrozenSharedExpert: input width " + std::to_string(x.cols()) +
                                " does not match " + std::to_string(width_));
  }
  Mat out = linear(x, weight_, bias_);
  for (double& v : out.values()) v = std::tanh(v);
  return out;
}

Mat FrozenSharedExpert::backward_input(const Mat& output, const Mat& upstream) const {
  if (!output.same_shape(upstream) || output.cols() != width_) {
    throw std::invalid_argument("FrozenSharedExpert: gradient shape mismatch");
  }
  Mat pre = upstream;
  auto p = pre.values();
  const auto o = output.values();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] *= 1.0 - o[i] * o[i];
  return matmul(pre, weight_);
}

std::string FrozenSharedExpert::digest() const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const Mat* m : {&weight_, &bias_}) {
    const auto v = m->values();
    EVP_DigestUpdate(ctx, v.data(), v.size() * sizeof(double));
  }
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, out, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", out[i]);
    hex += buf;
  }
  return hex;
}

// ---------------------------------------------------------------------------

Ffn Ffn::init(std::size_t width, std::size_t hidden, Rng& rng) {
  Ffn f;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(width));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  f.w1 = uniform_mat(hidden, width, b1, rng);
  f.b1 = uniform_mat(1, hidden, b1, rng);
  f.w2 = uniform_mat(width, hidden, b2, rng);
  f.b2 = uniform_mat(1, width, b2, rng);
  return f;
}

Ffn Ffn::zeros(std::size_t width, std::size_t hidden) {
  return Ffn{Mat(hidden, width), Mat(1, hidden), Mat(width, hidden), Mat(1, width)};
}

Mat ffn_forward(const Ffn& ffn, const Mat& x, FfnCache* cache) {
  if (x.cols() != ffn.width()) {
    throw std::invalid_argument("ffn_forward: input width mismatch");
  }
  Mat act = linear(x, ffn.w1, ffn.b1);
  for (double& v : act.values()) v = std::tanh(v);
  Mat out = linear(act, ffn.w2, ffn.b2);
  if (cache != nullptr) {
    cache->input = x;
    cache->activation = std::move(act);
  }
  return out;
}

Mat ffn_backward(const Ffn& ffn, const FfnCache& cache, const Mat& upstream, Ffn& grads) {
  add_inplace(grads.w2, matmul_tn(upstream, cache.activation));
  add_inplace(grads.b2, column_sums(upstream));
  Mat d_hidden = matmul(upstream, ffn.w2);
  auto dh = d_hidden.values();
  const auto a = cache.activation.values();
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= 1.0 - a[i] * a[i];
  add_inplace(grads.w1, matmul_tn(d_hidden, cache.input));
  add_inplace(grads.b1, column_sums(d_hidden));
  return matmul(d_hidden, ffn.w1);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> expert_groups(std::size_t experts, std::size_t sources) {
  if (sources == 0) {
    throw std::invalid_argument("expert_groups: at least one source is required");
  }
  const std::size_t per = experts / sources;
  std::vector<std::vector<std::size_t>> groups(sources);
  for (std::size_t m = 0; m < sources; ++m)
    for (std::size_t i = 0; i < per; ++i) groups[m].push_back(m * per + i);
  return groups;
}

ExpertBank::ExpertBank(std::size_t experts, std::size_t sources, std::size_t width,
                       std::size_t hidden, Rng& rng)
    : groups_(expert_groups(experts, sources)) {
  if (experts == 0) {
    throw std::invalid_argument("ExpertBank: at least one expert is required");
  }
  experts_.reserve(experts);
  for (std::size_t j = 0; j < experts; ++j) experts_.push_back(Ffn::init(width, hidden, rng));
}

ExpertBank::ExpertBank(std::vector<SourceExpert> experts, std::size_t sources)
    : experts_(std::move(experts)), groups_(expert_groups(experts_.size(), sources)) {
  if (experts_.empty()) {
    throw std::invalid_argument("ExpertBank: at least one expert is required");
  }
}

ExpertBank ExpertBank::zeros_like() const {
  ExpertBank out;
  out.groups_ = groups_;
  for (const SourceExpert& e : experts_) out.experts_.push_back(Ffn::zeros(e.width(), e.hidden()));
  return out;
}

std::optional<std::size_t> ExpertBank::owner(std::size_t expert) const {
  for (std::size_t m = 0; m < groups_.size(); ++m)
    for (std::size_t j : groups_[m])
      if (j == expert) return m;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

DrParams DrParams::identity(std::size_t width) {
  DrParams p = zeros(width);
  for (std::size_t i = 0; i < width; ++i) p.w(i, i) = 1.0;
  return p;
}

DrParams DrParams::zeros(std::size_t width) { return DrParams{Mat(width, 2 * width), Mat(1, width)}; }

Mat dr_project(const Mat& attended, const Mat& cluster_features, const DrParams& params) {
  if (cluster_features.rows() != attended.rows()) {
    throw std::invalid_argument("dr_project: " + std::to_string(attended.rows()) +
                                " tokens but only " + std::to_string(cluster_features.rows()) +
                                " have a cluster feature");
  }
  return linear(hconcat(attended, cluster_features), params.w, params.b);
}

DrGrads dr_backward(const Mat& attended, const Mat& cluster_features, const DrParams& params,
                    const Mat& upstream) {
  const std::size_t width = attended.cols();
  DrGrads g{DrParams{matmul_tn(upstream, hconcat(attended, cluster_features)),
                     column_sums(upstream)},
            Mat(attended.rows(), width)};
  for (std::size_t t = 0; t < upstream.rows(); ++t) {
    const auto up = upstream.row(t);
    auto dst = g.attended.row(t);
    for (std::size_t o = 0; o < up.size(); ++o) {
      const double u = up[o];
      if (u == 0.0) continue;
      const auto wr = params.w.row(o);
      for (std::size_t i = 0; i < width; ++i) dst[i] += u * wr[i];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

Mat expert_forward(const ExpertBank& bank, const DispatchPlan& plan, const Mat& features,
                   ExpertCache* cache) {
  check_plan(bank, plan, features);
  Mat out(features.rows(), features.cols());
  if (cache != nullptr) {
    cache->caches.assign(bank.size(), FfnCache{});
    cache->outputs.assign(bank.size(), Mat());
  }
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const auto& tokens = plan.admitted[j];
    if (tokens.empty()) continue;
    FfnCache local;
    Mat y = ffn_forward(bank.experts()[j], gather_rows(features, tokens), &local);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t t = tokens[i];
      const double w = plan.routes[t][route_index(plan, t, j)].weight;
      auto dst = out.row(t);
      const auto src = y.row(i);
      for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += w * src[d];
    }
    if (cache != nullptr) {
      cache->caches[j] = std::move(local);
      cache->outputs[j] = std::move(y);
    }
  }
  return out;
}

ExpertGrads expert_backward(const ExpertBank& bank, const DispatchPlan& plan,
                            const ExpertCache& cache, const Mat& upstream) {
  if (cache.caches.size() != bank.size()) {
    throw std::logic_error("expert_backward: no cached forward pass");
  }
  ExpertGrads g;
  g.features = Mat(upstream.rows(), upstream.cols());
  g.route_weight.resize(plan.tokens);
  for (std::size_t t = 0; t < plan.tokens; ++t) g.route_weight[t].assign(plan.routes[t].size(), 0.0);
  g.experts.reserve(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) {
    const Ffn& expert = bank.experts()[j];
    g.experts.push_back(Ffn::zeros(expert.width(), expert.hidden()));
    const auto& tokens = plan.admitted[j];
    if (tokens.empty()) continue;
    const Mat& y = cache.outputs[j];
    Mat dy(tokens.size(), upstream.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t t = tokens[i];
      const std::size_t r = route_index(plan, t, j);
      const double w = plan.routes[t][r].weight;
      const auto up = upstream.row(t);
      const auto yr = y.row(i);
      auto d = dy.row(i);
      double dot = 0.0;
      for (std::size_t k = 0; k < up.size(); ++k) {
        d[k] = w * up[k];
        dot += up[k] * yr[k];
      }
      g.route_weight[t][r] = dot;
    }
    const Mat dx = ffn_backward(expert, cache.caches[j], dy, g.experts[j]);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto dst = g.features.row(tokens[i]);
      const auto src = dx.row(i);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  return g;
}

Mat come_aggregate(const Mat& structure, const Mat& semantic, const Mat& source_specific) {
  if (!structure.same_shape(semantic) || !structure.same_shape(source_specific)) {
    throw std::invalid_argument("come_aggregate: shape mismatch " + structure.shape_str() + ", " +
                                semantic.shape_str() + ", " + source_specific.shape_str());
  }
  Mat out = structure;
  add_inplace(out, semantic);
  add_inplace(out, source_specific);
  return out;
}

}  // namespace come
