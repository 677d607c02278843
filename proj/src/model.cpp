#include "come/model.hpp"

#include <cmath>
#include <stdexcept>

namespace come {

std::string_view to_string(ClusterStrategy s) {
  switch (s) {
    case ClusterStrategy::fine2coarse: return "fine2coarse";
    case ClusterStrategy::multistep: return "multistep";
    case ClusterStrategy::none: return "none";
  }
  return "?";
}

std::string_view to_string(LoadVariant v) { return v == LoadVariant::literal ? "literal" : "margin"; }

std::string_view to_string(ModelKind k) { return k == ModelKind::come ? "come" : "dense"; }

ClusterStrategy parse_cluster_strategy(std::string_view s) {
  if (s == "fine2coarse") return ClusterStrategy::fine2coarse;
  if (s == "multistep") return ClusterStrategy::multistep;
  if (s == "none") return ClusterStrategy::none;
  throw std::invalid_argument("unknown clustering strategy '" + std::string(s) + "'");
}

LoadVariant parse_load_variant(std::string_view s) {
  if (s == "literal") return LoadVariant::literal;
  if (s == "margin") return LoadVariant::margin;
  throw std::invalid_argument("unknown load variant '" + std::string(s) + "'");
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "come") return ModelKind::come;
  if (s == "dense") return ModelKind::dense;
  throw std::invalid_argument("unknown model kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw std::invalid_argument("model: width must be a positive multiple of heads");
  }
  if (classes < 2 || sources == 0) {
    throw std::invalid_argument("model: need at least 2 classes and 1 source");
  }
  if (kind == ModelKind::dense || !use_s2e) return;
  if (experts == 0 || top_k == 0 || top_k > experts) {
    throw std::invalid_argument("model: top_k must lie in [1, experts]");
  }
  if (!(capacity_factor > 0.0)) {
    throw std::invalid_argument("model: capacity factor must be positive");
  }
  if (!(gate_temperature > 0.0)) {
    throw std::invalid_argument("model: gate temperature must be positive");
  }
  if (traceability_weight != 0.0 && experts < sources) {
    throw std::invalid_argument("model: traceability loss needs at least one expert per source (" +
                                std::to_string(experts) + " experts, " + std::to_string(sources) +
                                " sources)");
  }
  if (clustering == ClusterStrategy::fine2coarse &&
      (coarse_centers == 0 || fine_centers <= coarse_centers)) {
    throw std::invalid_argument("model: fine2coarse needs fine_centers > coarse_centers >= 1");
  }
  if (clustering == ClusterStrategy::multistep &&
      (multistep_k == 0 || multistep_steps == 0 || multistep_iters == 0 ||
       !(suppress_fraction >= 0.0 && suppress_fraction < 1.0))) {
    throw std::invalid_argument("model: invalid multistep settings");
  }
  if (lloyd_iters == 0) {
    throw std::invalid_argument("model: lloyd_iters must be at least 1");
  }
}

std::size_t come_active_parameters(const ModelConfig& c) {
  const std::size_t d = c.width;
  const std::size_t h = c.hidden();
  std::size_t total = 0;
  if (c.use_ste) total += d * d + d;
  if (c.use_see) total += d * d + d;
  if (c.use_s2e) {
    total += c.top_k * (2 * d * h + h + d);
    total += c.experts * d + c.experts;
    total += 2 * d * d + d;
  }
  return total;
}

std::size_t matched_dense_hidden(const ModelConfig& config) {
  const std::size_t d = config.width;
  const std::size_t active = come_active_parameters(config);
  if (active <= d) return 1;
  return (active - d + 2 * d) / (2 * d + 1);
}

// ---------------------------------------------------------------------------

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  z.attention = MhaParams::zeros(attention.width, attention.heads);
  if (!dr.w.empty()) z.dr = DrParams::zeros(dr.b.cols());
  if (!router.w.empty()) {
    z.router = router;
    z.router.w = Mat::zeros_like(router.w);
    z.router.b = Mat::zeros_like(router.b);
  }
  if (bank.size() != 0) z.bank = bank.zeros_like();
  if (!dense.w1.empty()) z.dense = Ffn::zeros(dense.width(), dense.hidden());
  z.head_w = Mat::zeros_like(head_w);
  z.head_b = Mat::zeros_like(head_b);
  return z;
}

std::vector<Mat*> ModelParams::pointers() {
  std::vector<Mat*> out;
  for_each([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

std::vector<std::string> ModelParams::names() {
  std::vector<std::string> out;
  for_each([&](const std::string& n, Mat&) { out.push_back(n); });
  return out;
}

// ---------------------------------------------------------------------------

namespace {

ModelParams init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng = Rng::stream(seed, RngStream::init);
  ModelParams p;
  p.attention = MhaParams::init(c.width, c.heads, rng);
  if (c.kind == ModelKind::come) {
    if (c.use_s2e) {
      p.dr = DrParams::identity(c.width);
      p.router = RouterState::init(c.experts, c.width, rng);
      p.bank = ExpertBank(c.experts, c.sources, c.width, c.hidden(), rng);
    }
  } else {
    const std::size_t hidden = c.dense_hidden == 0 ? matched_dense_hidden(c) : c.dense_hidden;
    p.dense = Ffn::init(c.width, hidden, rng);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.width));
  p.head_w = Mat(c.classes, c.width);
  for (double& v : p.head_w.values()) v = rng.uniform(-bound, bound);
  p.head_b = Mat(1, c.classes);
  return p;
}

void sync_router(RouterState& r, const ModelConfig& c) {
  r.temperature = c.gate_temperature;
  r.top_k = c.top_k;
  r.capacity_factor = c.capacity_factor;
  r.renormalize = c.renormalize_gates;
}

Mat mean_pool(const Mat& tokens, std::size_t segment) {
  const std::size_t samples = tokens.rows() / segment;
  Mat out(samples, tokens.cols());
  const double inv = 1.0 / static_cast<double>(segment);
  for (std::size_t s = 0; s < samples; ++s) {
    auto o = out.row(s);
    for (std::size_t t = 0; t < segment; ++t) {
      const auto r = tokens.row(s * segment + t);
      for (std::size_t d = 0; d < r.size(); ++d) o[d] += r[d];
    }
    for (double& v : o) v *= inv;
  }
  return out;
}

bool groups_cover(const std::vector<std::vector<std::size_t>>& groups,
                  std::span<const std::uint32_t> sources) {
  for (std::uint32_t s : sources)
    if (s >= groups.size() || groups[s].empty()) return false;
  return true;
}

}  // namespace

ComeModel::ComeModel(const ModelConfig& config, std::uint64_t init_seed)
    : ComeModel(config, init_params(config, init_seed)) {}

ComeModel::ComeModel(const ModelConfig& config, ModelParams params)
    : config_(config),
      params_(std::move(params)),
      ste_(SharedKind::structure, config.width, config.ste_seed),
      see_(SharedKind::semantic, config.width, config.see_seed),
      groups_(expert_groups(config.experts, config.sources)) {
  config_.validate();
  if (!params_.router.w.empty()) sync_router(params_.router, config_);
  if (params_.attention.width != config_.width || params_.head_w.rows() != config_.classes) {
    throw std::invalid_argument("ComeModel: parameters do not match the configuration");
  }
  if (config_.kind == ModelKind::come && config_.use_s2e &&
      (params_.bank.size() != config_.experts || params_.router.experts() != config_.experts)) {
    throw std::invalid_argument("ComeModel: expert count does not match the configuration");
  }
  if (params_.bank.size() != 0) params_.bank = ExpertBank(params_.bank.experts(), config_.sources);
}

std::size_t ComeModel::trainable_count() {
  std::size_t n = 0;
  params_.for_each([&](const std::string&, Mat& m) { n += m.size(); });
  return n;
}

ForwardPass ComeModel::forward(const TokenBatch& batch, std::span<const std::uint32_t> labels,
                               Rng& routing, const RoutingFreeze* freeze) const {
  const ModelConfig& c = config_;
  if (batch.width() != c.width) {
    throw std::invalid_argument("forward: token width " + std::to_string(batch.width()) +
                                " does not match model width " + std::to_string(c.width));
  }
  if (batch.sources.size() != batch.token_count()) {
    throw std::invalid_argument("forward: one source id per token is required");
  }
  const std::size_t segment = batch.tokens_per_sample;
  const std::size_t n = batch.token_count();

  ForwardPass f;
  f.batch = batch;
  f.labels.assign(labels.begin(), labels.end());
  f.attended = mha_forward(batch.tokens, segment, params_.attention, &f.attention);
  if (c.attention_residual) add_inplace(f.attended, batch.tokens);

  if (c.kind == ModelKind::dense) {
    f.aggregate = ffn_forward(params_.dense, f.attended, &f.dense_cache);
  } else {
    f.f_st = c.use_ste ? ste_.forward(f.attended) : Mat(n, c.width);
    f.f_se = c.use_see ? see_.forward(f.attended) : Mat(n, c.width);
    if (c.use_s2e) {
      if (freeze != nullptr) {
        f.cluster_features = freeze->cluster_features;
      } else {
        switch (c.clustering) {
          case ClusterStrategy::fine2coarse:
            f.clusters = fine2coarse(f.attended, c.fine_centers, c.coarse_centers, routing,
                                     c.lloyd_iters);
            f.cluster_features = cluster_features(*f.clusters);
            break;
          case ClusterStrategy::multistep: {
            MultiStepResult r = multistep(f.attended, c.multistep_k, c.multistep_steps,
                                          c.suppress_fraction, routing, c.multistep_iters);
            f.clusters = std::move(r.model);
            f.multistep = std::move(r.trace);
            f.cluster_features = cluster_features(*f.clusters);
            break;
          }
          case ClusterStrategy::none:
            f.cluster_features = Mat(n, c.width);
            break;
        }
      }
      f.routed_input = dr_project(f.attended, f.cluster_features, params_.dr);
      f.gates = gate(f.routed_input, params_.router);
      f.plan = freeze != nullptr ? replan_with_gates(freeze->plan, f.gates)
                                 : build_dispatch(topk_select(f.gates, c.top_k), n, c.experts,
                                                  c.top_k, c.capacity_factor, c.renormalize_gates);
      f.f_s2 = expert_forward(params_.bank, f.plan, f.routed_input, &f.expert_cache);

      if (groups_cover(groups_, batch.sources)) {
        f.tb = traceability_loss(f.gates.probs, batch.sources, groups_, c.average_traceability);
      } else if (c.traceability_weight != 0.0) {
        throw std::invalid_argument("forward: a source in the batch owns no experts");
      }
      f.ip = importance_loss(f.gates.probs, &f.loss.importance);
      f.load = c.load == LoadVariant::literal
                   ? load_loss(f.gates.probs, &f.loss.load)
                   : load_loss_margin(f.gates.logits, c.top_k, &f.loss.load);
    } else {
      f.f_s2 = Mat(n, c.width);
    }
    f.aggregate = come_aggregate(f.f_st, f.f_se, f.f_s2);
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < c.width; ++d)
        residual = std::max(residual, std::abs(f.aggregate(i, d) - f.f_st(i, d) - f.f_se(i, d) -
                                               f.f_s2(i, d)));
    f.aggregate_residual = residual;
  }

  f.pooled = mean_pool(f.aggregate, segment);
  f.logits = linear(f.pooled, params_.head_w, params_.head_b);
  if (!f.labels.empty()) f.ce = task_loss(f.logits, f.labels);

  const LossWeights weights{c.traceability_weight, c.balance_weight};
  std::vector<double> importance = std::move(f.loss.importance);
  std::vector<double> load = std::move(f.loss.load);
  f.loss = total_loss(f.ce.value, f.tb.value, f.ip.value, f.load.value, weights);
  f.loss.importance = std::move(importance);
  f.loss.load = std::move(load);
  f.loss.clamped = f.tb.clamped;
  if (!std::isfinite(f.loss.total)) {
    throw std::runtime_error("forward: non-finite loss");
  }
  return f;
}

ModelParams ComeModel::backward(const ForwardPass& f) const {
  const ModelConfig& c = config_;
  if (f.labels.empty() || f.ce.grad.empty()) {
    throw std::logic_error("backward: forward pass was run without labels");
  }
  const std::size_t segment = f.batch.tokens_per_sample;
  const std::size_t n = f.batch.token_count();
  ModelParams g = params_.zeros_like();

  g.head_w = matmul_tn(f.ce.grad, f.pooled);
  g.head_b = column_sums(f.ce.grad);
  const Mat d_pooled = matmul(f.ce.grad, params_.head_w);
  Mat d_agg(n, c.width);
  const double inv = 1.0 / static_cast<double>(segment);
  for (std::size_t t = 0; t < n; ++t) {
    const auto src = d_pooled.row(t / segment);
    auto dst = d_agg.row(t);
    for (std::size_t d = 0; d < c.width; ++d) dst[d] = src[d] * inv;
  }

  Mat d_att(n, c.width);
  if (c.kind == ModelKind::dense) {
    d_att = ffn_backward(params_.dense, f.dense_cache, d_agg, g.dense);
  } else {
    if (c.use_ste) add_inplace(d_att, ste_.backward_input(f.f_st, d_agg));
    if (c.use_see) add_inplace(d_att, see_.backward_input(f.f_se, d_agg));
    if (c.use_s2e) {
      ExpertGrads eg = expert_backward(params_.bank, f.plan, f.expert_cache, d_agg);
      for (std::size_t j = 0; j < eg.experts.size(); ++j) g.bank.experts()[j] = std::move(eg.experts[j]);

      Mat d_gate = route_grads_to_gate_grads(f.plan, eg.route_weight);
      if (c.traceability_weight != 0.0) add_inplace(d_gate, f.tb.grad, c.traceability_weight);
      add_inplace(d_gate, f.ip.grad, c.balance_weight);
      Mat d_logit;
      if (c.load == LoadVariant::literal) {
        add_inplace(d_gate, f.load.grad, c.balance_weight);
      } else {
        d_logit = f.load.grad;
        for (double& v : d_logit.values()) v *= c.balance_weight;
      }
      RouterGrads rg = router_backward(d_gate, d_logit.empty() ? nullptr : &d_logit, f.gates,
                                       f.routed_input, params_.router);
      g.router.w = std::move(rg.w);
      g.router.b = std::move(rg.b);

      Mat d_routed = std::move(eg.features);
      add_inplace(d_routed, rg.features);
      DrGrads dg = dr_backward(f.attended, f.cluster_features, params_.dr, d_routed);
      g.dr = std::move(dg.params);
      add_inplace(d_att, dg.attended);
    }
  }

  Mat d_tokens_att = d_att;
  MhaGrads ag = mha_backward(d_tokens_att, params_.attention, f.attention);
  g.attention = std::move(ag.params);
  return g;
}

RoutingFreeze freeze_routing(const ForwardPass& pass) {
  return RoutingFreeze{pass.cluster_features, pass.plan};
}

}  // namespace come
