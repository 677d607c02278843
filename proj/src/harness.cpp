#include "come/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace come {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

void RunConfig::validate() const {
  if (train.batch_size == 0) {
    throw std::invalid_argument("train.batch_size must be at least 1");
  }
  if (train.log_every == 0) {
    throw std::invalid_argument("train.log_every must be at least 1");
  }
  if (!(train.optimizer.lr > 0.0) || !(train.optimizer.eps > 0.0) ||
      train.optimizer.weight_decay < 0.0 || train.optimizer.beta1 < 0.0 ||
      train.optimizer.beta1 >= 1.0 || train.optimizer.beta2 < 0.0 || train.optimizer.beta2 >= 1.0) {
    throw std::invalid_argument("train.optimizer: invalid AdamW settings");
  }
  if (ablation.no_s2e && (ablation.no_dse || (ablation.no_ste && ablation.no_see))) {
    throw std::invalid_argument("ablation: removing routed and both shared experts leaves no experts");
  }
  if (ablation.no_s2e && (ablation.no_clustering || ablation.no_tb)) {
    throw std::invalid_argument("ablation: no_clustering and no_tb need routed experts");
  }
  if (model.kind == ModelKind::dense && ablation.any()) {
    throw std::invalid_argument("ablation switches apply only to the come model");
  }
  make_generator(data);
  effective_model(*this).validate();
}

ModelConfig effective_model(const RunConfig& config) {
  ModelConfig m = config.model;
  m.width = config.data.width;
  m.sources = config.data.sources;
  m.classes = config.data.classes;
  const Ablation& a = config.ablation;
  if (a.no_ste || a.no_dse) m.use_ste = false;
  if (a.no_see || a.no_dse) m.use_see = false;
  if (a.no_s2e) m.use_s2e = false;
  if (a.no_clustering) m.clustering = ClusterStrategy::none;
  if (a.no_tb) m.traceability_weight = 0.0;
  return m;
}

BatchRouting routing_stats(const ForwardPass& pass,
                           const std::vector<std::vector<std::size_t>>& groups) {
  BatchRouting out;
  if (!pass.routed()) return out;
  const DispatchPlan& plan = pass.plan;
  out.admitted.assign(plan.experts, 0);
  for (std::size_t j = 0; j < plan.experts; ++j) {
    out.admitted[j] = plan.admitted[j].size();
    if (out.admitted[j] > plan.capacity) out.capacity_ok = false;
  }
  out.overflow = plan.overflow_count();
  for (std::size_t t = 0; t < plan.tokens; ++t) {
    const Route& top = plan.routes[t].front();
    const std::uint32_t src = pass.batch.sources[t];
    if (src >= groups.size()) continue;
    const auto& g = groups[src];
    if (std::find(g.begin(), g.end(), top.expert) != g.end()) {
      ++out.pure;
      if (top.admitted) ++out.admitted_pure;
    }
  }
  return out;
}

Rng batch_routing_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng::stream(seed, RngStream::routing).split(index);
}

Rng eval_routing_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng::stream(seed, RngStream::routing).split((std::uint64_t{1} << 40) + index);
}

namespace {

std::size_t correct_predictions(const ForwardPass& pass) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pass.logits.rows(); ++i) {
    const auto row = pass.logits.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == pass.labels[i]) ++correct;
  }
  return correct;
}

double coefficient_of_variation(std::span<const double> v) {
  return v.empty() ? 0.0 : std::sqrt(cv_squared(v));
}

void accumulate(std::vector<double>& dst, std::span<const double> src) {
  if (dst.empty()) dst.assign(src.size(), 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

EvalRecord evaluate(const ComeModel& model, const std::vector<Sample>& samples,
                    std::size_t batch_size, std::uint64_t seed) {
  if (samples.empty()) {
    throw std::invalid_argument("evaluate: empty split");
  }
  if (batch_size == 0) {
    throw std::invalid_argument("evaluate: batch size must be positive");
  }
  EvalRecord r;
  std::size_t correct = 0, pure = 0, admitted_pure = 0, overflow = 0, routes = 0, batches = 0;
  std::vector<double> util;
  for (std::size_t start = 0; start < samples.size(); start += batch_size, ++batches) {
    std::vector<std::size_t> idx(std::min(batch_size, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<std::uint32_t> labels;
    const TokenBatch batch = make_batch(samples, idx, &labels);
    Rng rng = eval_routing_rng(seed, batches);
    const ForwardPass pass = model.forward(batch, labels, rng);

    r.samples += idx.size();
    r.tokens += batch.token_count();
    correct += correct_predictions(pass);
    r.task_ce += pass.loss.task_ce;
    r.l_tb += pass.loss.l_tb;
    r.l_ip += pass.loss.l_ip;
    r.l_load += pass.loss.l_load;
    r.total += pass.loss.total;
    r.aggregate_residual = std::max(r.aggregate_residual, pass.aggregate_residual);
    if (pass.routed()) {
      const BatchRouting s = routing_stats(pass, model.groups());
      pure += s.pure;
      admitted_pure += s.admitted_pure;
      overflow += s.overflow;
      routes += batch.token_count() * pass.plan.top_k;
      if (!s.capacity_ok) ++r.capacity_violations;
      std::vector<double> a(s.admitted.begin(), s.admitted.end());
      accumulate(util, a);
      accumulate(r.importance, pass.loss.importance);
      accumulate(r.load, pass.loss.load);
    }
  }
  const double nb = static_cast<double>(batches);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
  r.task_ce /= nb;
  r.l_tb /= nb;
  r.l_ip /= nb;
  r.l_load /= nb;
  r.total /= nb;
  if (routes > 0) {
    r.purity = static_cast<double>(pure) / static_cast<double>(r.tokens);
    r.admitted_purity = static_cast<double>(admitted_pure) / static_cast<double>(r.tokens);
    r.overflow_rate = static_cast<double>(overflow) / static_cast<double>(routes);
    for (double& v : util) v /= nb;
    for (double& v : r.importance) v /= nb;
    for (double& v : r.load) v /= nb;
    r.utilization = std::move(util);
    r.util_cv = coefficient_of_variation(r.utilization);
  } else {
    r.purity = r.admitted_purity = r.util_cv = r.overflow_rate = kNaN;
  }
  return r;
}

TrainResult train(const RunConfig& config, const Dataset& data, const StepCallback& on_log) {
  config.validate();
  if (data.train.empty()) {
    throw std::invalid_argument("train: empty training split");
  }
  const ModelConfig mc = effective_model(config);
  const TrainConfig& tc = config.train;
  TrainResult result(ComeModel(mc, tc.seed));
  ComeModel& model = result.model;
  result.ste_digest_before = model.structure_expert().digest();
  result.see_digest_before = model.semantic_expert().digest();

  std::vector<Mat*> params = model.params().pointers();
  OptState opt = OptState::for_params(tc.optimizer, params);
  ModelParams last_good = model.params();

  Rng shuffle = Rng::stream(tc.seed, RngStream::shuffle);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle.shuffle(order);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<std::size_t> idx;
    idx.reserve(tc.batch_size);
    while (idx.size() < tc.batch_size) {
      if (cursor == order.size()) {
        shuffle.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<std::uint32_t> labels;
    const TokenBatch batch = make_batch(data.train, idx, &labels);
    Rng rng = batch_routing_rng(tc.seed, step);

    ForwardPass pass;
    ModelParams grads;
    try {
      pass = model.forward(batch, labels, rng);
      grads = model.backward(pass);
    } catch (const std::runtime_error& e) {
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + ": " + e.what();
      model.params() = last_good;
      break;
    }
    std::vector<Mat*> gp = grads.pointers();
    const bool finite = std::all_of(gp.begin(), gp.end(), [](const Mat* m) { return all_finite(*m); });
    if (!finite) {
      result.diverged = true;
      result.diagnostic = "step " + std::to_string(step) + ": non-finite gradient";
      model.params() = last_good;
      break;
    }

    const BatchRouting stats = routing_stats(pass, model.groups());
    if (!stats.capacity_ok) {
      throw std::logic_error("train: expert capacity exceeded at step " + std::to_string(step));
    }

    const bool last = step + 1 == tc.steps;
    if (step % tc.log_every == 0 || last) {
      MetricsRecord m;
      m.step = step;
      m.task_ce = pass.loss.task_ce;
      m.l_tb = pass.loss.l_tb;
      m.l_ip = pass.loss.l_ip;
      m.l_load = pass.loss.l_load;
      m.total = pass.loss.total;
      m.train_acc = static_cast<double>(correct_predictions(pass)) / static_cast<double>(idx.size());
      m.aggregate_residual = pass.aggregate_residual;
      m.test_acc = m.test_purity = kNaN;
      if (pass.routed()) {
        const double n = static_cast<double>(batch.token_count());
        m.purity = static_cast<double>(stats.pure) / n;
        m.overflow_rate = static_cast<double>(stats.overflow) / (n * static_cast<double>(pass.plan.top_k));
        m.utilization.assign(stats.admitted.begin(), stats.admitted.end());
        m.util_cv = coefficient_of_variation(m.utilization);
        m.importance = pass.loss.importance;
        m.load = pass.loss.load;
      } else {
        m.purity = m.overflow_rate = m.util_cv = kNaN;
      }
      const bool eval_now = tc.eval_every != 0 && step % tc.eval_every == 0;
      if (eval_now && !data.test.empty()) {
        const EvalRecord e = evaluate(model, data.test, tc.batch_size, tc.seed);
        m.test_acc = e.accuracy;
        m.test_purity = e.purity;
      }
      if (on_log) on_log(m);
      result.history.push_back(std::move(m));
    }

    last_good = model.params();
    std::vector<const Mat*> cgp(gp.begin(), gp.end());
    adamw_step(params, cgp, opt);
    result.steps_completed = step + 1;
  }

  if (!data.test.empty()) {
    result.test = evaluate(model, data.test, tc.batch_size, tc.seed);
    if (!result.history.empty() && !result.diverged) {
      result.history.back().test_acc = result.test.accuracy;
      result.history.back().test_purity = result.test.purity;
    }
  }
  result.ste_digest_after = model.structure_expert().digest();
  result.see_digest_after = model.semantic_expert().digest();
  return result;
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "no_ste", "no_see", "no_dse", "no_clustering", "no_tb"};
  return v;
}

RunConfig with_variant(const RunConfig& base, std::string_view variant) {
  RunConfig c = base;
  c.ablation = Ablation{};
  if (variant == "full") return c;
  if (variant == "no_ste") c.ablation.no_ste = true;
  else if (variant == "no_see") c.ablation.no_see = true;
  else if (variant == "no_dse") c.ablation.no_dse = true;
  else if (variant == "no_clustering") c.ablation.no_clustering = true;
  else if (variant == "no_tb") c.ablation.no_tb = true;
  else if (variant == "no_s2e") c.ablation.no_s2e = true;
  else throw std::invalid_argument("unknown ablation variant '" + std::string(variant) + "'");
  return c;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<VariantResult> run_ablations(const RunConfig& base, const Dataset& data,
                                         std::size_t threads) {
  const auto& variants = ablation_variants();
  std::vector<RunConfig> configs;
  for (const std::string& v : variants) {
    configs.push_back(with_variant(base, v));
    configs.back().validate();
  }
  std::vector<VariantResult> out(variants.size());
  parallel_for(variants.size(), threads, [&](std::size_t i) {
    RunConfig c = configs[i];
    c.train.eval_every = 0;
    TrainResult r = train(c, data);
    out[i] = VariantResult{variants[i], std::move(r.test), r.diverged};
  });
  return out;
}

std::string_view to_string(SweepAxis axis) { return axis == SweepAxis::experts ? "experts" : "topk"; }

SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "experts") return SweepAxis::experts;
  if (s == "topk") return SweepAxis::topk;
  throw std::invalid_argument("unknown sweep axis '" + std::string(s) + "' (expected experts or topk)");
}

const std::vector<std::size_t>& sweep_values(SweepAxis axis) {
  static const std::vector<std::size_t> experts{4, 8, 10};
  static const std::vector<std::size_t> topk{1, 2, 3, 4};
  return axis == SweepAxis::experts ? experts : topk;
}

std::vector<SweepRow> sweep(const RunConfig& base, SweepAxis axis, const Dataset& data,
                            std::size_t threads) {
  const auto& values = sweep_values(axis);
  std::vector<RunConfig> configs;
  for (std::size_t v : values) {
    RunConfig c = base;
    (axis == SweepAxis::experts ? c.model.experts : c.model.top_k) = v;
    c.validate();
    configs.push_back(c);
  }
  std::vector<SweepRow> out(values.size());
  parallel_for(values.size(), threads, [&](std::size_t i) {
    RunConfig c = configs[i];
    c.train.eval_every = 0;
    TrainResult r = train(c, data);
    out[i] = SweepRow{values[i], std::move(r.test), r.diverged};
  });
  return out;
}

}  // namespace come
