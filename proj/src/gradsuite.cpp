#include "come/gradsuite.hpp"

#include <functional>
#include <string_view>

namespace come {

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.sources = 2;
  c.classes = 3;
  c.experts = 4;
  c.top_k = 2;
  c.expert_hidden = 12;
  c.fine_centers = 4;
  c.coarse_centers = 2;
  return c;
}

namespace {

struct Instance {
  TokenBatch batch;
  std::vector<std::uint32_t> labels;
};

Instance random_instance(const ModelConfig& c, std::uint64_t seed) {
  constexpr std::size_t samples = 2;
  constexpr std::size_t segment = 4;
  Rng rng = Rng::stream(seed, RngStream::data);
  Instance in;
  in.batch.tokens_per_sample = segment;
  in.batch.tokens = Mat(samples * segment, c.width);
  for (double& v : in.batch.tokens.values()) v = rng.normal();
  for (std::size_t s = 0; s < samples; ++s) {
    in.batch.sources.insert(in.batch.sources.end(), segment,
                            static_cast<std::uint32_t>(s % c.sources));
    in.labels.push_back(static_cast<std::uint32_t>(rng.index(c.classes)));
  }
  return in;
}

void absorb(ComponentCheck& row, const GradCheckResult& r) {
  ++row.instances;
  row.coordinates += r.checked;
  row.non_finite += r.non_finite.size();
  row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
}

// Checks the parameters whose dotted name starts with `prefix` against the
// total loss, with routing decisions held fixed.
GradCheckResult check_model(const ModelConfig& c, std::uint64_t seed, std::string_view prefix,
                            double h) {
  ComeModel model(c, seed);
  const Instance in = random_instance(c, seed);
  Rng routing = Rng::stream(seed, RngStream::routing);
  const ForwardPass pass = model.forward(in.batch, in.labels, routing);
  const RoutingFreeze freeze = freeze_routing(pass);
  ModelParams grads = model.backward(pass);

  std::vector<Mat*> params;
  std::vector<const Mat*> analytic;
  std::vector<Mat*> all_grads = grads.pointers();
  const std::vector<std::string> names = model.params().names();
  const std::vector<Mat*> all_params = model.params().pointers();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind(prefix, 0) == 0) {
      params.push_back(all_params[i]);
      analytic.push_back(all_grads[i]);
    }
  }
  const auto fn = [&] {
    Rng unused(0);
    return model.forward(in.batch, in.labels, unused, &freeze).loss.total;
  };
  return grad_check_params(fn, params, analytic, h);
}

Mat random_gates(std::size_t tokens, std::size_t experts, Rng& rng) {
  Mat g(tokens, experts);
  for (double& v : g.values()) v = rng.normal();
  softmax_rows_inplace(g);
  return g;
}

GradCheckResult check_gate_loss(const std::function<LossTerm(const Mat&)>& loss, const Mat& at,
                                double h) {
  const LossTerm base = loss(at);
  const auto fn = [&](std::span<const double> x) {
    Mat m(at.rows(), at.cols(), std::vector<double>(x.begin(), x.end()));
    return loss(m).value;
  };
  return grad_check(fn, at.values(), base.grad.values(), h);
}

}  // namespace

std::vector<ComponentCheck> run_gradient_suite(const GradSuiteOptions& o) {
  const ModelConfig base = gradcheck_model_config();
  ModelConfig renorm = base;
  renorm.renormalize_gates = true;
  ModelConfig margin = base;
  margin.load = LoadVariant::margin;
  ModelConfig multi = base;
  multi.clustering = ClusterStrategy::multistep;
  multi.multistep_k = 2;
  ModelConfig residual = base;
  residual.attention_residual = true;
  ModelConfig dense = base;
  dense.kind = ModelKind::dense;

  struct ModelRow {
    std::string name;
    const ModelConfig* config;
    std::string prefix;
  };
  const std::vector<ModelRow> model_rows{
      {"attention", &base, "attention."},
      {"attention (residual)", &residual, "attention."},
      {"dimension reduction", &base, "dr."},
      {"source experts", &base, "experts."},
      {"router", &base, "router."},
      {"router (renormalized gates)", &renorm, "router."},
      {"router (margin load)", &margin, "router."},
      {"router (multistep clustering)", &multi, "router."},
      {"classifier", &base, "head."},
      {"dense baseline", &dense, ""},
  };

  std::vector<ComponentCheck> rows;
  for (const ModelRow& mr : model_rows) {
    ComponentCheck row{mr.name};
    for (std::size_t s = 0; s < o.seeds; ++s)
      absorb(row, check_model(*mr.config, o.first_seed + s, mr.prefix, o.step));
    rows.push_back(row);
  }

  ComponentCheck shared{"shared expert input"};
  ComponentCheck tb{"traceability loss"}, tb_single{"traceability loss (singleton groups)"};
  ComponentCheck ip{"importance loss"}, load{"load loss"}, load_m{"load loss (margin)"};
  ComponentCheck task{"task loss"};
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const std::uint64_t seed = o.first_seed + s;
    Rng rng = Rng::stream(seed, RngStream::data).split(7);

    const FrozenSharedExpert expert(s % 2 == 0 ? SharedKind::structure : SharedKind::semantic, 6,
                                    seed);
    Mat x(5, 6);
    for (double& v : x.values()) v = rng.normal();
    Mat up(5, 6);
    for (double& v : up.values()) v = rng.normal();
    const Mat analytic = expert.backward_input(expert.forward(x), up);
    const auto shared_fn = [&](std::span<const double> p) {
      const Mat out = expert.forward(Mat(5, 6, std::vector<double>(p.begin(), p.end())));
      double total = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) total += out.values()[i] * up.values()[i];
      return total;
    };
    absorb(shared, grad_check(shared_fn, x.values(), analytic.values(), o.step));

    const std::size_t tokens = 12, experts = 6;
    const Mat g = random_gates(tokens, experts, rng);
    std::vector<std::uint32_t> sources(tokens);
    for (auto& v : sources) v = static_cast<std::uint32_t>(rng.index(3));
    const auto groups = expert_groups(experts, 3);
    absorb(tb, check_gate_loss([&](const Mat& m) { return traceability_loss(m, sources, groups); },
                               g, o.step));
    const auto singles = expert_groups(3, 3);
    const Mat g3 = random_gates(tokens, 3, rng);
    absorb(tb_single, check_gate_loss(
                          [&](const Mat& m) { return traceability_loss(m, sources, singles); },
                          g3, o.step));
    absorb(ip, check_gate_loss([](const Mat& m) { return importance_loss(m); }, g, o.step));
    absorb(load, check_gate_loss([](const Mat& m) { return load_loss(m); }, g, o.step));

    Mat logits(tokens, experts);
    for (double& v : logits.values()) v = rng.normal();
    const std::size_t k = 1 + s % 3;
    absorb(load_m, check_gate_loss([&](const Mat& m) { return load_loss_margin(m, k); }, logits,
                                   o.step));

    Mat class_logits(4, 3);
    for (double& v : class_logits.values()) v = 3.0 * rng.normal();
    std::vector<std::uint32_t> labels(4);
    for (auto& v : labels) v = static_cast<std::uint32_t>(rng.index(3));
    absorb(task, check_gate_loss([&](const Mat& m) { return task_loss(m, labels); }, class_logits,
                                 o.step));
  }
  for (ComponentCheck* r : {&shared, &tb, &tb_single, &ip, &load, &load_m, &task})
    rows.push_back(*r);

  for (ComponentCheck& r : rows)
    r.passed = r.non_finite == 0 && r.max_rel_error < o.tolerance && r.instances >= o.seeds;
  return rows;
}

}  // namespace come
