#include "come/reports.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "come/io.hpp"
#include "json.hpp"

namespace come {

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{
      "step",      "task_ce", "l_tb",        "l_ip",    "l_load",        "total",
      "train_acc", "test_acc", "purity",     "test_purity", "util_cv",   "overflow_rate",
      "aggregate_residual"};
  return cols;
}

void write_metrics_csv(const std::filesystem::path& file, const std::vector<MetricsRecord>& history) {
  CsvWriter csv(file);
  csv.header(metrics_columns());
  for (const MetricsRecord& m : history) {
    csv.cell(m.step).cell(m.task_ce).cell(m.l_tb).cell(m.l_ip).cell(m.l_load).cell(m.total);
    csv.cell(m.train_acc).cell(m.test_acc).cell(m.purity).cell(m.test_purity);
    csv.cell(m.util_cv).cell(m.overflow_rate).cell(m.aggregate_residual);
    csv.end_row();
  }
}

void write_expert_csv(const std::filesystem::path& file, const std::vector<MetricsRecord>& history,
                      std::size_t experts) {
  CsvWriter csv(file);
  std::vector<std::string> cols{"step"};
  for (const char* prefix : {"ip_", "load_", "util_"})
    for (std::size_t j = 0; j < experts; ++j) cols.push_back(prefix + std::to_string(j));
  csv.header(cols);
  for (const MetricsRecord& m : history) {
    csv.cell(m.step);
    for (const auto* v : {&m.importance, &m.load, &m.utilization})
      for (std::size_t j = 0; j < experts; ++j) {
        if (j < v->size()) csv.cell((*v)[j]);
        else csv.cell(std::string());
      }
    csv.end_row();
  }
}

void write_ablation_csv(const std::filesystem::path& file, const std::vector<VariantResult>& rows) {
  CsvWriter csv(file);
  csv.header({"variant", "accuracy", "purity", "admitted_purity", "util_cv", "overflow_rate",
              "task_ce", "diverged"});
  for (const VariantResult& r : rows) {
    csv.cell(r.variant).cell(r.test.accuracy).cell(r.test.purity).cell(r.test.admitted_purity);
    csv.cell(r.test.util_cv).cell(r.test.overflow_rate).cell(r.test.task_ce);
    csv.cell(std::string(r.diverged ? "1" : "0"));
    csv.end_row();
  }
}

void write_sweep_csv(const std::filesystem::path& file, SweepAxis axis,
                     const std::vector<SweepRow>& rows) {
  CsvWriter csv(file);
  csv.header({std::string(to_string(axis)), "accuracy", "purity", "admitted_purity", "util_cv",
              "overflow_rate", "task_ce", "diverged"});
  for (const SweepRow& r : rows) {
    csv.cell(r.value).cell(r.test.accuracy).cell(r.test.purity).cell(r.test.admitted_purity);
    csv.cell(r.test.util_cv).cell(r.test.overflow_rate).cell(r.test.task_ce);
    csv.cell(std::string(r.diverged ? "1" : "0"));
    csv.end_row();
  }
}

std::string eval_json(const EvalRecord& r) {
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  nlohmann::json j;
  j["samples"] = r.samples;
  j["tokens"] = r.tokens;
  j["accuracy"] = num(r.accuracy);
  j["purity"] = num(r.purity);
  j["admitted_purity"] = num(r.admitted_purity);
  j["util_cv"] = num(r.util_cv);
  j["overflow_rate"] = num(r.overflow_rate);
  j["task_ce"] = num(r.task_ce);
  j["l_tb"] = num(r.l_tb);
  j["l_ip"] = num(r.l_ip);
  j["l_load"] = num(r.l_load);
  j["total"] = num(r.total);
  j["utilization"] = r.utilization;
  j["importance"] = r.importance;
  j["load"] = r.load;
  j["aggregate_residual"] = r.aggregate_residual;
  j["capacity_violations"] = r.capacity_violations;
  return j.dump(2);
}

namespace {

// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix. Returns
// eigenvalues; `vectors` receives eigenvectors as columns.
std::vector<double> symmetric_eigen(Mat a, Mat& vectors) {
  const std::size_t n = a.rows();
  vectors = Mat(n, n);
  for (std::size_t i = 0; i < n; ++i) vectors(i, i) = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors(k, p), vkq = vectors(k, q);
          vectors(k, p) = c * vkp - s * vkq;
          vectors(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  return values;
}

}  // namespace

Projection pca2(const Mat& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0 || d == 0) {
    throw std::invalid_argument("pca2: empty input");
  }
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += x(i, k);
  for (double& m : mean) m /= static_cast<double>(n);
  Mat centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) centered(i, k) = x(i, k) - mean[k];
  Mat cov = matmul_tn(centered, centered);
  for (double& v : cov.values()) v /= static_cast<double>(n);

  Mat vecs;
  const std::vector<double> eig = symmetric_eigen(cov, vecs);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return eig[a] > eig[b]; });

  Projection p;
  p.coords = Mat(n, 2);
  double total = 0.0;
  for (double e : eig) total += std::max(e, 0.0);
  for (std::size_t c = 0; c < 2 && c < d; ++c) {
    const std::size_t col = order[c];
    // Sign convention: the largest-magnitude loading is positive.
    std::size_t arg = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (std::abs(vecs(k, col)) > std::abs(vecs(arg, col))) arg = k;
    const double sign = vecs(arg, col) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += centered(i, k) * vecs(k, col);
      p.coords(i, c) = sign * s;
    }
    p.variance.push_back(std::max(eig[col], 0.0));
  }
  const double top = std::accumulate(p.variance.begin(), p.variance.end(), 0.0);
  p.explained_ratio = total > 0.0 ? std::clamp(top / total, 0.0, 1.0) : 0.0;
  return p;
}

RouteDumpSummary route_dump(const ComeModel& model, const std::vector<Sample>& samples,
                            std::size_t batch_size, std::uint64_t seed,
                            const std::filesystem::path& routes_csv,
                            const std::filesystem::path& projections_csv) {
  if (samples.empty()) {
    throw std::invalid_argument("route_dump: empty split");
  }
  if (!model.config().use_s2e || model.config().kind != ModelKind::come) {
    throw std::invalid_argument("route_dump: the model has no routed experts");
  }
  const auto& groups = model.groups();
  std::vector<long> owner(model.config().experts, -1);
  for (std::size_t m = 0; m < groups.size(); ++m)
    for (std::size_t j : groups[m]) owner[j] = static_cast<long>(m);

  CsvWriter csv(routes_csv);
  csv.header({"batch", "token", "sample", "source", "rank", "expert", "expert_owner", "gate",
              "weight", "status", "fine_id", "coarse_id"});
  RouteDumpSummary s;
  std::size_t pure = 0;
  std::vector<double> all_rows;
  std::vector<std::uint32_t> all_sources;
  std::vector<std::size_t> all_experts;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size, ++batch_index) {
    std::vector<std::size_t> idx(std::min(batch_size, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<std::uint32_t> labels;
    const TokenBatch batch = make_batch(samples, idx, &labels);
    Rng rng = eval_routing_rng(seed, batch_index);
    const ForwardPass pass = model.forward(batch, labels, rng);
    const DispatchPlan& plan = pass.plan;
    for (std::size_t t = 0; t < plan.tokens; ++t) {
      const std::uint32_t src = batch.sources[t];
      const std::size_t sample = start + t / batch.tokens_per_sample;
      const std::string fine = pass.clusters ? std::to_string(pass.clusters->fine_of[t]) : "";
      const std::string coarse = pass.clusters ? std::to_string(pass.clusters->coarse_of[t]) : "";
      for (std::size_t r = 0; r < plan.routes[t].size(); ++r) {
        const Route& route = plan.routes[t][r];
        csv.cell(batch_index).cell(s.tokens + t).cell(sample).cell(std::to_string(src)).cell(r);
        csv.cell(route.expert).cell(std::to_string(owner[route.expert]));
        csv.cell(route.gate).cell(route.weight);
        csv.cell(std::string(route.admitted ? "admitted" : "overflow")).cell(fine).cell(coarse);
        csv.end_row();
        ++s.rows;
        if (!route.admitted) ++s.overflow_rows;
      }
      if (owner[plan.routes[t].front().expert] == static_cast<long>(src)) ++pure;
      all_sources.push_back(src);
      all_experts.push_back(plan.routes[t].front().expert);
      const auto row = pass.routed_input.row(t);
      all_rows.insert(all_rows.end(), row.begin(), row.end());
    }
    s.tokens += plan.tokens;
  }
  s.purity = static_cast<double>(pure) / static_cast<double>(s.tokens);

  const Projection p = pca2(Mat(s.tokens, model.config().width, std::move(all_rows)));
  s.explained_ratio = p.explained_ratio;
  CsvWriter proj(projections_csv);
  proj.header({"token", "source", "top_expert", "pc1", "pc2"});
  for (std::size_t t = 0; t < s.tokens; ++t) {
    proj.cell(t).cell(std::to_string(all_sources[t])).cell(all_experts[t]);
    proj.cell(p.coords(t, 0)).cell(p.coords.cols() > 1 ? p.coords(t, 1) : 0.0);
    proj.end_row();
  }
  return s;
}

double purity_from_route_csv(const std::filesystem::path& routes_csv) {
  std::ifstream in(routes_csv);
  if (!in) throw std::runtime_error("cannot open " + routes_csv.string());
  std::string line;
  std::getline(in, line);
  std::size_t tokens = 0, pure = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() < 7) throw std::runtime_error("malformed route row: " + line);
    if (f[4] != "0") continue;
    ++tokens;
    if (f[6] == f[3]) ++pure;
  }
  if (tokens == 0) throw std::runtime_error("route dump has no rows");
  return static_cast<double>(pure) / static_cast<double>(tokens);
}

}  // namespace come
