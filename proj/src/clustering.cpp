#include "come/clustering.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace come {

namespace {

struct AssignStats {
  double inertia = 0.0;
  bool changed = false;
};

std::size_t nearest(std::span<const double> point, const Mat& centroids, double* dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(point, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist != nullptr) *dist = best_d;
  return best;
}

AssignStats assign(const Mat& points, const Mat& centroids, std::vector<std::size_t>& labels) {
  AssignStats stats;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double d = 0.0;
    const std::size_t c = nearest(points.row(i), centroids, &d);
    if (c != labels[i]) {
      labels[i] = c;
      stats.changed = true;
    }
    stats.inertia += d;
  }
  return stats;
}

double inertia_of(const Mat& points, const Mat& centroids, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i)
    total += squared_distance(points.row(i), centroids.row(labels[i]));
  return total;
}

// Moves the farthest point of the largest-error cluster into each empty
// cluster. Returns the number of repairs.
std::size_t repair_empty(const Mat& points, Mat& centroids, std::vector<std::size_t>& labels) {
  std::size_t repaired = 0;
  std::vector<std::size_t> counts(centroids.rows(), 0);
  for (std::size_t l : labels) ++counts[l];
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    if (counts[c] != 0) continue;
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
      if (counts[labels[i]] <= 1) continue;
      const double d = squared_distance(points.row(i), centroids.row(labels[i]));
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far_d < 0.0) break;
    --counts[labels[far]];
    labels[far] = c;
    counts[c] = 1;
    const auto src = points.row(far);
    std::copy(src.begin(), src.end(), centroids.row(c).begin());
    ++repaired;
  }
  return repaired;
}

void update_means(const Mat& points, Mat& centroids, const std::vector<std::size_t>& labels) {
  std::vector<std::size_t> counts(centroids.rows(), 0);
  Mat sums(centroids.rows(), centroids.cols());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    ++counts[labels[i]];
    auto s = sums.row(labels[i]);
    const auto p = points.row(i);
    for (std::size_t d = 0; d < p.size(); ++d) s[d] += p[d];
  }
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    if (counts[c] == 0) continue;
    auto dst = centroids.row(c);
    const auto s = sums.row(c);
    const double n = static_cast<double>(counts[c]);
    for (std::size_t d = 0; d < dst.size(); ++d) dst[d] = s[d] / n;
  }
}

KMeansResult lloyd(const Mat& points, Mat centroids, std::size_t max_iters) {
  if (max_iters == 0) {
    throw std::invalid_argument("kmeans: max_iters must be at least 1");
  }
  KMeansResult result;
  std::vector<std::size_t> labels(points.rows(), std::numeric_limits<std::size_t>::max());
  assign(points, centroids, labels);
  result.repaired_empty += repair_empty(points, centroids, labels);
  result.inertia_history.push_back(inertia_of(points, centroids, labels));
  for (std::size_t it = 0; it < max_iters; ++it) {
    update_means(points, centroids, labels);
    AssignStats stats = assign(points, centroids, labels);
    const std::size_t repaired = repair_empty(points, centroids, labels);
    result.repaired_empty += repaired;
    if (repaired != 0) stats.inertia = inertia_of(points, centroids, labels);
    result.inertia_history.push_back(stats.inertia);
    result.iterations = it + 1;
    if (!stats.changed && repaired == 0) {
      result.converged = true;
      break;
    }
  }
  result.centroids = std::move(centroids);
  result.assignment = std::move(labels);
  return result;
}

void check_points(const Mat& points, std::size_t k, const char* who) {
  if (k == 0) {
    throw std::invalid_argument(std::string(who) + ": k must be at least 1");
  }
  if (!all_finite(points)) {
    throw std::invalid_argument(std::string(who) + ": non-finite point");
  }
  const std::size_t distinct = count_distinct_rows(points);
  if (k > distinct) {
    throw std::invalid_argument(std::string(who) + ": k = " + std::to_string(k) +
                                " exceeds the number of distinct points (" +
                                std::to_string(distinct) + ")");
  }
}

}  // namespace

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t count_distinct_rows(const Mat& points) {
  std::vector<std::size_t> order(points.rows());
  std::iota(order.begin(), order.end(), 0);
  const auto less = [&](std::size_t a, std::size_t b) {
    const auto ra = points.row(a);
    const auto rb = points.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t distinct = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size(); ++i)
    if (less(order[i - 1], order[i])) ++distinct;
  return distinct;
}

Mat farthest_first_seeds(const Mat& points, std::size_t k, Rng& rng) {
  Mat seeds(k, points.cols());
  std::vector<double> closest(points.rows(), std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(points.rows());
  for (std::size_t c = 0; c < k; ++c) {
    const auto src = points.row(pick);
    std::copy(src.begin(), src.end(), seeds.row(c).begin());
    double far_d = -1.0;
    std::size_t far = 0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
      closest[i] = std::min(closest[i], squared_distance(points.row(i), src));
      if (closest[i] > far_d) {
        far_d = closest[i];
        far = i;
      }
    }
    pick = far;
  }
  return seeds;
}

KMeansResult kmeans(const Mat& points, std::size_t k, Rng& rng, std::size_t max_iters) {
  check_points(points, k, "kmeans");
  return lloyd(points, farthest_first_seeds(points, k, rng), max_iters);
}

KMeansResult kmeans_warm(const Mat& points, const Mat& initial, std::size_t max_iters) {
  check_points(points, initial.rows(), "kmeans_warm");
  if (initial.cols() != points.cols()) {
    throw std::invalid_argument("kmeans_warm: centroid width does not match points");
  }
  return lloyd(points, initial, max_iters);
}

ClusterModel single_level(const KMeansResult& result) {
  ClusterModel model;
  model.fine = result.centroids;
  model.coarse = result.centroids;
  model.lineage.resize(result.centroids.rows());
  std::iota(model.lineage.begin(), model.lineage.end(), 0);
  model.fine_of = result.assignment;
  model.coarse_of = result.assignment;
  model.fine_inertia = result.inertia_history;
  return model;
}

ClusterModel fine2coarse(const Mat& attended, std::size_t m, std::size_t k, Rng& rng,
                         std::size_t max_iters) {
  if (k == 0 || m <= k) {
    throw std::invalid_argument("fine2coarse: requires m > k >= 1");
  }
  std::vector<std::string> warnings;
  const std::size_t distinct = count_distinct_rows(attended);
  std::size_t fine_k = m;
  if (distinct < m) {
    fine_k = distinct;
    warnings.push_back("fine2coarse: only " + std::to_string(distinct) +
                       " distinct tokens, fine centers reduced from " + std::to_string(m));
  }
  KMeansResult fine = kmeans(attended, fine_k, rng, max_iters);
  const std::size_t fine_distinct = count_distinct_rows(fine.centroids);
  std::size_t coarse_k = k;
  if (fine_distinct < k) {
    coarse_k = fine_distinct;
    warnings.push_back("fine2coarse: coarse centers reduced from " + std::to_string(k) + " to " +
                       std::to_string(coarse_k));
  }
  KMeansResult coarse = kmeans(fine.centroids, coarse_k, rng, max_iters);

  ClusterModel model;
  model.fine = std::move(fine.centroids);
  model.coarse = std::move(coarse.centroids);
  model.lineage = std::move(coarse.assignment);
  model.fine_of = std::move(fine.assignment);
  model.coarse_of.resize(model.fine_of.size());
  for (std::size_t t = 0; t < model.fine_of.size(); ++t)
    model.coarse_of[t] = model.lineage[model.fine_of[t]];
  model.fine_inertia = std::move(fine.inertia_history);
  model.coarse_inertia = std::move(coarse.inertia_history);
  model.warnings = std::move(warnings);
  return model;
}

MultiStepResult multistep(const Mat& attended, std::size_t k, std::size_t steps, double tau,
                          Rng& rng, std::size_t iters_per_step) {
  if (steps == 0) {
    throw std::invalid_argument("multistep: steps must be at least 1");
  }
  if (!(tau >= 0.0 && tau < 1.0)) {
    throw std::invalid_argument("multistep: suppression fraction must lie in [0, 1)");
  }
  const double min_size = tau * static_cast<double>(attended.rows());
  MultiStepResult out;
  Mat centroids;
  for (std::size_t step = 1; step <= steps; ++step) {
    KMeansResult run = step == 1 ? kmeans(attended, k, rng, iters_per_step)
                                 : kmeans_warm(attended, centroids, iters_per_step);
    MultiStepStep record;
    record.lloyd_inertia = run.inertia_history;
    record.inertia_before_suppression = run.inertia();

    std::vector<std::size_t> sizes(run.centroids.rows(), 0);
    for (std::size_t l : run.assignment) ++sizes[l];
    std::vector<std::size_t> survivors;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      if (static_cast<double>(sizes[c]) < min_size) {
        out.trace.suppressed.push_back({step, c, sizes[c]});
      } else {
        survivors.push_back(c);
      }
    }
    if (survivors.empty()) {
      throw std::invalid_argument("multistep: every cluster was suppressed at step " +
                                  std::to_string(step) + "; suppression fraction too large");
    }
    centroids = gather_rows(run.centroids, survivors);
    if (survivors.size() == sizes.size()) {
      record.assignment = std::move(run.assignment);
      record.inertia_after_suppression = record.inertia_before_suppression;
    } else {
      record.assignment.resize(attended.rows());
      double total = 0.0;
      for (std::size_t t = 0; t < attended.rows(); ++t) {
        double d = 0.0;
        record.assignment[t] = nearest(attended.row(t), centroids, &d);
        total += d;
      }
      record.inertia_after_suppression = total;
    }
    record.centroids = centroids;
    out.trace.steps.push_back(std::move(record));
  }

  const MultiStepStep& last = out.trace.steps.back();
  ClusterModel& model = out.model;
  model.fine = last.centroids;
  model.coarse = last.centroids;
  model.lineage.resize(last.centroids.rows());
  std::iota(model.lineage.begin(), model.lineage.end(), 0);
  model.fine_of = last.assignment;
  model.coarse_of = last.assignment;
  for (const auto& s : out.trace.steps)
    model.fine_inertia.insert(model.fine_inertia.end(), s.lloyd_inertia.begin(),
                              s.lloyd_inertia.end());
  return out;
}

std::span<const double> cluster_feature_lookup(const ClusterModel& model, std::size_t token) {
  if (token >= model.fine_of.size()) {
    throw std::out_of_range("cluster_feature_lookup: token " + std::to_string(token) +
                            " is not assigned");
  }
  return model.coarse.row(model.lineage[model.fine_of[token]]);
}

Mat cluster_features(const ClusterModel& model) {
  Mat out(model.token_count(), model.coarse.cols());
  for (std::size_t t = 0; t < model.token_count(); ++t) {
    const auto f = cluster_feature_lookup(model, t);
    std::copy(f.begin(), f.end(), out.row(t).begin());
  }
  return out;
}

}  // namespace come
