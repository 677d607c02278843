#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "come/numerics.hpp"

namespace come {

// One run of Lloyd's algorithm. `inertia_history[0]` is the inertia of the
// initial assignment; each later entry follows one update+assign round, so
// the sequence is non-increasing.
struct KMeansResult {
  Mat centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_history;
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t repaired_empty = 0;

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

// Two-level clustering of a token batch. For single-level strategies the
// coarse level mirrors the fine level and lineage is the identity.
struct ClusterModel {
  Mat fine;                             // A, (m × D)
  Mat coarse;                           // B, (k × D)
  std::vector<std::size_t> lineage;     // fine index → coarse index
  std::vector<std::size_t> fine_of;     // token → fine index
  std::vector<std::size_t> coarse_of;   // token → coarse index
  std::vector<double> fine_inertia;     // per-iteration, phase 1
  std::vector<double> coarse_inertia;   // per-iteration, phase 2
  std::vector<std::string> warnings;

  std::size_t token_count() const { return fine_of.size(); }
};

struct Suppression {
  std::size_t step = 0;     // 1-based
  std::size_t cluster = 0;  // index among that step's centroids before suppression
  std::size_t size = 0;
};

struct MultiStepStep {
  Mat centroids;                      // survivors after suppression
  std::vector<std::size_t> assignment;
  std::vector<double> lloyd_inertia;  // Lloyd history within the step
  double inertia_before_suppression = 0.0;
  double inertia_after_suppression = 0.0;
};

struct MultiStepState {
  std::vector<MultiStepStep> steps;
  std::vector<Suppression> suppressed;
};

struct MultiStepResult {
  ClusterModel model;
  MultiStepState trace;
};

double squared_distance(std::span<const double> a, std::span<const double> b);
std::size_t count_distinct_rows(const Mat& points);

// Farthest-first seeding: the first centroid is drawn from `rng`, each next
// one is the point farthest from all chosen so far (ties → lowest index).
Mat farthest_first_seeds(const Mat& points, std::size_t k, Rng& rng);

// Lloyd iterations with squared Euclidean distance. Empty clusters are
// re-seeded from the point farthest from its current centroid.
KMeansResult kmeans(const Mat& points, std::size_t k, Rng& rng, std::size_t max_iters);
KMeansResult kmeans_warm(const Mat& points, const Mat& initial, std::size_t max_iters);

ClusterModel single_level(const KMeansResult& result);

// Phase 1 clusters tokens into m fine centroids, phase 2 clusters those
// centroids into k coarse ones; tokens inherit their fine centroid's coarse id.
ClusterModel fine2coarse(const Mat& attended, std::size_t m, std::size_t k, Rng& rng,
                         std::size_t max_iters);

// `steps` rounds of k-means; rounds after the first warm-start from the
// previous survivors. Clusters holding fewer than tau·T tokens are dropped
// after each round and their members move to the nearest survivor.
MultiStepResult multistep(const Mat& attended, std::size_t k, std::size_t steps, double tau,
                          Rng& rng, std::size_t iters_per_step);

std::span<const double> cluster_feature_lookup(const ClusterModel& model, std::size_t token);
// Per-token coarse features stacked into a (T × D) matrix.
Mat cluster_features(const ClusterModel& model);

}  // namespace come
