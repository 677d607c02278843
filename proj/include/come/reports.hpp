#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "come/harness.hpp"

namespace come {

// metrics.csv columns, in order.
const std::vector<std::string>& metrics_columns();

void write_metrics_csv(const std::filesystem::path& file, const std::vector<MetricsRecord>& history);
// Wide companion: step, ip_0.., load_0.., util_0.. (empty cells for
// unrouted models).
void write_expert_csv(const std::filesystem::path& file, const std::vector<MetricsRecord>& history,
                      std::size_t experts);
void write_ablation_csv(const std::filesystem::path& file, const std::vector<VariantResult>& rows);
void write_sweep_csv(const std::filesystem::path& file, SweepAxis axis,
                     const std::vector<SweepRow>& rows);

// EvalRecord as a JSON object (NaN becomes null).
std::string eval_json(const EvalRecord& record);

// Top-two principal components of the rows of `x` (centered).
struct Projection {
  Mat coords;  // (n × 2)
  std::vector<double> variance;  // per component
  double explained_ratio = 0.0;  // (λ1 + λ2) / total variance, in [0, 1]
};
Projection pca2(const Mat& x);

struct RouteDumpSummary {
  std::size_t tokens = 0;
  std::size_t rows = 0;
  std::size_t overflow_rows = 0;
  double purity = 0.0;
  double explained_ratio = 0.0;
};

// routes.csv: one row per (token, selected expert) with cluster ids and the
// admission status; projections.csv: 2-D PCA of the routed features F'.
RouteDumpSummary route_dump(const ComeModel& model, const std::vector<Sample>& samples,
                            std::size_t batch_size, std::uint64_t seed,
                            const std::filesystem::path& routes_csv,
                            const std::filesystem::path& projections_csv);

// Recomputes routing purity from a routes.csv written by route_dump.
double purity_from_route_csv(const std::filesystem::path& routes_csv);

}  // namespace come
