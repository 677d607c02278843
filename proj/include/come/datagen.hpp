#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "come/numerics.hpp"
#include "come/tokens.hpp"

namespace come {

// Knobs of the synthetic multi-source generator.
struct DataConfig {
  std::size_t sources = 4;
  std::size_t width = 32;
  std::size_t tokens = 16;
  std::size_t classes = 3;
  std::size_t shared_rank = 4;
  std::size_t source_rank = 2;
  std::size_t samples = 4000;
  std::vector<double> weights{4.0, 2.0, 1.0, 1.0};
  double mean_scale = 3.0;     // norm of each source mean
  double shared_scale = 1.0;   // scale of W_sh·z
  double source_scale = 1.0;   // scale of B_m·u
  double noise = 0.5;          // per-token noise σ_m, same for all sources
  double shared_signal = 1.0;  // scale of the shared label readout V
  double source_signal = 1.0;  // scale of the source label readouts V_m
  // When set, every source's basis spans one common subspace (rotated per
  // source), so the same directions carry source-dependent label meaning.
  bool common_source_subspace = true;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct SourceSpec {
  std::uint32_t id = 0;
  double weight = 1.0;
  std::vector<double> mean;  // μ_m, length D
  Mat basis;                 // B_m, (D × r), orthonormal columns
  double noise = 0.0;        // σ_m
  Mat readout;               // V_m, (C × r)
};

struct GeneratorParams {
  std::size_t width = 0;
  std::size_t tokens = 0;
  std::size_t classes = 0;
  std::vector<SourceSpec> sources;
  Mat shared_basis;    // W_sh, (D × r_sh)
  Mat shared_readout;  // V, (C × r_sh)

  void validate() const;
};

struct Sample {
  Mat tokens;  // (T × D)
  std::uint32_t source = 0;
  std::uint32_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Columns of a (rows × cols) Gaussian matrix orthonormalised by Gram-Schmidt.
Mat random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng);

GeneratorParams make_generator(const DataConfig& config);

// Draws `samples` samples and splits them train/test by a seeded shuffle.
// Token values are rounded to 32-bit precision so that a dataset written to
// and read back from disk is identical to the in-memory one.
Dataset gen_dataset(const GeneratorParams& params, std::size_t samples, double train_fraction,
                    std::uint64_t seed);

Dataset gen_dataset(const DataConfig& config);

// Train on every sample of the other sources, test on every sample of
// `holdout` (both original splits pooled).
Dataset leave_source_out(const Dataset& dataset, std::uint32_t holdout);

std::vector<std::size_t> count_by_source(const std::vector<Sample>& samples, std::size_t sources);

// Stacks the listed samples into one token batch; labels are optional.
TokenBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                      std::vector<std::uint32_t>* labels);

}  // namespace come
