#include "come/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace come {

Mat random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
  if (cols > rows) {
    throw std::invalid_argument("random_orthonormal: more columns than rows");
  }
  Mat q(rows, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    for (int attempt = 0;; ++attempt) {
      std::vector<double> v(rows);
      for (double& x : v) x = rng.normal();
      // Two Gram-Schmidt passes for numerical orthogonality.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < c; ++p) {
          double dot = 0.0;
          for (std::size_t r = 0; r < rows; ++r) dot += v[r] * q(r, p);
          for (std::size_t r = 0; r < rows; ++r) v[r] -= dot * q(r, p);
        }
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (std::size_t r = 0; r < rows; ++r) q(r, c) = v[r] / norm;
        break;
      }
      if (attempt > 16) throw std::runtime_error("random_orthonormal: degenerate draw");
    }
  }
  return q;
}

void GeneratorParams::validate() const {
  if (width == 0 || tokens == 0 || classes == 0) {
    throw std::invalid_argument("generator: width, tokens and classes must be positive");
  }
  if (sources.empty()) {
    throw std::invalid_argument("generator: at least one source is required");
  }
  if (shared_basis.rows() != width || shared_readout.rows() != classes ||
      shared_readout.cols() != shared_basis.cols()) {
    throw std::invalid_argument("generator: shared basis/readout shapes are inconsistent");
  }
  for (const SourceSpec& s : sources) {
    if (!(s.weight > 0.0)) {
      throw std::invalid_argument("generator: source weights must be positive");
    }
    if (s.mean.size() != width || s.basis.rows() != width || s.readout.rows() != classes ||
        s.readout.cols() != s.basis.cols() || s.noise < 0.0) {
      throw std::invalid_argument("generator: source " + std::to_string(s.id) +
                                  " has inconsistent dimensions");
    }
  }
}

GeneratorParams make_generator(const DataConfig& config) {
  if (config.sources == 0 || config.width == 0 || config.tokens == 0 || config.classes < 2 ||
      config.samples == 0) {
    throw std::invalid_argument("data config: sources, width, tokens, samples must be positive "
                                "and classes at least 2");
  }
  if (config.weights.size() != config.sources) {
    throw std::invalid_argument("data config: expected " + std::to_string(config.sources) +
                                " source weights, got " + std::to_string(config.weights.size()));
  }
  const std::size_t needed = config.shared_rank +
                             config.source_rank * (config.common_source_subspace ? 1 : config.sources);
  if (needed > config.width) {
    throw std::invalid_argument("data config: latent ranks need " + std::to_string(needed) +
                                " dimensions but width is " + std::to_string(config.width));
  }
  Rng rng = Rng::stream(config.seed, RngStream::data).split(0);
  GeneratorParams p;
  p.width = config.width;
  p.tokens = config.tokens;
  p.classes = config.classes;

  // Shared subspace and source subspaces are mutually orthogonal.
  const Mat frame = random_orthonormal(config.width, needed, rng);
  p.shared_basis = Mat(config.width, config.shared_rank);
  for (std::size_t r = 0; r < config.width; ++r)
    for (std::size_t c = 0; c < config.shared_rank; ++c) p.shared_basis(r, c) = frame(r, c);
  p.shared_readout = Mat(config.classes, config.shared_rank);
  for (double& v : p.shared_readout.values()) v = config.shared_signal * rng.normal();

  for (std::size_t m = 0; m < config.sources; ++m) {
    SourceSpec s;
    s.id = static_cast<std::uint32_t>(m);
    s.weight = config.weights[m];
    s.noise = config.noise;
    std::vector<double> dir(config.width);
    double norm = 0.0;
    for (double& x : dir) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    s.mean.resize(config.width);
    for (std::size_t d = 0; d < config.width; ++d) s.mean[d] = config.mean_scale * dir[d] / norm;

    const std::size_t offset =
        config.shared_rank + (config.common_source_subspace ? 0 : m * config.source_rank);
    Mat span(config.width, config.source_rank);
    for (std::size_t r = 0; r < config.width; ++r)
      for (std::size_t c = 0; c < config.source_rank; ++c) span(r, c) = frame(r, offset + c);
    const Mat rotation = random_orthonormal(config.source_rank, config.source_rank, rng);
    s.basis = matmul(span, rotation);
    s.readout = Mat(config.classes, config.source_rank);
    for (double& v : s.readout.values()) v = config.source_signal * rng.normal();
    p.sources.push_back(std::move(s));
  }
  // Scale factors are folded into the bases so that gen_dataset stays
  // parameter-free beyond the specs.
  for (double& v : p.shared_basis.values()) v *= config.shared_scale;
  for (SourceSpec& s : p.sources)
    for (double& v : s.basis.values()) v *= config.source_scale;
  p.validate();
  return p;
}

Dataset gen_dataset(const GeneratorParams& params, std::size_t samples, double train_fraction,
                    std::uint64_t seed) {
  params.validate();
  if (samples == 0) {
    throw std::invalid_argument("gen_dataset: no samples requested");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("gen_dataset: train fraction must lie in (0, 1)");
  }
  Rng rng = Rng::stream(seed, RngStream::data).split(1);
  double total_weight = 0.0;
  for (const SourceSpec& s : params.sources) total_weight += s.weight;

  const std::size_t shared_rank = params.shared_basis.cols();
  std::vector<Sample> all;
  all.reserve(samples);
  for (std::size_t n = 0; n < samples; ++n) {
    double draw = rng.uniform() * total_weight;
    std::size_t m = 0;
    while (m + 1 < params.sources.size() && draw >= params.sources[m].weight) {
      draw -= params.sources[m].weight;
      ++m;
    }
    const SourceSpec& s = params.sources[m];
    std::vector<double> z(shared_rank), u(s.basis.cols());
    for (double& v : z) v = rng.normal();
    for (double& v : u) v = rng.normal();

    std::vector<double> center = s.mean;
    for (std::size_t d = 0; d < params.width; ++d) {
      for (std::size_t r = 0; r < shared_rank; ++r) center[d] += params.shared_basis(d, r) * z[r];
      for (std::size_t r = 0; r < u.size(); ++r) center[d] += s.basis(d, r) * u[r];
    }
    Sample sample;
    sample.source = s.id;
    sample.tokens = Mat(params.tokens, params.width);
    for (std::size_t t = 0; t < params.tokens; ++t)
      for (std::size_t d = 0; d < params.width; ++d) {
        const double v = center[d] + s.noise * rng.normal();
        sample.tokens(t, d) = static_cast<double>(static_cast<float>(v));
      }

    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < params.classes; ++c) {
      double score = 0.0;
      for (std::size_t r = 0; r < shared_rank; ++r) score += params.shared_readout(c, r) * z[r];
      for (std::size_t r = 0; r < u.size(); ++r) score += s.readout(c, r) * u[r];
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    sample.label = static_cast<std::uint32_t>(best);
    all.push_back(std::move(sample));
  }

  std::vector<std::size_t> order(samples);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(samples))), 1,
      samples > 1 ? samples - 1 : 1);
  Dataset out;
  for (std::size_t i = 0; i < samples; ++i) {
    (i < n_train ? out.train : out.test).push_back(std::move(all[order[i]]));
  }
  return out;
}

Dataset gen_dataset(const DataConfig& config) {
  return gen_dataset(make_generator(config), config.samples, config.train_fraction, config.seed);
}

Dataset leave_source_out(const Dataset& dataset, std::uint32_t holdout) {
  Dataset out;
  bool found = false;
  for (const auto* part : {&dataset.train, &dataset.test}) {
    for (const Sample& s : *part) {
      if (s.source == holdout) {
        out.test.push_back(s);
        found = true;
      } else {
        out.train.push_back(s);
      }
    }
  }
  if (!found) {
    throw std::invalid_argument("leave_source_out: no samples of source " +
                                std::to_string(holdout));
  }
  return out;
}

std::vector<std::size_t> count_by_source(const std::vector<Sample>& samples, std::size_t sources) {
  std::vector<std::size_t> counts(sources, 0);
  for (const Sample& s : samples) {
    if (s.source >= sources) {
      throw std::out_of_range("count_by_source: source id out of range");
    }
    ++counts[s.source];
  }
  return counts;
}

TokenBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                      std::vector<std::uint32_t>* labels) {
  if (indices.empty()) {
    throw std::invalid_argument("make_batch: empty batch");
  }
  const std::size_t t = samples[indices[0]].tokens.rows();
  const std::size_t d = samples[indices[0]].tokens.cols();
  TokenBatch batch;
  batch.tokens_per_sample = t;
  batch.tokens = Mat(indices.size() * t, d);
  batch.sources.reserve(indices.size() * t);
  if (labels != nullptr) labels->clear();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples[indices[i]];
    if (s.tokens.rows() != t || s.tokens.cols() != d) {
      throw std::invalid_argument("make_batch: samples have different shapes");
    }
    const auto src = s.tokens.values();
    std::copy(src.begin(), src.end(), batch.tokens.row(i * t).begin());
    batch.sources.insert(batch.sources.end(), t, s.source);
    if (labels != nullptr) labels->push_back(s.label);
  }
  return batch;
}

}  // namespace come
