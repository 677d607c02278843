#include <gtest/gtest.h>

#include <cmath>

#include "come/datagen.hpp"

using namespace come;

namespace {

DataConfig small_config() {
  DataConfig c;
  c.width = 16;
  c.tokens = 4;
  c.samples = 200;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Datagen, SourceCountsFollowWeights) {
  DataConfig c = small_config();
  c.weights = {3.0, 1.0, 1.0, 1.0};
  c.samples = 6000;
  c.tokens = 1;
  const Dataset d = gen_dataset(c);
  auto counts = count_by_source(d.train, 4);
  const auto test_counts = count_by_source(d.test, 4);
  for (std::size_t m = 0; m < 4; ++m) counts[m] += test_counts[m];
  for (std::size_t m = 0; m < 4; ++m) {
    const double p = c.weights[m] / 6.0;
    const double mean = 6000.0 * p;
    const double sd = std::sqrt(6000.0 * p * (1.0 - p));
    EXPECT_LE(std::abs(static_cast<double>(counts[m]) - mean), 3.0 * sd) << "source " << m;
  }
}

TEST(Datagen, DeterministicPerSeed) {
  const DataConfig c = small_config();
  const Dataset a = gen_dataset(c);
  const Dataset b = gen_dataset(c);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  DataConfig other = c;
  other.seed = 4;
  EXPECT_NE(gen_dataset(other).train, a.train);
}

TEST(Datagen, SplitSizesAndShapes) {
  const DataConfig c = small_config();
  const Dataset d = gen_dataset(c);
  EXPECT_EQ(d.train.size(), 160u);
  EXPECT_EQ(d.test.size(), 40u);
  for (const Sample& s : d.train) {
    EXPECT_EQ(s.tokens.rows(), 4u);
    EXPECT_EQ(s.tokens.cols(), 16u);
    EXPECT_LT(s.source, 4u);
    EXPECT_LT(s.label, 3u);
    for (double v : s.tokens.values()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(Datagen, SourceMeansAreSeparated) {
  DataConfig c = small_config();
  c.samples = 2000;
  const GeneratorParams g = make_generator(c);
  const Dataset d = gen_dataset(c);
  // The empirical mean of each source's tokens sits near its generator mean.
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<double> mean(16, 0.0);
    double n = 0.0;
    for (const Sample& s : d.train) {
      if (s.source != m) continue;
      for (std::size_t t = 0; t < s.tokens.rows(); ++t) {
        for (std::size_t k = 0; k < 16; ++k) mean[k] += s.tokens(t, k);
        n += 1.0;
      }
    }
    double err = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < 16; ++k) {
      err += std::pow(mean[k] / n - g.sources[m].mean[k], 2);
      norm += std::pow(g.sources[m].mean[k], 2);
    }
    EXPECT_NEAR(std::sqrt(norm), c.mean_scale, 1e-9);
    EXPECT_LT(std::sqrt(err), 0.5);
  }
}

TEST(Datagen, OrthonormalBasis) {
  Rng rng(1);
  const Mat b = random_orthonormal(10, 4, rng);
  const Mat g = matmul_tn(b, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g(i, j), i == j ? 1.0 : 0.0, 1e-12);
  EXPECT_THROW(random_orthonormal(3, 4, rng), std::invalid_argument);
}

TEST(Datagen, LeaveSourceOut) {
  const Dataset d = gen_dataset(small_config());
  const Dataset l = leave_source_out(d, 2);
  EXPECT_EQ(l.train.size() + l.test.size(), 200u);
  for (const Sample& s : l.train) EXPECT_NE(s.source, 2u);
  for (const Sample& s : l.test) EXPECT_EQ(s.source, 2u);
  EXPECT_THROW(leave_source_out(d, 9), std::invalid_argument);
}

TEST(Datagen, RejectsBadConfig) {
  DataConfig c = small_config();
  c.weights = {1.0, 1.0};
  EXPECT_THROW(make_generator(c), std::invalid_argument);
  c = small_config();
  c.weights[0] = -1.0;
  EXPECT_THROW(make_generator(c), std::invalid_argument);
  c = small_config();
  c.train_fraction = 1.5;
  EXPECT_THROW(gen_dataset(c), std::invalid_argument);
}

TEST(Datagen, MakeBatchStacksTokens) {
  const Dataset d = gen_dataset(small_config());
  std::vector<std::uint32_t> labels;
  const std::vector<std::size_t> idx{3, 0};
  const TokenBatch b = make_batch(d.train, idx, &labels);
  EXPECT_EQ(b.tokens.rows(), 8u);
  EXPECT_EQ(b.tokens_per_sample, 4u);
  EXPECT_EQ(labels, (std::vector<std::uint32_t>{d.train[3].label, d.train[0].label}));
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(b.tokens(4, k), d.train[0].tokens(0, k));
}
