#include <gtest/gtest.h>

#include <cmath>

#include "come/attention.hpp"

using namespace come;

namespace {

Mat random_tokens(std::size_t n, std::size_t d, Rng& rng) {
  Mat m(n, d);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

// Loop-based reference: every product written out element by element.
Mat naive_attention(const Mat& x, std::size_t segment, const MhaParams& p) {
  const std::size_t d = p.width, h = p.heads, dk = d / h;
  auto project = [&](const Mat& w, std::size_t t, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += w(c, i) * x(t, i);
    return s;
  };
  Mat concat(x.rows(), d);
  for (std::size_t start = 0; start < x.rows(); start += segment) {
    for (std::size_t head = 0; head < h; ++head) {
      for (std::size_t a = 0; a < segment; ++a) {
        std::vector<double> scores(segment);
        double mx = -INFINITY;
        for (std::size_t b = 0; b < segment; ++b) {
          double s = 0.0;
          for (std::size_t c = head * dk; c < (head + 1) * dk; ++c)
            s += project(p.wq, start + a, c) * project(p.wk, start + b, c);
          scores[b] = s / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, scores[b]);
        }
        double z = 0.0;
        for (double& s : scores) z += (s = std::exp(s - mx));
        for (std::size_t c = head * dk; c < (head + 1) * dk; ++c) {
          double acc = 0.0;
          for (std::size_t b = 0; b < segment; ++b) acc += scores[b] / z * project(p.wv, start + b, c);
          concat(start + a, c) = acc;
        }
      }
    }
  }
  Mat out(x.rows(), d);
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t o = 0; o < d; ++o) {
      double s = p.bo(0, o);
      for (std::size_t i = 0; i < d; ++i) s += p.wo(o, i) * concat(t, i);
      out(t, o) = s;
    }
  return out;
}

}  // namespace

TEST(Attention, MatchesNaiveReference) {
  Rng rng(21);
  for (std::size_t heads : {1u, 2u, 4u}) {
    MhaParams p = MhaParams::init(8, heads, rng);
    for (double& v : p.bo.values()) v = rng.normal();
    const Mat x = random_tokens(12, 8, rng);
    EXPECT_LT(max_abs_diff(mha_forward(x, 4, p), naive_attention(x, 4, p)), 1e-10);
  }
}

TEST(Attention, SingleTokenReducesToValueOutputMap) {
  Rng rng(1);
  const MhaParams p = MhaParams::init(8, 2, rng);
  const Mat x = random_tokens(1, 8, rng);
  const Mat expected = linear(linear(x, p.wv, Mat()), p.wo, p.bo);
  EXPECT_LT(max_abs_diff(mha_forward(x, 1, p), expected), 1e-12);
}

TEST(Attention, IdenticalTokensGiveIdenticalOutputs) {
  Rng rng(2);
  const MhaParams p = MhaParams::init(8, 4, rng);
  const Mat one = random_tokens(1, 8, rng);
  Mat x(5, 8);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 8; ++c) x(t, c) = one(0, c);
  const Mat y = mha_forward(x, 5, p);
  const Mat single = mha_forward(one, 1, p);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y(t, c), single(0, c), 1e-12);
}

TEST(Attention, PermutationEquivariantWithinSample) {
  Rng rng(3);
  const MhaParams p = MhaParams::init(8, 2, rng);
  const Mat x = random_tokens(6, 8, rng);
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  const Mat y = mha_forward(x, 6, p);
  const Mat yp = mha_forward(gather_rows(x, perm), 6, p);
  EXPECT_LT(max_abs_diff(yp, gather_rows(y, perm)), 1e-12);
}

TEST(Attention, SamplesDoNotInteract) {
  Rng rng(4);
  const MhaParams p = MhaParams::init(8, 2, rng);
  Mat x = random_tokens(8, 8, rng);
  const Mat y = mha_forward(x, 4, p);
  for (std::size_t c = 0; c < 8; ++c) x(6, c) += 10.0;
  const Mat y2 = mha_forward(x, 4, p);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y(t, c), y2(t, c));
}

TEST(Attention, AttentionRowsAreStochastic) {
  Rng rng(5);
  const MhaParams p = MhaParams::init(8, 4, rng);
  MhaCache cache;
  mha_forward(random_tokens(8, 8, rng), 4, p, &cache);
  ASSERT_EQ(cache.attention.size(), 2u * 4u);
  for (const Mat& a : cache.attention)
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double s = 0.0;
      for (double v : a.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Attention, ZeroUpstreamGivesZeroGradients) {
  Rng rng(6);
  const MhaParams p = MhaParams::init(8, 2, rng);
  MhaCache cache;
  const Mat x = random_tokens(4, 8, rng);
  mha_forward(x, 4, p, &cache);
  MhaGrads g = mha_backward(Mat(4, 8), p, cache);
  EXPECT_EQ(max_abs(g.input), 0.0);
  g.params.for_each([](std::string_view, Mat& m) { EXPECT_EQ(max_abs(m), 0.0); });
}

TEST(Attention, BackwardMatchesFiniteDifferences) {
  Rng rng(7);
  MhaParams p = MhaParams::init(8, 2, rng);
  const Mat x = random_tokens(6, 8, rng);
  const Mat up = random_tokens(6, 8, rng);
  MhaCache cache;
  mha_forward(x, 3, p, &cache);
  MhaGrads g = mha_backward(up, p, cache);
  auto loss_of = [&](const Mat& in) {
    const Mat y = mha_forward(in, 3, p);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * up.values()[i];
    return s;
  };
  const auto r = grad_check(
      [&](std::span<const double> v) {
        return loss_of(Mat(x.rows(), x.cols(), std::vector<double>(v.begin(), v.end())));
      },
      x.values(), g.input.values());
  EXPECT_LT(r.max_rel_error, 1e-6);

  std::vector<Mat*> params;
  std::vector<const Mat*> grads;
  p.for_each([&](std::string_view, Mat& m) { params.push_back(&m); });
  g.params.for_each([&](std::string_view, Mat& m) { grads.push_back(&m); });
  const auto rp = grad_check_params([&] { return loss_of(x); }, params, grads);
  EXPECT_LT(rp.max_rel_error, 1e-6);
}

TEST(Attention, RejectsBadShapesAndMissingCache) {
  Rng rng(8);
  const MhaParams p = MhaParams::init(8, 2, rng);
  EXPECT_THROW(mha_forward(Mat(4, 6), 4, p), std::invalid_argument);
  EXPECT_THROW(mha_forward(Mat(5, 8), 4, p), std::invalid_argument);
  EXPECT_THROW(MhaParams::init(8, 3, rng), std::invalid_argument);
  EXPECT_THROW(mha_backward(Mat(4, 8), p, MhaCache{}), std::logic_error);
}
