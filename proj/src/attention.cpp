#include "come/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace come {

namespace {

Mat uniform_mat(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Mat m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

MhaParams MhaParams::init(std::size_t width, std::size_t heads, Rng& rng) {
  MhaParams p = zeros(width, heads);
  const double bound = std::sqrt(1.0 / static_cast<double>(width));
  p.wq = uniform_mat(width, width, bound, rng);
  p.wk = uniform_mat(width, width, bound, rng);
  p.wv = uniform_mat(width, width, bound, rng);
  p.wo = uniform_mat(width, width, bound, rng);
  return p;
}

MhaParams MhaParams::zeros(std::size_t width, std::size_t heads) {
  MhaParams p;
  p.width = width;
  p.heads = heads;
  p.validate();
  p.wq = Mat(width, width);
  p.wk = Mat(width, width);
  p.wv = Mat(width, width);
  p.wo = Mat(width, width);
  p.bo = Mat(1, width);
  return p;
}

void MhaParams::validate() const {
  if (heads == 0 || width == 0 || width % heads != 0) {
    throw std::invalid_argument("MhaParams: width " + std::to_string(width) +
                                " must be a positive multiple of heads " + std::to_string(heads));
  }
}

Mat mha_forward(const Mat& tokens, std::size_t segment, const MhaParams& params, MhaCache* cache) {
  params.validate();
  if (tokens.cols() != params.width) {
    throw std::invalid_argument("mha_forward: token width " + std::to_string(tokens.cols()) +
                                " does not match model width " + std::to_string(params.width));
  }
  if (segment == 0 || tokens.rows() % segment != 0) {
    throw std::invalid_argument("mha_forward: token count is not a multiple of the segment");
  }
  const std::size_t heads = params.heads;
  const std::size_t dk = params.head_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const std::size_t samples = tokens.rows() / segment;

  Mat q = matmul_nt(tokens, params.wq);
  Mat k = matmul_nt(tokens, params.wk);
  Mat v = matmul_nt(tokens, params.wv);
  Mat concat(tokens.rows(), params.width);
  std::vector<Mat> attention;
  if (cache != nullptr) attention.reserve(samples * heads);

  Mat scores(segment, segment);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t base = s * segment;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      for (std::size_t i = 0; i < segment; ++i) {
        for (std::size_t j = 0; j < segment; ++j) {
          double dot = 0.0;
          for (std::size_t d = 0; d < dk; ++d) dot += q(base + i, off + d) * k(base + j, off + d);
          scores(i, j) = dot * scale;
        }
      }
      softmax_rows_inplace(scores);
      for (std::size_t i = 0; i < segment; ++i) {
        for (std::size_t j = 0; j < segment; ++j) {
          const double a = scores(i, j);
          for (std::size_t d = 0; d < dk; ++d) concat(base + i, off + d) += a * v(base + j, off + d);
        }
      }
      if (cache != nullptr) attention.push_back(scores);
    }
  }

  Mat out = linear(concat, params.wo, params.bo);
  if (cache != nullptr) {
    cache->valid = true;
    cache->segment = segment;
    cache->input = tokens;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->attention = std::move(attention);
  }
  return out;
}

MhaGrads mha_backward(const Mat& upstream, const MhaParams& params, const MhaCache& cache) {
  if (!cache.valid) {
    throw std::logic_error("mha_backward: no cached forward pass");
  }
  if (upstream.rows() != cache.input.rows() || upstream.cols() != params.width) {
    throw std::invalid_argument("mha_backward: upstream gradient shape mismatch");
  }
  const std::size_t heads = params.heads;
  const std::size_t dk = params.head_width();
  const std::size_t segment = cache.segment;
  const std::size_t samples = cache.input.rows() / segment;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  MhaGrads grads{MhaParams::zeros(params.width, heads), Mat()};
  grads.params.wo = matmul_tn(upstream, cache.concat);
  grads.params.bo = column_sums(upstream);
  const Mat d_concat = matmul(upstream, params.wo);

  Mat dq(cache.q.rows(), cache.q.cols());
  Mat dk_(cache.k.rows(), cache.k.cols());
  Mat dv(cache.v.rows(), cache.v.cols());
  Mat d_attn(segment, segment);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t base = s * segment;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      const Mat& a = cache.attention[s * heads + h];
      // dA = dO · Vᵀ and dV = Aᵀ · dO
      for (std::size_t i = 0; i < segment; ++i) {
        for (std::size_t j = 0; j < segment; ++j) {
          double dot = 0.0;
          for (std::size_t d = 0; d < dk; ++d) {
            dot += d_concat(base + i, off + d) * cache.v(base + j, off + d);
            dv(base + j, off + d) += a(i, j) * d_concat(base + i, off + d);
          }
          d_attn(i, j) = dot;
        }
      }
      // softmax backward, then the scaled dot-product
      for (std::size_t i = 0; i < segment; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < segment; ++j) inner += a(i, j) * d_attn(i, j);
        for (std::size_t j = 0; j < segment; ++j) {
          const double ds = a(i, j) * (d_attn(i, j) - inner) * scale;
          if (ds == 0.0) continue;
          for (std::size_t d = 0; d < dk; ++d) {
            dq(base + i, off + d) += ds * cache.k(base + j, off + d);
            dk_(base + j, off + d) += ds * cache.q(base + i, off + d);
          }
        }
      }
    }
  }

  grads.params.wq = matmul_tn(dq, cache.input);
  grads.params.wk = matmul_tn(dk_, cache.input);
  grads.params.wv = matmul_tn(dv, cache.input);
  grads.input = matmul(dq, params.wq);
  add_inplace(grads.input, matmul(dk_, params.wk));
  add_inplace(grads.input, matmul(dv, params.wv));
  return grads;
}

}  // namespace come
