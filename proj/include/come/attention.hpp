#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "come/numerics.hpp"

namespace come {

// Multi-head self-attention over the tokens of each sample. No positional
// encoding: the block is permutation-equivariant within a sample.
struct MhaParams {
  std::size_t heads = 4;
  std::size_t width = 32;
  Mat wq, wk, wv, wo;  // (width × width), stored out × in
  Mat bo;              // (1 × width)

  static MhaParams init(std::size_t width, std::size_t heads, Rng& rng);
  static MhaParams zeros(std::size_t width, std::size_t heads);

  std::size_t head_width() const { return width / heads; }
  void validate() const;

  template <class F>
  void for_each(F&& fn) {
    fn(std::string_view("wq"), wq);
    fn(std::string_view("wk"), wk);
    fn(std::string_view("wv"), wv);
    fn(std::string_view("wo"), wo);
    fn(std::string_view("bo"), bo);
  }
};

struct MhaCache {
  bool valid = false;
  std::size_t segment = 0;
  Mat input;
  Mat q, k, v;
  Mat concat;
  // attention[s * heads + h] is the (segment × segment) row-stochastic matrix
  // of head h in sample s.
  std::vector<Mat> attention;
};

struct MhaGrads {
  MhaParams params;
  Mat input;
};

// `segment` is the number of tokens per sample; rows are split into
// consecutive segments and attention never crosses a segment boundary.
Mat mha_forward(const Mat& tokens, std::size_t segment, const MhaParams& params,
                MhaCache* cache = nullptr);

MhaGrads mha_backward(const Mat& upstream, const MhaParams& params, const MhaCache& cache);

}  // namespace come
