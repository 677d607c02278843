#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "come/numerics.hpp"

namespace come {

// Token feature vectors for a mini-batch of samples. Tokens of one sample are
// contiguous; `tokens_per_sample` splits rows into samples for attention and
// pooling.
struct TokenBatch {
  Mat tokens;
  std::vector<std::uint32_t> sources;  // one per token
  std::size_t tokens_per_sample = 1;

  std::size_t token_count() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }
  std::size_t sample_count() const {
    return tokens_per_sample == 0 ? 0 : tokens.rows() / tokens_per_sample;
  }
};

}  // namespace come
