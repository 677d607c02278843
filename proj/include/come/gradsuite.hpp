#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "come/model.hpp"

namespace come {

struct ComponentCheck {
  std::string component;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::size_t non_finite = 0;
  bool passed = false;
};

struct GradSuiteOptions {
  std::size_t seeds = 10;
  std::uint64_t first_seed = 1;
  double step = 1e-5;
  double tolerance = 1e-4;
};

// Small model used by the finite-difference suite: D=8, 2 heads, 2 samples
// of 4 tokens from 2 sources, 4 experts, K=2.
ModelConfig gradcheck_model_config();

// Checks every trainable component composed with the total loss, plus each
// loss term on its own input, on `seeds` random instances.
std::vector<ComponentCheck> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace come
