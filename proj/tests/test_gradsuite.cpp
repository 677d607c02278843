#include <gtest/gtest.h>

#include "come/gradsuite.hpp"

using namespace come;

TEST(GradSuite, EveryComponentPasses) {
  const auto rows = run_gradient_suite({});
  ASSERT_FALSE(rows.empty());
  for (const ComponentCheck& r : rows) {
    SCOPED_TRACE(r.component);
    EXPECT_GE(r.instances, 10u);
    EXPECT_EQ(r.non_finite, 0u);
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_TRUE(r.passed);
    std::printf("%-36s %3zu %7zu %.3e\n", r.component.c_str(), r.instances, r.coordinates,
                r.max_rel_error);
  }
}
