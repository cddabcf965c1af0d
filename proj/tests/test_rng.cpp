#include <doctest.h>

#include <cmath>
#include <set>

#include "saemx/rng.hpp"

using namespace saemx;

TEST_SUITE("rng") {
  TEST_CASE("mix64 and derive_seed match frozen values") {
    CHECK(mix64(0) == 16294208416658607535ULL);
    CHECK(mix64(42) == 13679457532755275413ULL);
    CHECK(derive_seed(42, {1, 2, 3}) == 4582405886570937924ULL);
    CHECK(derive_seed(42, {3, 2, 1}) == 12342350838377949341ULL);
    CHECK(derive_seed(0, {}) == 16294208416658607535ULL);
    CHECK(derive_seed(20260816, {kStreamReplicate, 0}) == 13136537549756213244ULL);
  }

  TEST_CASE("derive_seed separates kinds, indices, orderings, and bases") {
    std::set<std::uint64_t> seen;
    size_t expected = 0;
    for (std::uint64_t base : {0ULL, 7ULL, 20260816ULL}) {
      for (std::uint64_t kind :
           {kStreamMcmc, kStreamSimulate, kStreamImportance, kStreamReplicate, kStreamPosterior})
        for (std::uint64_t idx : {0ULL, 1ULL, 2ULL, 3ULL}) {
          seen.insert(derive_seed(base, {kind, idx}));
          ++expected;
        }
      seen.insert(derive_seed(base, {kStreamMcmc, 0, 1}));
      seen.insert(derive_seed(base, {kStreamMcmc, 1, 0}));
      expected += 2;
    }
    CHECK(seen.size() == expected);
  }

  TEST_CASE("streams with equal seeds replay the same sequence") {
    RngStream a(123), b(123), c(124);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
      const double x = a.normal();
      all_equal = all_equal && x == b.normal();
      any_diff = any_diff || x != c.normal();
    }
    CHECK(all_equal);
    CHECK(any_diff);
  }

  TEST_CASE("normal_vector equals sequential scalar draws") {
    RngStream a(55), b(55);
    const Eigen::VectorXd v = a.normal_vector(16);
    for (int i = 0; i < 16; ++i) CHECK(v[i] == b.normal());
  }

  TEST_CASE("normal and uniform draws have the right moments") {
    RngStream s(2026);
    const int n = 40000;
    double sum = 0.0, sum2 = 0.0, usum = 0.0;
    double umin = 1.0, umax = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z = s.normal();
      sum += z;
      sum2 += z * z;
      const double u = s.uniform();
      usum += u;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
    }
    const double mean = sum / n, var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 5.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
    CHECK(std::abs(usum / n - 0.5) < 5.0 / std::sqrt(12.0 * n));
    CHECK(umin >= 0.0);
    CHECK(umax < 1.0);
  }
}
