#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace saemx {

// SplitMix64 finalizer; good avalanche, used to derive independent stream seeds
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Hash-chain a base seed with a path of integers.  Callers keep paths
// canonical (a Stream kind first, then indices such as replicate, chain,
// subject), which keeps the stream families disjoint and reproducible no
// matter in which order (or on which worker) they run.  The fold is
// statistical, not cryptographic: contrived paths (an element whose hash
// cancels the running state) can collide.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t x : path) h = mix64(h ^ mix64(x));
  return h;
}

// stream kinds, so the same (seed, subject) pair never collides across uses
enum Stream : std::uint64_t {
  kStreamMcmc = 1,
  kStreamSimulate = 2,
  kStreamImportance = 3,
  kStreamReplicate = 4,
  kStreamPosterior = 5,
};

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return unif_(eng_); }
  double normal() { return norm_(eng_); }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = norm_(eng_);
    return z;
  }

 private:
  std::mt19937_64 eng_;
  std::normal_distribution<double> norm_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace saemx
