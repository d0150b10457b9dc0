#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace protossl {

// Dense double-precision, row-major storage throughout. Files store f32
// (see tensorio.hpp); all arithmetic stays in double.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kEps = 1e-8;  // floor for norms and std deviations

/// Cosine similarity of two vectors, clamped to [-1, 1] against rounding.
/// Throws std::domain_error naming the offending operand on a zero-norm input.
double cosine_sim(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v);

struct ZScore {
  Mat applied;
  Vec means;
  Vec stds;  // population (divide-by-n) std, unfloored
};

/// Per-column (x - mean) / max(std, kEps), statistics from `train` only.
ZScore zscore_fit_apply(const Eigen::Ref<const Mat>& train,
                        const Eigen::Ref<const Mat>& apply_to);

/// Apply previously fitted z-score statistics.
Mat zscore_apply(const Eigen::Ref<const Mat>& x, const Vec& means, const Vec& stds);

// Deterministic seeded generator. Identical (seed, stream, call sequence)
// produces identical output on every platform: the engine is splitmix64 and
// all distributions are derived from it by hand, never via <random>
// distribution objects (whose output is implementation-defined).
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  std::uint64_t next_u64();
  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (one value per call).
  double gaussian();
  /// Unbiased integer in [0, n). Throws std::domain_error for n = 0.
  std::uint64_t bounded(std::uint64_t n);
  /// Fisher-Yates permutation of 0..n-1. Throws std::domain_error for n = 0.
  std::vector<Index> permutation(Index n);
  /// Uniform index in [0, n). Throws std::domain_error for n = 0.
  Index choice(Index n);

  /// Independent generator derived from this one's construction-time state;
  /// insensitive to how many values have been drawn since.
  Rng substream(std::string_view name) const;

 private:
  Rng() = default;
  std::uint64_t state_{0};
  std::uint64_t origin_{0};
};

/// True iff every entry is finite.
bool all_finite(const Eigen::Ref<const Mat>& m);

}  // namespace protossl
