#include "protossl/core.hpp"

#include <cmath>
#include <numbers>

namespace protossl {

double cosine_sim(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_sim: length mismatch " +
                                std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0) throw std::domain_error("cosine_sim: zero-norm operand u");
  if (nv == 0.0) throw std::domain_error("cosine_sim: zero-norm operand v");
  const double c = u.dot(v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

ZScore zscore_fit_apply(const Eigen::Ref<const Mat>& train,
                        const Eigen::Ref<const Mat>& apply_to) {
  if (train.rows() == 0) throw std::invalid_argument("zscore_fit_apply: empty train matrix");
  if (train.cols() != apply_to.cols()) {
    throw std::invalid_argument("zscore_fit_apply: column mismatch " +
                                std::to_string(train.cols()) + " vs " +
                                std::to_string(apply_to.cols()));
  }
  ZScore z;
  z.means = train.colwise().mean();
  Mat centered = train.rowwise() - z.means.transpose();
  z.stds = (centered.array().square().colwise().mean()).sqrt().transpose();
  z.applied = zscore_apply(apply_to, z.means, z.stds);
  return z;
}

Mat zscore_apply(const Eigen::Ref<const Mat>& x, const Vec& means, const Vec& stds) {
  if (x.cols() != means.size() || x.cols() != stds.size()) {
    throw std::invalid_argument("zscore_apply: column mismatch");
  }
  Vec denom = stds.cwiseMax(kEps);
  Mat out = x.rowwise() - means.transpose();
  out.array().rowwise() /= denom.transpose().array();
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::string_view stream) {
  state_ = seed ^ fnv1a64(stream);
  // Warm up so that nearby seeds decorrelate.
  (void)splitmix64(state_);
  (void)splitmix64(state_);
  origin_ = state_;
}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::gaussian() {
  // u1 in (0,1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::bounded(std::uint64_t n) {
  if (n == 0) throw std::domain_error("Rng::bounded: n must be >= 1");
  const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x >= threshold) return x % n;
  }
}

std::vector<Index> Rng::permutation(Index n) {
  if (n < 1) throw std::domain_error("Rng::permutation: n must be >= 1");
  std::vector<Index> p(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(bounded(static_cast<std::uint64_t>(i) + 1));
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

Index Rng::choice(Index n) {
  if (n < 1) throw std::domain_error("Rng::choice: n must be >= 1");
  return static_cast<Index>(bounded(static_cast<std::uint64_t>(n)));
}

Rng Rng::substream(std::string_view name) const {
  Rng r;
  r.state_ = origin_ ^ fnv1a64(name);
  (void)splitmix64(r.state_);
  (void)splitmix64(r.state_);
  r.origin_ = r.state_;
  return r;
}

bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

}  // namespace protossl
