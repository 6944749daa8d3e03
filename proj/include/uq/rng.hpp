#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace uq {

/// Deterministic 64-bit generator (splitmix64). Self-contained so that
/// seeded runs reproduce bit for bit on any platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free multiply-shift would bias tiny n ranges negligibly,
    // but we keep exact uniformity with rejection sampling.
    const std::uint64_t limit = n * ((~0ULL) / n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates shuffle with this generator, independent of std::shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Stable derivation of a stream seed from a master seed and an index.
/// Adding streams never perturbs earlier ones.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  Rng r(master ^ (0xa0761d6478bd642fULL * (index + 1)));
  return r.next_u64();
}

/// Standard normal via Box-Muller (cosine branch only, deterministic).
inline double sample_normal(Rng& rng) {
  const double u1 = 1.0 - rng.uniform();  // (0, 1], keeps the log finite
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Gamma(alpha, 1) via Marsaglia-Tsang squeeze, with the alpha < 1 boost.
inline double sample_gamma(Rng& rng, double alpha) {
  if (alpha < 1.0) {
    const double u = rng.uniform();
    return sample_gamma(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    const double x = sample_normal(rng);
    const double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    const double v = t * t * t;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// Symmetric Dirichlet(alpha) draw over `classes` categories: normalized
/// independent gammas. alpha < 1 concentrates mass near simplex corners,
/// which is exactly the regime the uncertainty-bound property tests need.
inline std::vector<double> sample_dirichlet(Rng& rng, double alpha,
                                            std::size_t classes) {
  std::vector<double> p(classes);
  double sum = 0.0;
  for (double& v : p) {
    v = sample_gamma(rng, alpha);
    sum += v;
  }
  if (sum <= 0.0) {  // all gammas underflowed; fall back to a corner
    p.assign(classes, 0.0);
    p[rng.below(classes)] = 1.0;
    return p;
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace uq
