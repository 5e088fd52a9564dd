// Deterministic counter-based random numbers. A draw is a pure function of
// (key, counter), so streams can be split for per-sample work without
// coupling the results to execution order.
#pragma once

#include <cstdint>

#include "mdl/tensor.hpp"

namespace mdl {

namespace detail {
// 64-bit finalizer from SplitMix64.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(detail::mix64(seed ^ 0x6a09e667f3bcc908ull)), seed_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // Uniform in (0, 1]: 53 mantissa bits, never exactly zero.
  double next_unit() {
    return (double(next_u64() >> 11) + 1.0) * (1.0 / 9007199254740992.0);
  }

  // Standard normal by Box-Muller; the pair partner is cached.
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = float(r * std::sin(a));
    have_spare_ = true;
    return float(r * std::cos(a));
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // An independent stream derived from this rng's seed and a stream id.
  // Splitting does not disturb this rng's own state.
  Rng split(uint64_t stream) const {
    Rng r(0);
    r.key_ = detail::mix64(key_ ^ detail::mix64(stream ^ 0x85ebca6b4cf5ad43ull));
    r.seed_ = seed_;
    return r;
  }

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  uint64_t seed_ = 0;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

// i.i.d. standard-normal tensor.
inline Tensor sample_normal(Rng& rng, Shape shape) {
  if (shape.rank == 0) fail(Errc::invalid_shape, "sample_normal wants a non-empty shape");
  Tensor t(shape);
  for (float& v : t.data) v = rng.normal();
  return t;
}

}  // namespace mdl
