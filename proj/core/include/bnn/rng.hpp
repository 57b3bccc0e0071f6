#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bnn::rng {

// Keyed sub-seed derivation: hash(seed, label). Distinct labels give
// independent streams; adding a new label never perturbs existing ones.
std::uint64_t derive(std::uint64_t seed, std::string_view label);

// Deterministic random stream. All draws are fully specified by
// (seed, label) and do not depend on platform or library internals:
// mt19937_64 output is pinned by the standard and every distribution
// below is implemented here rather than delegated to <random>.
class Stream {
public:
  Stream(std::uint64_t seed, std::string_view label)
      : gen_(derive(seed, label)) {}
  explicit Stream(std::uint64_t raw_seed) : gen_(raw_seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; second value cached.
  double next_normal();

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n);

  // True with probability p. Exact for p <= 0 and p >= 1.
  bool next_bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return next_unit() < p;
  }

private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bnn::rng
