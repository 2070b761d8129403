#pragma once

#include <cstdint>

namespace cir {

/// xoshiro256** seeded through splitmix64. Normal draws use Box-Muller with a
/// cached second variate, so the output stream depends only on seed and call
/// order. std:: distributions are avoided because their output is
/// implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits of mantissa.
  double uniform();
  /// Uniform integer on [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Fork an independent stream keyed by a tag; does not advance this one.
  SeededRng fork(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cir
