#pragma once

// Seeded random source with distribution code written out explicitly, so a
// seed produces the same stream on every standard library (the <random>
// distributions are implementation-defined; the mt19937_64 engine is not).

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>

namespace mfsan {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second variate.
  double normal();

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t index(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Text round trip of the full state (engine plus cached normal).
  std::string state() const;
  void set_state(const std::string& s);

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.engine_ == b.engine_ && a.has_spare_ == b.has_spare_ && a.spare_ == b.spare_;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derive an independent stream seed from a base seed and a stream tag
// (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace mfsan
