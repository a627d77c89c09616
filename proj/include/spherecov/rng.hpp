#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace spherecov {

// Counter-based generator (Philox2x64, 10 rounds). Draw i on a given stream is
// a pure function of (seed, stream, i), so simulations are reproducible under
// any evaluation order and replicates can be generated independently.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  [[nodiscard]] static std::array<std::uint64_t, 2> philox2x64(std::uint64_t c0, std::uint64_t c1,
                                                               std::uint64_t key) {
    constexpr std::uint64_t mult = 0xD2B74407B1CE6E93ull;
    constexpr std::uint64_t key_bump = 0x9E3779B97F4A7C15ull;
    for (int round = 0; round < 10; ++round) {
      const unsigned __int128 prod = static_cast<unsigned __int128>(mult) * c0;
      const auto hi = static_cast<std::uint64_t>(prod >> 64);
      const auto lo = static_cast<std::uint64_t>(prod);
      c0 = hi ^ key ^ c1;
      c1 = lo;
      key += key_bump;
    }
    return {c0, c1};
  }

  [[nodiscard]] std::array<std::uint64_t, 2> block(std::uint64_t i) const {
    return philox2x64(i, stream_, seed_);
  }

  // Uniform on (0, 1]: zero is excluded so logs stay finite.
  [[nodiscard]] double uniform(std::uint64_t i) const {
    return to_unit(block(i)[0]);
  }

  // Standard normal via Box-Muller (cosine branch); draw i consumes counter i only.
  [[nodiscard]] double normal(std::uint64_t i) const {
    const auto words = block(i);
    const double u1 = to_unit(words[0]);
    const double u2 = to_unit(words[1]);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::uint64_t stream() const { return stream_; }

 private:
  [[nodiscard]] static double to_unit(std::uint64_t word) {
    return static_cast<double>((word >> 11) + 1) * 0x1.0p-53;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
};

}  // namespace spherecov
