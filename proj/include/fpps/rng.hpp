#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace fpps {

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// SplitMix64 engine usable as a UniformRandomBitGenerator.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t state) : state_(state) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Independent substream for the (step, particle) pair under `seed`; the
/// stream depends only on these three counters, never on evaluation order.
inline SplitMix64 substream(std::uint64_t seed, std::uint64_t step, std::uint64_t particle) {
  return SplitMix64(mix64(mix64(mix64(seed) ^ step) ^ (particle * 0xd1b54a32d192ed03ULL)));
}

/// Derives a child seed for a named purpose (truth draw, initial ensemble, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) { return mix64(seed ^ mix64(purpose)); }

}  // namespace fpps
