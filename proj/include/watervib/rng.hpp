#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace watervib {

// All randomness in the project flows through this header. std::mt19937_64 is
// fully specified by the standard, and the uniform/normal transforms below are
// fixed algorithms, so identical seeds give identical draws on every platform.
// (The distribution adaptors in <random> are implementation-defined and are
// deliberately not used.)

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives the seed of a named sub-stream from a root seed, so that e.g. the
/// attack draws can change without perturbing weight initialization.
inline std::uint64_t stream_seed(std::uint64_t root, std::string_view purpose) {
  std::uint64_t st = root ^ fnv1a64(purpose);
  return splitmix64(st);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1]; safe as a log() argument.
  double uniform01_open() {
    return static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) { return eng_() % n; }

  /// Standard normal via Box-Muller (pair cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01_open();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Convenience: the rng of a named sub-stream.
inline Rng stream_rng(std::uint64_t root, std::string_view purpose) {
  return Rng(stream_seed(root, purpose));
}

}  // namespace watervib
