#pragma once

// Counter-based random streams. Every draw is a pure function of
// (seed, lane, path index, draw index), so ensembles are reproducible
// independent of how paths are scheduled onto threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>

namespace fastslow {

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter apply(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

/// SplitMix64 finalizer; used to turn structured ids into well-mixed keys.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Deterministically derives a child seed from a parent seed and a list of
/// integer tags (cell indices, sample indices, stage ids).
inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::int64_t> tags) {
  std::uint64_t h = mix64(seed ^ 0x5851F42D4C957F2Dull);
  for (std::int64_t tag : tags) {
    h = mix64(h ^ mix64(static_cast<std::uint64_t>(tag) + 0x632BE59BD9B4E019ull));
  }
  return h;
}

/// Disjoint stream families. W¹ and W² never share a lane.
enum class Lane : std::uint32_t {
  kFastNoise = 1,     // W¹ in the coupled system and the frozen equation
  kSlowNoise = 2,     // W² in the coupled system and the limit equation
  kInvariant = 3,     // long frozen trajectories for μ^y
  kCorrector = 4,     // Feynman–Kac paths
  kValidation = 5,    // assumption sampling
};

/// Sequential view of one counter-based stream. Draw k of the stream is
/// block k/2 of Philox under counter (k/2, path) and key (seed, lane).
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, Lane lane, std::uint64_t path) {
    const std::uint64_t k = mix64(seed ^ mix64(static_cast<std::uint64_t>(lane)));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    path_lo_ = static_cast<std::uint32_t>(path);
    path_hi_ = static_cast<std::uint32_t>(path >> 32);
  }

  /// Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() {
    if (uniform_left_ == 0) refill_uniforms();
    return uniform_buffer_[2 - uniform_left_--];
  }

  /// Standard normal by Marsaglia's polar method, buffered in pairs.
  double normal() {
    if (normal_left_ == 0) {
      double u, v, s;
      do {
        u = 2.0 * uniform() - 1.0;
        v = 2.0 * uniform() - 1.0;
        s = u * u + v * v;
      } while (s >= 1.0 || s == 0.0);
      const double m = std::sqrt(-2.0 * std::log(s) / s);
      normal_buffer_ = {u * m, v * m};
      normal_left_ = 2;
    }
    return normal_buffer_[2 - normal_left_--];
  }

  void fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
  }

  std::uint64_t blocks_consumed() const { return block_; }

 private:
  void refill_uniforms() {
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(block_),
                                  static_cast<std::uint32_t>(block_ >> 32),
                                  path_lo_, path_hi_};
    const auto out = Philox4x32::apply(ctr, key_);
    ++block_;
    const std::uint64_t a = (std::uint64_t{out[0]} << 32) | out[1];
    const std::uint64_t b = (std::uint64_t{out[2]} << 32) | out[3];
    constexpr double kScale = 0x1.0p-53;
    uniform_buffer_ = {(static_cast<double>(a >> 11) + 0.5) * kScale,
                       (static_cast<double>(b >> 11) + 0.5) * kScale};
    uniform_left_ = 2;
  }

  Philox4x32::Key key_{};
  std::uint32_t path_lo_ = 0;
  std::uint32_t path_hi_ = 0;
  std::uint64_t block_ = 0;
  std::array<double, 2> uniform_buffer_{};
  int uniform_left_ = 0;
  std::array<double, 2> normal_buffer_{};
  int normal_left_ = 0;
};

}  // namespace fastslow
