#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "trtsmc/errors.hpp"

namespace trtsmc {

/// Philox4x32-10 counter-based block function (Salmon et al., SC'11).
/// Maps a 128-bit counter and a 64-bit key to 128 random bits; no state.
class Philox4x32 {
public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr Counter block(Counter ctr, Key key) noexcept {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kW0;
        key[1] += kW1;
      }
      const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    }
    return ctr;
  }

private:
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;
};

/// Independent random stream addressed by (seed, stream id). Draw n of a
/// stream is a pure function of (seed, stream, n), so any partition of the
/// streams across threads yields the same numbers.
///
/// Satisfies std::uniform_random_bit_generator with 64-bit output.
class RandomStream {
public:
  using result_type = std::uint64_t;

  RandomStream() = default;
  RandomStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t position = 0) noexcept
      : seed_(seed), stream_(stream), block_(position / 2), lane_(static_cast<unsigned>(position % 2)) {
    if (lane_ != 0) refill();
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    if (lane_ == 0) refill();
    const result_type out = (result_type{buffer_[2 * lane_]} << 32) | buffer_[2 * lane_ + 1];
    lane_ ^= 1u;
    if (lane_ == 0) ++block_;
    return out;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  /// Number of 64-bit draws consumed so far.
  std::uint64_t position() const noexcept { return block_ * 2 + lane_; }

private:
  void refill() noexcept {
    const Philox4x32::Counter ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                  static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    buffer_ = Philox4x32::block(ctr, key);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t block_ = 0;
  unsigned lane_ = 0;
  Philox4x32::Counter buffer_{};
};

/// Child seed for a labelled sub-computation, e.g. (episode, env step).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
  const Philox4x32::Counter ctr{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                                static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32) ^ 0x5eed5eedu};
  const Philox4x32::Key key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  const auto out = Philox4x32::block(ctr, key);
  return (std::uint64_t{out[0]} << 32) | out[1];
}

template <class Rng>
double uniform01(Rng& rng) {
  if constexpr (requires { rng.uniform(); }) {
    return rng.uniform();
  } else {
    return static_cast<double>(static_cast<std::uint64_t>(rng() - Rng::min()) >> 11) * 0x1.0p-53;
  }
}

/// Inverse-CDF draw from an unnormalized non-negative weight vector.
/// Zero-weight entries are never returned.
template <class Rng>
std::size_t sample_categorical(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw ContractViolation("sample_categorical: weights sum to zero");
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

/// Repeated inverse-CDF draws from one weight vector by binary search over
/// its cumulative sums. For the same generator state it returns exactly the
/// index sample_categorical() would.
class CategoricalSampler {
public:
  explicit CategoricalSampler(std::span<const double> weights) : cumulative_(weights.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      total_ += weights[i];
      if (weights[i] > 0.0) {
        acc += weights[i];
        last_positive_ = i;
      }
      cumulative_[i] = acc;
    }
    if (!(total_ > 0.0)) throw ContractViolation("CategoricalSampler: weights sum to zero");
  }

  template <class Rng>
  std::size_t operator()(Rng& rng) const {
    const double u = uniform01(rng) * total_;
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return it == cumulative_.end() ? last_positive_ : static_cast<std::size_t>(it - cumulative_.begin());
  }

private:
  std::vector<double> cumulative_;
  double total_ = 0.0;
  std::size_t last_positive_ = 0;
};

}  // namespace trtsmc
