#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace stainfuse {

using Engine = std::mt19937_64;

/// Stable 64-bit identifier for a named stream (FNV-1a).
std::uint64_t stream_id(std::string_view name) noexcept;

/// Mixes a seed with a stream and an index into a new seed. Counter-based:
/// the result depends only on the three inputs, never on call order.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream,
                       std::uint64_t index = 0) noexcept;

/// Named substream of a root seed, e.g. derive_seed(root, "bootstrap").
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) noexcept {
  return mix_seed(root, stream_id(name));
}

inline Engine make_engine(std::uint64_t seed, std::uint64_t stream = 0,
                          std::uint64_t index = 0) {
  return Engine(mix_seed(seed, stream, index));
}

/// Uniform double in [0, 1) with 53 random bits. Used instead of
/// std::uniform_real_distribution where bit-exact draws must be pinned.
inline double uniform01(Engine& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine& engine, double lo, double hi) {
  return lo + (hi - lo) * uniform01(engine);
}

}  // namespace stainfuse
