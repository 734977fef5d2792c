#pragma once

#include <zlib.h>

#include <cstdint>
#include <random>
#include <string_view>

namespace pmmrec {

using Rng = std::mt19937_64;

/// Deterministically derives an independent seed for a named consumer
/// ("init.text_encoder", "batches.epoch3", ...) from a root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  const auto tag_hash = static_cast<std::uint64_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(tag.data()), static_cast<uInt>(tag.size())));
  // splitmix64 finalizer over the combined word
  std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (tag_hash + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index) {
  return derive_seed(derive_seed(root, tag) + index, "#");
}

}  // namespace pmmrec
