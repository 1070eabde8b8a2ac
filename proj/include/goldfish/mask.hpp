#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "goldfish/textio.hpp"

namespace goldfish {

enum class MaskStrategy { None, Static, Random, Hashed };

std::string_view to_string(MaskStrategy s);
MaskStrategy parse_mask_strategy(std::string_view name);

struct MaskConfig {
  MaskStrategy strategy = MaskStrategy::None;
  int k = 4;   // drop frequency, >= 2
  int h = 13;  // hash context width, hashed strategy only
  std::uint64_t seed = 0;

  /// Throws ConfigError. Strategy None accepts any k.
  void validate() const;
  /// Short label such as "none", "static-3", "hashed-4-h13".
  std::string label() const;
};

/// Per-position supervision bits. Bit i weights the loss on predicting token i.
struct MaskVector {
  std::vector<std::uint8_t> bits;
  std::size_t supervised_count = 0;

  std::size_t size() const { return bits.size(); }
  bool dropped(std::size_t i) const { return bits[i] == 0; }

  static MaskVector from_bits(std::vector<std::uint8_t> bits);
};

MaskVector all_ones_mask(std::size_t length);

/// Drops the k-th, 2k-th, ... token: bit i is 0 iff (i + 1) % k == 0.
MaskVector static_mask(std::size_t length, int k);

/// Each bit independently 0 with probability 1/k, keyed by (seed, sequence_id, position).
MaskVector random_mask(std::size_t length, int k, std::uint64_t seed, std::uint64_t sequence_id);

/// FNV-1a 64 over each id as 4 little-endian bytes; the seed is XORed into the
/// offset basis.
std::uint64_t hash_window(std::span<const Token> window, std::uint64_t seed);

/// True iff hash / 2^64 < 1/k, evaluated exactly.
bool hash_below_inverse_k(std::uint64_t hash, int k);

/// Bit i is 1 for i < h; otherwise 0 iff hash_window(ids[i-h, i), seed) / 2^64 < 1/k.
MaskVector hashed_mask(std::span<const Token> tokens, int k, int h, std::uint64_t seed);

/// Dispatches on cfg.strategy. `sequence_id` only matters for the random strategy.
MaskVector make_mask(std::span<const Token> tokens, const MaskConfig& cfg, std::uint64_t sequence_id);

}  // namespace goldfish
