#include "goldfish/mask.hpp"

#include "goldfish/errors.hpp"

namespace goldfish {
namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void require_k(int k) {
  if (k < 2) throw ConfigError("drop frequency k must be >= 2, got " + std::to_string(k));
}

}  // namespace

std::string_view to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::None: return "none";
    case MaskStrategy::Static: return "static";
    case MaskStrategy::Random: return "random";
    case MaskStrategy::Hashed: return "hashed";
  }
  return "none";
}

MaskStrategy parse_mask_strategy(std::string_view name) {
  if (name == "none" || name == "standard") return MaskStrategy::None;
  if (name == "static") return MaskStrategy::Static;
  if (name == "random") return MaskStrategy::Random;
  if (name == "hashed" || name == "hash") return MaskStrategy::Hashed;
  throw ConfigError("unknown mask strategy: " + std::string(name));
}

void MaskConfig::validate() const {
  if (strategy == MaskStrategy::None) return;
  require_k(k);
  if (strategy == MaskStrategy::Hashed && h < 1) {
    throw ConfigError("hash context width h must be >= 1, got " + std::to_string(h));
  }
}

std::string MaskConfig::label() const {
  switch (strategy) {
    case MaskStrategy::None: return "none";
    case MaskStrategy::Static: return "static-" + std::to_string(k);
    case MaskStrategy::Random: return "random-" + std::to_string(k);
    case MaskStrategy::Hashed: return "hashed-" + std::to_string(k) + "-h" + std::to_string(h);
  }
  return "none";
}

MaskVector MaskVector::from_bits(std::vector<std::uint8_t> bits) {
  MaskVector m;
  m.bits = std::move(bits);
  for (const auto b : m.bits) m.supervised_count += b != 0;
  return m;
}

MaskVector all_ones_mask(std::size_t length) {
  MaskVector m;
  m.bits.assign(length, 1);
  m.supervised_count = length;
  return m;
}

MaskVector static_mask(std::size_t length, int k) {
  require_k(k);
  std::vector<std::uint8_t> bits(length, 1);
  for (std::size_t i = static_cast<std::size_t>(k) - 1; i < length; i += static_cast<std::size_t>(k)) bits[i] = 0;
  return MaskVector::from_bits(std::move(bits));
}

bool hash_below_inverse_k(std::uint64_t hash, int k) {
  return static_cast<unsigned __int128>(hash) * static_cast<unsigned>(k) <
         (static_cast<unsigned __int128>(1) << 64);
}

MaskVector random_mask(std::size_t length, int k, std::uint64_t seed, std::uint64_t sequence_id) {
  require_k(k);
  const std::uint64_t key = splitmix64(splitmix64(seed) ^ sequence_id);
  std::vector<std::uint8_t> bits(length, 1);
  for (std::size_t i = 0; i < length; ++i) {
    if (hash_below_inverse_k(splitmix64(key ^ splitmix64(i)), k)) bits[i] = 0;
  }
  return MaskVector::from_bits(std::move(bits));
}

std::uint64_t hash_window(std::span<const Token> window, std::uint64_t seed) {
  std::uint64_t h = kFnvOffset ^ seed;
  for (const Token t : window) {
    const auto u = static_cast<std::uint32_t>(t);
    for (int b = 0; b < 4; ++b) {
      h ^= (u >> (8 * b)) & 0xFFu;
      h *= kFnvPrime;
    }
  }
  return h;
}

MaskVector hashed_mask(std::span<const Token> tokens, int k, int h, std::uint64_t seed) {
  require_k(k);
  if (h < 1) throw ConfigError("hash context width h must be >= 1, got " + std::to_string(h));
  const std::size_t width = static_cast<std::size_t>(h);
  std::vector<std::uint8_t> bits(tokens.size(), 1);
  for (std::size_t i = width; i < tokens.size(); ++i) {
    if (hash_below_inverse_k(hash_window(tokens.subspan(i - width, width), seed), k)) bits[i] = 0;
  }
  return MaskVector::from_bits(std::move(bits));
}

MaskVector make_mask(std::span<const Token> tokens, const MaskConfig& cfg, std::uint64_t sequence_id) {
  cfg.validate();
  switch (cfg.strategy) {
    case MaskStrategy::None: return all_ones_mask(tokens.size());
    case MaskStrategy::Static: return static_mask(tokens.size(), cfg.k);
    case MaskStrategy::Random: return random_mask(tokens.size(), cfg.k, cfg.seed, sequence_id);
    case MaskStrategy::Hashed: return hashed_mask(tokens, cfg.k, cfg.h, cfg.seed);
  }
  return all_ones_mask(tokens.size());
}

}  // namespace goldfish
