#include "goldfish/analytics.hpp"

#include <cmath>
#include <string>

#include "goldfish/errors.hpp"

namespace goldfish {
namespace {

void check_prob(double v, const char* name) {
  if (!(v > 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in (0, 1]");
}

void check_k(std::uint64_t k) {
  if (k < 2) throw ConfigError("k must be >= 2");
}

}  // namespace

double regen_prob_standard(double p, double n) {
  check_prob(p, "p");
  if (!(n >= 0.0)) throw ConfigError("n must be >= 0");
  return std::pow(p, n);
}

double regen_prob_goldfish(double p, double q, double k, double n) {
  check_prob(p, "p");
  check_prob(q, "q");
  if (!(k >= 2.0)) throw ConfigError("k must be >= 2");
  if (!(n >= 0.0)) throw ConfigError("n must be >= 0");
  if (p == q) return std::pow(p, n);
  return std::pow(p, n * (1.0 - 1.0 / k)) * std::pow(q, n / k);
}

std::uint64_t supervised_tokens(std::uint64_t input_tokens, std::uint64_t k) {
  check_k(k);
  const auto v = static_cast<unsigned __int128>(input_tokens) * (k - 1) / k;
  return static_cast<std::uint64_t>(v);
}

std::uint64_t required_input(std::uint64_t supervised, std::uint64_t k) {
  check_k(k);
  const auto num = static_cast<unsigned __int128>(supervised) * k;
  const auto v = (num + (k - 2)) / (k - 1);
  if (v > UINT64_MAX) throw ConfigError("required_input overflows 64 bits");
  return static_cast<std::uint64_t>(v);
}

}  // namespace goldfish
