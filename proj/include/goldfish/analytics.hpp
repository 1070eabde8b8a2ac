#pragma once

#include <cstdint>

namespace goldfish {

/// Probability of regenerating an n-token suffix when each token is produced
/// with probability p: p^n.
double regen_prob_standard(double p, double n);

/// Same with a fraction 1/k of the positions never supervised and guessed with
/// probability q: p^(n(1-1/k)) * q^(n/k).
double regen_prob_goldfish(double p, double q, double k, double n);

/// floor((1 - 1/k) * input), computed exactly.
std::uint64_t supervised_tokens(std::uint64_t input_tokens, std::uint64_t k);

/// Smallest input count whose supervised count reaches `supervised`:
/// ceil(supervised * k / (k - 1)).
std::uint64_t required_input(std::uint64_t supervised, std::uint64_t k);

}  // namespace goldfish
