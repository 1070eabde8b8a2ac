#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "goldfish/mask.hpp"
#include "goldfish/nanolm.hpp"

namespace goldfish::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.context_len = 12;
  return c;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Central differences of goldfish_loss(forward(tokens), targets, mask) against
/// backward(), over every parameter. |a - n| / max(|a|, |n|, floor).
inline GradCheckResult finite_difference_check(std::uint64_t seed, bool use_mask, double eps = 1e-3,
                                               double floor = 1e-4) {
  const ModelConfig cfg = tiny_config();
  ModelState<double> state = init_model<double>(cfg, seed, 0.3, false);
  std::mt19937_64 rng(seed * 7919 + 1);
  TokenSeq seq(static_cast<std::size_t>(cfg.context_len) + 1);
  for (auto& t : seq) t = static_cast<Token>(rng() % static_cast<std::uint64_t>(cfg.vocab));
  const std::span<const Token> all(seq);
  const auto tokens = all.first(seq.size() - 1);
  const auto targets = all.subspan(1);
  // mask over the targets; hashed with a short window so some positions drop
  MaskVector mask = all_ones_mask(targets.size());
  if (use_mask) {
    const auto full = hashed_mask(seq, 3, 2, seed);
    std::vector<std::uint8_t> b(full.bits.begin() + 1, full.bits.end());
    if (std::count(b.begin(), b.end(), 0) == 0) b[1] = 0;
    mask = MaskVector::from_bits(b);
  }

  auto loss = [&](const ModelState<double>& s) {
    const auto logits = forward(s, tokens);
    return use_mask ? goldfish_loss(logits, targets, mask) : clm_loss(logits, targets);
  };
  const Gradients<double> g = backward(state, tokens, targets, mask);
  GradCheckResult r;
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    const double w = state.params[i];
    state.params[i] = w + eps;
    const double up = loss(state);
    state.params[i] = w - eps;
    const double down = loss(state);
    state.params[i] = w;
    const double numeric = (up - down) / (2 * eps);
    const double analytic = g.values[i];
    const double abs_err = std::abs(numeric - analytic);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
    ++r.checked;
  }
  return r;
}

}  // namespace goldfish::testing
