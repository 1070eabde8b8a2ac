#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "goldfish/decoding.hpp"

namespace goldfish::testing {

/// Next-token logits are an arbitrary function of the whole context.
class ToyLM final : public LanguageModel {
 public:
  using Fn = std::function<std::vector<float>(const TokenSeq&)>;

  ToyLM(int vocab, int context_len, Fn fn) : vocab_(vocab), ctx_(context_len), fn_(std::move(fn)) {}

  int vocab() const override { return vocab_; }
  int context_len() const override { return ctx_; }

  std::unique_ptr<DecoderState> start(std::span<const Token> prefix) const override {
    auto s = std::make_unique<State>(this);
    s->ctx.assign(prefix.begin(), prefix.end());
    s->refresh();
    return s;
  }

 private:
  struct State final : DecoderState {
    explicit State(const ToyLM* m) : model(m) {}
    std::span<const float> logits() const override { return cached; }
    void push(Token t) override {
      ctx.push_back(t);
      refresh();
    }
    int length() const override { return static_cast<int>(ctx.size()); }
    std::unique_ptr<DecoderState> clone() const override { return std::make_unique<State>(*this); }
    void assign(const DecoderState& other) override { *this = dynamic_cast<const State&>(other); }
    void refresh() { cached = model->fn_(ctx); }

    const ToyLM* model;
    TokenSeq ctx;
    std::vector<float> cached;
  };

  int vocab_;
  int ctx_;
  Fn fn_;
};

/// Deterministic pseudo-random logits in [-scale, scale] keyed by (seed, context).
inline std::vector<float> hashed_logits(const TokenSeq& ctx, int vocab, std::uint64_t seed, float scale) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (const Token t : ctx) {
    h ^= static_cast<std::uint64_t>(t) + 1;
    h *= 0x100000001b3ULL;
  }
  std::vector<float> out(static_cast<std::size_t>(vocab));
  for (int v = 0; v < vocab; ++v) {
    std::uint64_t z = h + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(v + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    out[static_cast<std::size_t>(v)] = scale * (static_cast<float>(z >> 40) / static_cast<float>(1 << 24) * 2.0f - 1.0f);
  }
  return out;
}

}  // namespace goldfish::testing
