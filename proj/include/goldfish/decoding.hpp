#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "goldfish/nanolm.hpp"
#include "goldfish/textio.hpp"

namespace goldfish {

/// Incremental next-token state: the logits for the next position given
/// everything pushed so far.
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual std::span<const float> logits() const = 0;
  virtual void push(Token t) = 0;
  virtual int length() const = 0;
  virtual std::unique_ptr<DecoderState> clone() const = 0;
  /// Overwrites this state with `other`, which must come from the same model.
  virtual void assign(const DecoderState& other) = 0;
};

/// Anything that can start a decoding state from a prefix.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual int vocab() const = 0;
  virtual int context_len() const = 0;
  virtual std::unique_ptr<DecoderState> start(std::span<const Token> prefix) const = 0;
};

/// LanguageModel over a frozen transformer, backed by a KV cache.
class TransformerLM final : public LanguageModel {
 public:
  explicit TransformerLM(const ModelState<float>& state) : state_(&state) {}
  int vocab() const override { return state_->config.vocab; }
  int context_len() const override { return state_->config.context_len; }
  std::unique_ptr<DecoderState> start(std::span<const Token> prefix) const override;

 private:
  const ModelState<float>* state_;
};

struct GenerationResult {
  TokenSeq tokens;  // generated suffix only
  double cumulative_logprob = 0.0;
  std::vector<double> per_step_logprobs;
};

struct BeamConfig {
  int width = 30;
  int max_new_tokens = 32;
};

/// Argmax decoding; ties go to the lowest token id.
GenerationResult greedy_complete(const LanguageModel& model, std::span<const Token> prefix, int n);

/// Categorical sampling from softmax(logits / temperature), seeded.
GenerationResult sample_complete(const LanguageModel& model, std::span<const Token> prefix, int n, double temperature,
                                 std::uint64_t seed);

/// Length-synchronous beam search over cumulative log-probability with no
/// length penalty. Candidates are ranked by score, then by parent beam rank,
/// then by token id, so width 1 is exactly greedy. The greedy completion is
/// also scored and returned if it beats the best beam.
GenerationResult beam_search(const LanguageModel& model, std::span<const Token> prefix, const BeamConfig& cfg);

}  // namespace goldfish
