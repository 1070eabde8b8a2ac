#include "goldfish/decoding.hpp"

#include <algorithm>
#include <cmath>

#include "goldfish/errors.hpp"
#include "rng.hpp"

namespace goldfish {
namespace {

class TransformerState final : public DecoderState {
 public:
  explicit TransformerState(const ModelState<float>& state) : state_(&state), cache_(state.config) {}

  void run(std::span<const Token> tokens) {
    const Matrix<float> out = cache_.append(*state_, tokens);
    logits_.assign(out.row(out.rows - 1), out.row(out.rows - 1) + out.cols);
  }

  std::span<const float> logits() const override { return logits_; }
  void push(Token t) override { run(std::span<const Token>(&t, 1)); }
  int length() const override { return cache_.length(); }

  std::unique_ptr<DecoderState> clone() const override {
    auto copy = std::make_unique<TransformerState>(*state_);
    copy->assign(*this);
    return copy;
  }

  void assign(const DecoderState& other) override {
    const auto& o = dynamic_cast<const TransformerState&>(other);
    cache_.copy_prefix_from(o.cache_, o.cache_.length());
    logits_ = o.logits_;
  }

 private:
  const ModelState<float>* state_;
  KvCache<float> cache_;
  std::vector<float> logits_;
};

void check_request(const LanguageModel& model, std::span<const Token> prefix, int n) {
  if (prefix.empty()) throw ShapeError("generation needs a non-empty prefix");
  if (n < 0) throw ShapeError("number of new tokens must be >= 0");
  // the last generated token is never fed back, so prefix + n - 1 positions are evaluated
  if (static_cast<long>(prefix.size()) + n > model.context_len()) {
    throw ShapeError("prefix (" + std::to_string(prefix.size()) + ") + new tokens (" + std::to_string(n) +
                     ") exceeds context_len " + std::to_string(model.context_len()));
  }
}

std::vector<double> log_softmax(std::span<const float> logits) {
  return log_softmax_row(logits.data(), static_cast<int>(logits.size()));
}

Token argmax_lowest(std::span<const float> logits) {
  Token best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[static_cast<std::size_t>(best)]) best = static_cast<Token>(j);
  }
  return best;
}

}  // namespace

std::unique_ptr<DecoderState> TransformerLM::start(std::span<const Token> prefix) const {
  if (prefix.empty()) throw ShapeError("generation needs a non-empty prefix");
  auto s = std::make_unique<TransformerState>(*state_);
  s->run(prefix);
  return s;
}

GenerationResult greedy_complete(const LanguageModel& model, std::span<const Token> prefix, int n) {
  check_request(model, prefix, n);
  GenerationResult r;
  if (n == 0) return r;
  auto state = model.start(prefix);
  for (int step = 0; step < n; ++step) {
    const auto logits = state->logits();
    const Token t = argmax_lowest(logits);
    const double lp = log_softmax(logits)[static_cast<std::size_t>(t)];
    r.tokens.push_back(t);
    r.per_step_logprobs.push_back(lp);
    r.cumulative_logprob += lp;
    if (step + 1 < n) state->push(t);
  }
  return r;
}

GenerationResult sample_complete(const LanguageModel& model, std::span<const Token> prefix, int n, double temperature,
                                 std::uint64_t seed) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  check_request(model, prefix, n);
  GenerationResult r;
  if (n == 0) return r;
  Rng rng(seed);
  auto state = model.start(prefix);
  std::vector<float> scaled;
  for (int step = 0; step < n; ++step) {
    const auto logits = state->logits();
    scaled.resize(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) {
      scaled[j] = static_cast<float>(static_cast<double>(logits[j]) / temperature);
    }
    const auto tempered = log_softmax(scaled);
    const double u = rng.uniform();
    double cum = 0.0;
    Token t = static_cast<Token>(tempered.size() - 1);
    for (std::size_t j = 0; j < tempered.size(); ++j) {
      cum += std::exp(tempered[j]);
      if (u < cum) {
        t = static_cast<Token>(j);
        break;
      }
    }
    const double lp = log_softmax(logits)[static_cast<std::size_t>(t)];
    r.tokens.push_back(t);
    r.per_step_logprobs.push_back(lp);
    r.cumulative_logprob += lp;
    if (step + 1 < n) state->push(t);
  }
  return r;
}

GenerationResult beam_search(const LanguageModel& model, std::span<const Token> prefix, const BeamConfig& cfg) {
  if (cfg.width < 1) throw ConfigError("beam width must be >= 1");
  if (cfg.max_new_tokens < 1) throw ConfigError("beam max_new_tokens must be >= 1");
  const int n = cfg.max_new_tokens;
  check_request(model, prefix, n);

  struct Beam {
    std::unique_ptr<DecoderState> state;
    TokenSeq tokens;
    std::vector<double> lps;
    double score = 0.0;
  };
  struct Candidate {
    double score;
    int parent;
    Token token;
    double lp;
  };

  std::vector<Beam> beams;
  beams.push_back(Beam{model.start(prefix), {}, {}, 0.0});
  std::vector<Candidate> cands;
  for (int step = 0; step < n; ++step) {
    cands.clear();
    for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
      const auto lsm = log_softmax(beams[b].state->logits());
      for (std::size_t v = 0; v < lsm.size(); ++v) {
        cands.push_back({beams[b].score + lsm[v], b, static_cast<Token>(v), lsm[v]});
      }
    }
    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(cfg.width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    const bool last = step + 1 == n;
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = cands[c];
      Beam& parent = beams[static_cast<std::size_t>(cand.parent)];
      Beam nb;
      nb.tokens = parent.tokens;
      nb.tokens.push_back(cand.token);
      nb.lps = parent.lps;
      nb.lps.push_back(cand.lp);
      nb.score = cand.score;
      if (!last) {
        // the parent's last child takes its state, earlier children copy it
        bool reused_later = false;
        for (std::size_t c2 = c + 1; c2 < keep; ++c2) reused_later = reused_later || cands[c2].parent == cand.parent;
        nb.state = reused_later ? parent.state->clone() : std::move(parent.state);
        nb.state->push(cand.token);
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  GenerationResult best;
  best.tokens = std::move(beams.front().tokens);
  best.per_step_logprobs = std::move(beams.front().lps);
  for (const double lp : best.per_step_logprobs) best.cumulative_logprob += lp;
  if (cfg.width > 1) {
    GenerationResult greedy = greedy_complete(model, prefix, n);
    if (greedy.cumulative_logprob > best.cumulative_logprob) return greedy;
  }
  return best;
}

}  // namespace goldfish
