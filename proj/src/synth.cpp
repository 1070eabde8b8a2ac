#include "goldfish/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "goldfish/errors.hpp"
#include "rng.hpp"

namespace goldfish {
namespace {

constexpr const char* kOnsets[] = {"b",  "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",  "n",  "p",
                                   "r",  "s",  "t",  "v",  "w",  "z",  "br", "ch", "cl", "dr", "fl", "gr",
                                   "pl", "pr", "sh", "sk", "sl", "st", "th", "tr", "wh", ""};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ee", "ou", "oa", "y"};
constexpr const char* kCodas[] = {"", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck", "ng", "rt"};

template <std::size_t N>
const char* pick(Rng& rng, const char* const (&arr)[N]) {
  return arr[rng.below(N)];
}

}  // namespace

void SynthConfig::validate() const {
  if (vocab_words < 16) throw ConfigError("synth vocab_words must be >= 16");
  if (!(zipf_exponent > 0.0)) throw ConfigError("synth zipf_exponent must be > 0");
  if (min_tokens < 32 || max_tokens < min_tokens) throw ConfigError("synth needs 32 <= min_tokens <= max_tokens");
}

SynthLanguage::SynthLanguage(const SynthConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.language_seed);
  std::set<std::string> seen;
  while (static_cast<int>(words_.size()) < cfg_.vocab_words) {
    // frequent words are short
    const std::size_t rank = words_.size();
    const int max_syll = rank < 50 ? 1 : (rank < 600 ? 2 : 3);
    const int syll = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_syll)));
    std::string w;
    for (int s = 0; s < syll; ++s) {
      w += pick(rng, kOnsets);
      w += pick(rng, kVowels);
      if (s + 1 == syll || rng.uniform() < 0.3) w += pick(rng, kCodas);
    }
    if (seen.insert(w).second) words_.push_back(std::move(w));
  }
  cdf_.resize(words_.size());
  double acc = 0.0;
  for (std::size_t r = 0; r < words_.size(); ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg_.zipf_exponent);
    cdf_[r] = acc;
  }
  for (double& c : cdf_) c /= acc;
}

std::string SynthLanguage::document(std::uint64_t seed) const {
  Rng rng(seed);
  const int span = cfg_.max_tokens - cfg_.min_tokens;
  const auto target = static_cast<std::size_t>(cfg_.min_tokens - 1 +
                                               static_cast<int>(rng.below(static_cast<std::uint64_t>(span) + 1)));
  std::string text;
  bool sentence_start = true;
  int words_in_sentence = 0;
  int sentence_len = 0;
  while (true) {
    if (sentence_start) sentence_len = 5 + static_cast<int>(rng.below(11));
    const double u = rng.uniform();
    const auto r = static_cast<std::size_t>(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
    std::string w = words_[std::min(r, words_.size() - 1)];
    if (sentence_start) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    ++words_in_sentence;
    const bool end = words_in_sentence >= sentence_len;
    std::string piece = (text.empty() ? "" : " ") + w;
    if (end) {
      piece += '.';
    } else if (words_in_sentence > 1 && rng.uniform() < 0.08) {
      piece += ',';
    }
    if (text.size() + piece.size() > target) break;
    text += piece;
    sentence_start = end;
    if (end) words_in_sentence = 0;
  }
  // pad the tail so every length in range is reachable
  while (text.size() < target) text += text.back() == '.' ? ' ' : '.';
  if (text.back() == ' ') text.back() = '.';
  return text;
}

Corpus SynthLanguage::corpus(int count, std::uint64_t seed, const std::string& id_prefix,
                             const std::string& source) const {
  if (count < 0) throw ConfigError("synth document count must be >= 0");
  Rng rng(seed);
  Corpus c;
  c.documents.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%05d", i);
    c.documents.push_back(make_document(id_prefix + id, document(rng.next()), source));
  }
  return c;
}

}  // namespace goldfish
