#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "goldfish/textio.hpp"

namespace goldfish {

/// Seeded generator of English-like prose over an invented word list with a
/// Zipfian frequency profile. Documents from one language are i.i.d.
struct SynthConfig {
  std::uint64_t language_seed = 7;  // word list and frequencies
  int vocab_words = 4000;
  double zipf_exponent = 1.05;
  int min_tokens = 160;  // including BOS
  int max_tokens = 240;

  void validate() const;
};

class SynthLanguage {
 public:
  explicit SynthLanguage(const SynthConfig& cfg);

  /// One document whose token length (with BOS) lies in [min_tokens, max_tokens].
  std::string document(std::uint64_t seed) const;

  /// `count` documents with ids "{prefix}{index:05}", generated from `seed`.
  Corpus corpus(int count, std::uint64_t seed, const std::string& id_prefix, const std::string& source) const;

  const std::vector<std::string>& words() const { return words_; }

 private:
  SynthConfig cfg_;
  std::vector<std::string> words_;
  std::vector<double> cdf_;
};

}  // namespace goldfish
