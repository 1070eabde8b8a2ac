#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "goldfish/decoding.hpp"
#include "goldfish/mask.hpp"
#include "goldfish/textio.hpp"

namespace goldfish {

struct ExtractionConfig {
  int prefix_len = 32;  // p, counted in tokens including BOS
  int suffix_len = 64;  // n

  void validate() const;
};

struct ExtractionRecord {
  std::string doc_id;
  TokenSeq prefix;
  TokenSeq ref_suffix;
  TokenSeq gen_suffix;
  bool exact_match = false;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double gen_logprob = 0.0;
  /// Absolute position (prefix_len + offset) of the first mismatch.
  std::optional<int> first_divergence_index;
  std::optional<bool> diverged_at_dropped;
};

struct DivergenceReport {
  std::size_t num_docs = 0;
  std::size_t num_diverged = 0;
  std::size_t num_diverged_at_dropped = 0;
  double pct_diverged_at_dropped_index = 0.0;
  /// position -> count, positions in absolute sequence coordinates
  std::map<int, std::size_t> divergence_histogram;
  std::map<int, std::size_t> drop_histogram;
  std::vector<ExtractionRecord> records;
};

/// Token-for-token equality; throws ShapeError on length mismatch.
bool exact_match(std::span<const Token> gen, std::span<const Token> ref);

/// Length of the longest common subsequence (dynamic programming).
std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b);

/// F1 of the LCS: P = LCS/|gen|, R = LCS/|ref|.
double rouge_l(std::span<const Token> gen, std::span<const Token> ref);

/// F1 over the multiset intersection of n-grams, order 1 or 2.
double rouge_n(std::span<const Token> gen, std::span<const Token> ref, int order);

/// First index where the sequences differ (compared over the shorter length),
/// or nullopt if they agree and have equal length.
std::optional<int> first_mismatch(std::span<const Token> gen, std::span<const Token> ref);

/// Splits `doc` into prefix/suffix, decodes (greedy unless `beam` is set) and
/// scores the completion. Documents shorter than p + n are truncated to what
/// is available; at least one suffix token is required.
ExtractionRecord extract_one(const LanguageModel& model, const std::string& doc_id, std::span<const Token> doc,
                             const ExtractionConfig& cfg, const BeamConfig* beam = nullptr);

std::vector<ExtractionRecord> extract_all(const LanguageModel& model, const Corpus& docs, const ExtractionConfig& cfg,
                                          const BeamConfig* beam = nullptr);

/// Fraction of records with exact_match.
double exact_match_rate(std::span<const ExtractionRecord> records);

/// Greedy-regenerates every canary, recomputes its mask on the ground truth,
/// and checks whether the first divergence sits on a dropped position. Random
/// masks need the training-time sequence ids (`sequence_ids[i]` for canary i).
DivergenceReport divergence_analysis(const LanguageModel& model, const Corpus& canaries, const MaskConfig& mask_cfg,
                                     const ExtractionConfig& ext_cfg,
                                     std::span<const std::uint64_t> sequence_ids = {});

/// Same analysis on already-computed extraction records.
DivergenceReport divergence_from_records(std::vector<ExtractionRecord> records, const Corpus& canaries,
                                         const MaskConfig& mask_cfg, const ExtractionConfig& ext_cfg,
                                         std::span<const std::uint64_t> sequence_ids = {});

// ---- artifacts ----

void write_records_jsonl(std::span<const ExtractionRecord> records, const std::string& path);
std::vector<ExtractionRecord> read_records_jsonl(const std::string& path);
void write_divergence_json(const DivergenceReport& report, const std::string& path);
/// CSV columns: position,drop_count,divergence_count
void write_divergence_csv(const DivergenceReport& report, const std::string& path);

}  // namespace goldfish
