#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "goldfish/nanolm.hpp"
#include "goldfish/textio.hpp"

namespace goldfish {

enum class MiaCriterion { Loss, Zlib };

std::string_view to_string(MiaCriterion c);
MiaCriterion parse_mia_criterion(std::string_view name);

/// Lower score means more member-like for every criterion.
struct MiaScoreSet {
  std::vector<double> member_scores;
  std::vector<double> nonmember_scores;
  MiaCriterion criterion = MiaCriterion::Loss;

  void validate() const;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // starts at (0,0), ends at (1,1)
  double auc = 0.5;
  bool degenerate = false;  // every score identical
  std::size_t n_members = 0;
  std::size_t n_nonmembers = 0;

  /// Largest TPR among points whose FPR is at most `target`.
  double tpr_at_fpr(double target) const;
};

/// Sum of next-token NLL (nats) over the document and the number of predicted
/// tokens. Documents longer than the context are scored window by window.
std::pair<double, std::size_t> total_nll(const ModelState<float>& state, std::span<const Token> doc);

/// Mean per-token NLL in nats.
double loss_score(const ModelState<float>& state, std::span<const Token> doc);

/// DEFLATE-compressed size (zlib stream, default level) of the bytes.
std::size_t deflate_size(std::string_view bytes);

/// Total NLL over 8 x compressed byte length.
double zlib_ratio(double total_nll_nats, std::size_t compressed_bytes);

/// Total NLL of the tokenized text divided by 8 x its compressed byte length.
double zlib_score(const ModelState<float>& state, const NormalizedText& text);

/// Threshold sweep over every distinct score; a sample is called a member when
/// its score is <= the threshold. The AUC is the trapezoid integral, computed
/// with integer arithmetic so it equals the Mann-Whitney statistic exactly.
RocCurve roc(const MiaScoreSet& scores);

/// Pairwise Mann-Whitney estimate of P(member < nonmember) + P(tie) / 2.
double mann_whitney_auc(std::span<const double> members, std::span<const double> nonmembers);

/// Scores every document under one criterion.
std::vector<double> score_documents(const ModelState<float>& state, const Corpus& docs, MiaCriterion criterion);

/// CSV columns: fpr,tpr
void write_roc_csv(const RocCurve& curve, const std::string& path);
/// {criterion, auc, tpr_at_fpr_0.001, n_members, n_nonmembers, ...}
void write_mia_summary(const RocCurve& curve, MiaCriterion criterion, const std::string& path);

}  // namespace goldfish
