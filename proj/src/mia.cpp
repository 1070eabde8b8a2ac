#include "goldfish/mia.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>
#include <zlib.h>

#include "goldfish/errors.hpp"

namespace goldfish {

std::string_view to_string(MiaCriterion c) { return c == MiaCriterion::Loss ? "loss" : "zlib"; }

MiaCriterion parse_mia_criterion(std::string_view name) {
  if (name == "loss") return MiaCriterion::Loss;
  if (name == "zlib") return MiaCriterion::Zlib;
  throw ConfigError("unknown MIA criterion '" + std::string(name) + "' (expected loss or zlib)");
}

void MiaScoreSet::validate() const {
  if (member_scores.empty() || nonmember_scores.empty()) throw ShapeError("MIA score set needs both pools non-empty");
  for (const auto* pool : {&member_scores, &nonmember_scores}) {
    for (const double s : *pool) {
      if (!std::isfinite(s)) throw NumericError("MIA score is not finite");
    }
  }
}

double RocCurve::tpr_at_fpr(double target) const {
  double best = 0.0;
  for (const auto& p : points) {
    if (p.fpr <= target) best = std::max(best, p.tpr);
  }
  return best;
}

std::pair<double, std::size_t> total_nll(const ModelState<float>& state, std::span<const Token> doc) {
  if (doc.size() < 2) throw ShapeError("MIA scoring needs at least two tokens");
  return sequence_nll(state, doc);
}

double loss_score(const ModelState<float>& state, std::span<const Token> doc) {
  const auto [total, count] = total_nll(state, doc);
  return total / static_cast<double>(count);
}

std::size_t deflate_size(std::string_view bytes) {
  uLongf len = compressBound(static_cast<uLong>(bytes.size()));
  std::vector<Bytef> buf(len);
  const int rc = compress2(buf.data(), &len, reinterpret_cast<const Bytef*>(bytes.data()),
                           static_cast<uLong>(bytes.size()), Z_DEFAULT_COMPRESSION);
  if (rc != Z_OK) throw IoError("zlib compression failed with code " + std::to_string(rc));
  return static_cast<std::size_t>(len);
}

double zlib_ratio(double total_nll_nats, std::size_t compressed_bytes) {
  if (compressed_bytes == 0) throw ShapeError("compressed size must be positive");
  return total_nll_nats / (8.0 * static_cast<double>(compressed_bytes));
}

double zlib_score(const ModelState<float>& state, const NormalizedText& text) {
  if (text.str().empty()) throw ShapeError("zlib_score: empty text");
  const TokenSeq tokens = tokenize(text, true);
  return zlib_ratio(total_nll(state, tokens).first, deflate_size(text.str()));
}

RocCurve roc(const MiaScoreSet& scores) {
  scores.validate();
  struct Item {
    double score;
    bool member;
  };
  std::vector<Item> items;
  items.reserve(scores.member_scores.size() + scores.nonmember_scores.size());
  for (const double s : scores.member_scores) items.push_back({s, true});
  for (const double s : scores.nonmember_scores) items.push_back({s, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  RocCurve c;
  c.n_members = scores.member_scores.size();
  c.n_nonmembers = scores.nonmember_scores.size();
  c.degenerate = items.front().score == items.back().score;
  const auto P = static_cast<double>(c.n_members), N = static_cast<double>(c.n_nonmembers);
  c.points.push_back({0.0, 0.0});
  // twice the area, in units of 1 / (P * N)
  unsigned long long area2 = 0;
  unsigned long long tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size();) {
    const unsigned long long tp0 = tp, fp0 = fp;
    std::size_t j = i;
    for (; j < items.size() && items[j].score == items[i].score; ++j) (items[j].member ? tp : fp) += 1;
    area2 += (fp - fp0) * (tp + tp0);
    c.points.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P});
    i = j;
  }
  c.auc = static_cast<double>(area2) / (2.0 * P * N);
  return c;
}

double mann_whitney_auc(std::span<const double> members, std::span<const double> nonmembers) {
  if (members.empty() || nonmembers.empty()) throw ShapeError("Mann-Whitney needs both pools non-empty");
  unsigned long long twice = 0;
  for (const double m : members) {
    for (const double n : nonmembers) twice += m < n ? 2 : (m == n ? 1 : 0);
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(members.size()) * static_cast<double>(nonmembers.size()));
}

std::vector<double> score_documents(const ModelState<float>& state, const Corpus& docs, MiaCriterion criterion) {
  std::vector<double> out;
  out.reserve(docs.documents.size());
  for (const auto& d : docs.documents) {
    out.push_back(criterion == MiaCriterion::Loss ? loss_score(state, d.tokens) : zlib_score(state, d.text));
  }
  return out;
}

void write_roc_csv(const RocCurve& curve, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "fpr,tpr\n";
  for (const auto& p : curve.points) out << p.fpr << ',' << p.tpr << '\n';
}

void write_mia_summary(const RocCurve& curve, MiaCriterion criterion, const std::string& path) {
  const nlohmann::json j{{"criterion", to_string(criterion)},
                         {"auc", curve.auc},
                         {"tpr_at_fpr_0.001", curve.tpr_at_fpr(0.001)},
                         {"fpr_granularity", 1.0 / static_cast<double>(curve.n_nonmembers)},
                         {"degenerate", curve.degenerate},
                         {"n_members", curve.n_members},
                         {"n_nonmembers", curve.n_nonmembers}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace goldfish
