#include "goldfish/memo_metrics.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "goldfish/errors.hpp"

namespace goldfish {

using nlohmann::json;

void ExtractionConfig::validate() const {
  if (prefix_len < 1) throw ConfigError("prefix_len must be >= 1");
  if (suffix_len < 1) throw ConfigError("suffix_len must be >= 1");
}

bool exact_match(std::span<const Token> gen, std::span<const Token> ref) {
  if (gen.size() != ref.size()) {
    throw ShapeError("exact_match: lengths differ (" + std::to_string(gen.size()) + " vs " +
                     std::to_string(ref.size()) + ")");
  }
  return std::equal(gen.begin(), gen.end(), ref.begin());
}

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {

double f1(std::size_t overlap, std::size_t n_gen, std::size_t n_ref) {
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(n_gen);
  const double r = static_cast<double>(overlap) / static_cast<double>(n_ref);
  return 2.0 * p * r / (p + r);
}

}  // namespace

double rouge_l(std::span<const Token> gen, std::span<const Token> ref) {
  if (gen.empty() || ref.empty()) throw ShapeError("rouge_l: empty input");
  return f1(lcs_length(gen, ref), gen.size(), ref.size());
}

double rouge_n(std::span<const Token> gen, std::span<const Token> ref, int order) {
  if (order != 1 && order != 2) throw ConfigError("rouge_n: order must be 1 or 2");
  const auto n = static_cast<std::size_t>(order);
  if (gen.size() < n || ref.size() < n) throw ShapeError("rouge_n: input shorter than the n-gram order");
  auto grams = [n](std::span<const Token> s) {
    std::map<std::pair<Token, Token>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[{s[i], n == 2 ? s[i + 1] : Token{-1}}];
    return counts;
  };
  const auto g = grams(gen), r = grams(ref);
  std::size_t overlap = 0;
  for (const auto& [key, c] : g) {
    if (auto it = r.find(key); it != r.end()) overlap += std::min(c, it->second);
  }
  return f1(overlap, gen.size() - n + 1, ref.size() - n + 1);
}

std::optional<int> first_mismatch(std::span<const Token> gen, std::span<const Token> ref) {
  const std::size_t m = std::min(gen.size(), ref.size());
  for (std::size_t i = 0; i < m; ++i) {
    if (gen[i] != ref[i]) return static_cast<int>(i);
  }
  if (gen.size() != ref.size()) return static_cast<int>(m);
  return std::nullopt;
}

ExtractionRecord extract_one(const LanguageModel& model, const std::string& doc_id, std::span<const Token> doc,
                             const ExtractionConfig& cfg, const BeamConfig* beam) {
  cfg.validate();
  const auto p = static_cast<std::size_t>(cfg.prefix_len);
  if (doc.size() <= p) {
    throw ShapeError("document '" + doc_id + "' has " + std::to_string(doc.size()) +
                     " tokens, needs more than prefix_len " + std::to_string(p));
  }
  const std::size_t n = std::min(doc.size() - p, static_cast<std::size_t>(cfg.suffix_len));
  ExtractionRecord rec;
  rec.doc_id = doc_id;
  rec.prefix.assign(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(p));
  rec.ref_suffix.assign(doc.begin() + static_cast<std::ptrdiff_t>(p), doc.begin() + static_cast<std::ptrdiff_t>(p + n));
  GenerationResult gen;
  if (beam != nullptr) {
    BeamConfig bc = *beam;
    bc.max_new_tokens = static_cast<int>(n);
    gen = beam_search(model, rec.prefix, bc);
  } else {
    gen = greedy_complete(model, rec.prefix, static_cast<int>(n));
  }
  rec.gen_suffix = std::move(gen.tokens);
  rec.gen_logprob = gen.cumulative_logprob;
  rec.exact_match = exact_match(rec.gen_suffix, rec.ref_suffix);
  rec.rougeL = rouge_l(rec.gen_suffix, rec.ref_suffix);
  rec.rouge1 = rouge_n(rec.gen_suffix, rec.ref_suffix, 1);
  rec.rouge2 = n >= 2 ? rouge_n(rec.gen_suffix, rec.ref_suffix, 2) : (rec.exact_match ? 1.0 : 0.0);
  if (auto idx = first_mismatch(rec.gen_suffix, rec.ref_suffix)) {
    rec.first_divergence_index = cfg.prefix_len + *idx;
  }
  return rec;
}

std::vector<ExtractionRecord> extract_all(const LanguageModel& model, const Corpus& docs, const ExtractionConfig& cfg,
                                          const BeamConfig* beam) {
  std::vector<ExtractionRecord> out;
  out.reserve(docs.documents.size());
  for (const auto& d : docs.documents) out.push_back(extract_one(model, d.id, d.tokens, cfg, beam));
  return out;
}

double exact_match_rate(std::span<const ExtractionRecord> records) {
  if (records.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : records) hits += r.exact_match ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

DivergenceReport divergence_from_records(std::vector<ExtractionRecord> records, const Corpus& canaries,
                                         const MaskConfig& mask_cfg, const ExtractionConfig& ext_cfg,
                                         std::span<const std::uint64_t> sequence_ids) {
  mask_cfg.validate();
  ext_cfg.validate();
  if (records.size() != canaries.documents.size()) throw ShapeError("divergence: one record per canary required");
  if (mask_cfg.strategy == MaskStrategy::Random && sequence_ids.size() != canaries.documents.size()) {
    throw UnsupportedError(
        "divergence: random masks cannot be recomputed without the training-time sequence id of every canary");
  }
  DivergenceReport rep;
  rep.num_docs = records.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Document& doc = canaries.documents[i];
    ExtractionRecord& rec = records[i];
    if (rec.doc_id != doc.id) throw ShapeError("divergence: record '" + rec.doc_id + "' does not match canary order");
    const std::uint64_t sid = sequence_ids.empty() ? 0 : sequence_ids[i];
    const MaskVector mask = make_mask(doc.tokens, mask_cfg, sid);
    const std::size_t end = static_cast<std::size_t>(ext_cfg.prefix_len) + rec.ref_suffix.size();
    for (std::size_t pos = static_cast<std::size_t>(ext_cfg.prefix_len); pos < end; ++pos) {
      if (mask.dropped(pos)) ++rep.drop_histogram[static_cast<int>(pos)];
    }
    if (!rec.first_divergence_index) {
      rec.diverged_at_dropped.reset();
      continue;
    }
    const int pos = *rec.first_divergence_index;
    ++rep.num_diverged;
    ++rep.divergence_histogram[pos];
    rec.diverged_at_dropped = mask.dropped(static_cast<std::size_t>(pos));
    if (*rec.diverged_at_dropped) ++rep.num_diverged_at_dropped;
  }
  rep.pct_diverged_at_dropped_index =
      rep.num_diverged == 0 ? 0.0
                            : 100.0 * static_cast<double>(rep.num_diverged_at_dropped) /
                                  static_cast<double>(rep.num_diverged);
  rep.records = std::move(records);
  return rep;
}

DivergenceReport divergence_analysis(const LanguageModel& model, const Corpus& canaries, const MaskConfig& mask_cfg,
                                     const ExtractionConfig& ext_cfg, std::span<const std::uint64_t> sequence_ids) {
  mask_cfg.validate();
  if (mask_cfg.strategy == MaskStrategy::Random && sequence_ids.size() != canaries.documents.size()) {
    throw UnsupportedError(
        "divergence: random masks cannot be recomputed without the training-time sequence id of every canary");
  }
  return divergence_from_records(extract_all(model, canaries, ext_cfg), canaries, mask_cfg, ext_cfg, sequence_ids);
}

// ---- artifacts ----

namespace {

json record_to_json(const ExtractionRecord& r) {
  json j{{"doc_id", r.doc_id},       {"prefix", r.prefix},           {"ref_suffix", r.ref_suffix},
         {"gen_suffix", r.gen_suffix}, {"exact_match", r.exact_match}, {"rouge1", r.rouge1},
         {"rouge2", r.rouge2},       {"rougeL", r.rougeL},           {"gen_logprob", r.gen_logprob}};
  j["first_divergence_index"] = r.first_divergence_index ? json(*r.first_divergence_index) : json(nullptr);
  j["diverged_at_dropped"] = r.diverged_at_dropped ? json(*r.diverged_at_dropped) : json(nullptr);
  return j;
}

ExtractionRecord record_from_json(const json& j) {
  ExtractionRecord r;
  r.doc_id = j.at("doc_id").get<std::string>();
  r.prefix = j.at("prefix").get<TokenSeq>();
  r.ref_suffix = j.at("ref_suffix").get<TokenSeq>();
  r.gen_suffix = j.at("gen_suffix").get<TokenSeq>();
  r.exact_match = j.at("exact_match").get<bool>();
  r.rouge1 = j.at("rouge1").get<double>();
  r.rouge2 = j.at("rouge2").get<double>();
  r.rougeL = j.at("rougeL").get<double>();
  r.gen_logprob = j.value("gen_logprob", 0.0);
  if (const auto& v = j.at("first_divergence_index"); !v.is_null()) r.first_divergence_index = v.get<int>();
  if (const auto& v = j.at("diverged_at_dropped"); !v.is_null()) r.diverged_at_dropped = v.get<bool>();
  return r;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void write_records_jsonl(std::span<const ExtractionRecord> records, const std::string& path) {
  auto out = open_out(path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path);
}

std::vector<ExtractionRecord> read_records_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<ExtractionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_divergence_json(const DivergenceReport& report, const std::string& path) {
  json hist_div = json::object(), hist_drop = json::object();
  for (const auto& [pos, c] : report.divergence_histogram) hist_div[std::to_string(pos)] = c;
  for (const auto& [pos, c] : report.drop_histogram) hist_drop[std::to_string(pos)] = c;
  const json j{{"num_docs", report.num_docs},
               {"num_diverged", report.num_diverged},
               {"num_diverged_at_dropped", report.num_diverged_at_dropped},
               {"pct_diverged_at_dropped_index", report.pct_diverged_at_dropped_index},
               {"divergence_histogram", hist_div},
               {"drop_histogram", hist_drop}};
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

void write_divergence_csv(const DivergenceReport& report, const std::string& path) {
  std::map<int, std::pair<std::size_t, std::size_t>> rows;
  for (const auto& [pos, c] : report.drop_histogram) rows[pos].first = c;
  for (const auto& [pos, c] : report.divergence_histogram) rows[pos].second = c;
  auto out = open_out(path);
  out << "position,drop_count,divergence_count\n";
  for (const auto& [pos, c] : rows) out << pos << ',' << c.first << ',' << c.second << '\n';
}

}  // namespace goldfish
