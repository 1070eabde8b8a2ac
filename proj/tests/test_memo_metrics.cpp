#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "goldfish/errors.hpp"
#include "goldfish/memo_metrics.hpp"
#include "toy_lm.hpp"

using namespace goldfish;
using goldfish::testing::ToyLM;

namespace {

std::size_t brute_lcs(const TokenSeq& a, const TokenSeq& b) {
  // every subsequence of a, checked against b
  std::size_t best = 0;
  const std::size_t n = a.size();
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    TokenSeq sub;
    for (std::size_t i = 0; i < n; ++i) {
      if (bits & (1u << i)) sub.push_back(a[i]);
    }
    std::size_t j = 0;
    for (std::size_t i = 0; i < b.size() && j < sub.size(); ++i) {
      if (b[i] == sub[j]) ++j;
    }
    if (j == sub.size()) best = std::max(best, sub.size());
  }
  return best;
}

/// Reproduces the document that starts with the context, except that it
/// predicts a wrong token wherever `wrong(position)` holds.
ToyLM memorizer(const Corpus& docs, std::function<bool(std::size_t)> wrong) {
  return ToyLM(kVocabSize, 512, [&docs, wrong](const TokenSeq& ctx) {
    std::vector<float> logits(kVocabSize, 0.0f);
    for (const auto& d : docs.documents) {
      if (d.tokens.size() <= ctx.size() || !std::equal(ctx.begin(), ctx.end(), d.tokens.begin())) continue;
      const Token next = d.tokens[ctx.size()];
      const Token pick = wrong(ctx.size()) ? static_cast<Token>((next + 1) % 256) : next;
      logits[pick] = 10.0f;
      return logits;
    }
    logits[0] = 10.0f;
    return logits;
  });
}

Corpus toy_corpus(int count) {
  Corpus c;
  std::mt19937_64 rng(5);
  for (int i = 0; i < count; ++i) {
    std::string s = "doc" + std::to_string(i) + ":";
    const std::size_t len = 60 + rng() % 60;
    while (s.size() < len) s.push_back(static_cast<char>('a' + rng() % 26));
    c.documents.push_back(make_document("d" + std::to_string(i), s));
  }
  return c;
}

}  // namespace

TEST_CASE("rouge and exact match examples") {
  const TokenSeq a = {1, 2, 3, 4}, b = {1, 3, 2, 4};
  CHECK(lcs_length(a, b) == 3);
  CHECK(rouge_l(a, b) == doctest::Approx(0.75));
  CHECK(rouge_l(a, a) == 1.0);
  CHECK(rouge_l(a, TokenSeq{9, 9, 9, 9}) == 0.0);
  CHECK(exact_match(a, a));
  CHECK_FALSE(exact_match(a, b));
  CHECK_THROWS_AS(exact_match(a, TokenSeq{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(rouge_l(TokenSeq{}, a), Error);

  // bigrams {12,23,34} vs {13,32,24}: none shared
  CHECK(rouge_n(a, b, 2) == 0.0);
  CHECK(rouge_n(a, b, 1) == 1.0);
  // {12,23,31} vs {12,23,34}: 2 of 3
  CHECK(rouge_n(TokenSeq{1, 2, 3, 1}, a, 2) == doctest::Approx(2.0 / 3.0));
  // multiset clipping: gen {5,5,5,6} vs ref {5,6,7,8}: overlap 2, P = R = 1/2
  CHECK(rouge_n(TokenSeq{5, 5, 5, 6}, TokenSeq{5, 6, 7, 8}, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(rouge_n(a, b, 3), Error);

  CHECK(first_mismatch(a, b) == 1);
  CHECK_FALSE(first_mismatch(a, a).has_value());
}

TEST_CASE("lcs agrees with exhaustive search") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSeq x(rng() % 9), y(rng() % 9);
    for (auto& t : x) t = static_cast<Token>(rng() % 4);
    for (auto& t : y) t = static_cast<Token>(rng() % 4);
    REQUIRE(lcs_length(x, y) == brute_lcs(x, y));
    REQUIRE(lcs_length(y, x) == lcs_length(x, y));
  }
}

TEST_CASE("extraction on a memorizing model") {
  const Corpus docs = toy_corpus(8);
  const ExtractionConfig cfg{16, 32};
  const auto perfect = memorizer(docs, [](std::size_t) { return false; });
  const auto recs = extract_all(perfect, docs, cfg);
  REQUIRE(recs.size() == 8);
  for (const auto& r : recs) {
    CHECK(r.exact_match);
    CHECK(r.rougeL == 1.0);
    CHECK(r.prefix.size() == 16);
    CHECK(r.ref_suffix.size() == 32);
    CHECK_FALSE(r.first_divergence_index.has_value());
  }
  CHECK(exact_match_rate(recs) == 1.0);

  const auto broken = memorizer(docs, [](std::size_t pos) { return pos == 20; });
  const auto r = extract_one(broken, "x", docs.documents[0].tokens, cfg);
  CHECK_FALSE(r.exact_match);
  REQUIRE(r.first_divergence_index.has_value());
  CHECK(*r.first_divergence_index == 20);

  // three of four exact
  std::vector<ExtractionRecord> mixed(4);
  for (std::size_t i = 0; i < 3; ++i) mixed[i].exact_match = true;
  CHECK(exact_match_rate(mixed) == 0.75);

  const TokenSeq tiny = {256, 1, 2};
  CHECK_THROWS_AS(extract_one(perfect, "t", tiny, cfg), ShapeError);
}

TEST_CASE("divergence under a static mask") {
  const Corpus docs = toy_corpus(30);
  const ExtractionConfig cfg{16, 40};
  const MaskConfig mask{MaskStrategy::Static, 3, 13, 0};
  // errs at dropped positions only, with a per-document offset so the first
  // error falls on different dropped indices
  std::size_t doc_index = 0;
  const auto m = memorizer(docs, [&](std::size_t pos) { return (pos + 1) % 3 == 0 && pos >= 17 + doc_index % 9; });
  std::vector<ExtractionRecord> recs;
  for (doc_index = 0; doc_index < docs.documents.size(); ++doc_index) {
    recs.push_back(extract_one(m, docs.documents[doc_index].id, docs.documents[doc_index].tokens, cfg));
  }
  const auto rep = divergence_from_records(recs, docs, mask, cfg);
  CHECK(rep.num_docs == 30);
  CHECK(rep.num_diverged == 30);
  CHECK(rep.num_diverged_at_dropped == 30);
  CHECK(rep.pct_diverged_at_dropped_index == 100.0);
  for (const auto& [pos, count] : rep.divergence_histogram) CHECK((pos + 1) % 3 == 0);
  std::size_t total = 0;
  for (const auto& [pos, count] : rep.divergence_histogram) total += count;
  CHECK(total == 30);
  // drops counted over the suffix window of each canary
  CHECK(rep.drop_histogram.count(17) == 1);
  CHECK(rep.drop_histogram.count(16) == 0);

  // a supervised-position error is not attributed to the mask
  const auto m2 = memorizer(docs, [](std::size_t pos) { return pos == 18; });
  const auto rep2 = divergence_analysis(m2, docs, mask, cfg);
  CHECK(rep2.num_diverged == 30);
  CHECK(rep2.num_diverged_at_dropped == 0);
  CHECK(rep2.pct_diverged_at_dropped_index == 0.0);
}

TEST_CASE("divergence for other strategies") {
  const Corpus docs = toy_corpus(5);
  const ExtractionConfig cfg{16, 20};
  const auto m = memorizer(docs, [](std::size_t pos) { return pos == 25; });
  const auto none = divergence_analysis(m, docs, MaskConfig{}, cfg);
  CHECK(none.num_diverged == 5);
  CHECK(none.num_diverged_at_dropped == 0);
  CHECK(none.drop_histogram.empty());

  const MaskConfig random{MaskStrategy::Random, 4, 13, 1};
  CHECK_THROWS_AS(divergence_analysis(m, docs, random, cfg), UnsupportedError);
  const std::vector<std::uint64_t> ids = {0, 1, 2, 3, 4};
  const auto rep = divergence_analysis(m, docs, random, cfg, ids);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto mv = make_mask(docs.documents[i].tokens, random, ids[i]);
    CHECK(rep.records[i].diverged_at_dropped == mv.dropped(25));
  }

  const MaskConfig hashed{MaskStrategy::Hashed, 4, 13, 0};
  const auto rh = divergence_analysis(m, docs, hashed, cfg);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto mv = make_mask(docs.documents[i].tokens, hashed, 0);
    CHECK(rh.records[i].diverged_at_dropped == mv.dropped(25));
  }
}

TEST_CASE("record and report files") {
  const auto dir = std::filesystem::temp_directory_path() / "goldfish_test_memo";
  std::filesystem::create_directories(dir);
  const Corpus docs = toy_corpus(3);
  const ExtractionConfig cfg{16, 20};
  const auto m = memorizer(docs, [](std::size_t pos) { return pos == 20; });
  const auto rep = divergence_analysis(m, docs, MaskConfig{MaskStrategy::Static, 3, 13, 0}, cfg);
  const auto path = (dir / "r.jsonl").string();
  write_records_jsonl(rep.records, path);
  const auto back = read_records_jsonl(path);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].doc_id == rep.records[i].doc_id);
    CHECK(back[i].gen_suffix == rep.records[i].gen_suffix);
    CHECK(back[i].rougeL == rep.records[i].rougeL);
    CHECK(back[i].first_divergence_index == rep.records[i].first_divergence_index);
    CHECK(back[i].diverged_at_dropped == rep.records[i].diverged_at_dropped);
  }
  write_divergence_csv(rep, (dir / "d.csv").string());
  std::ifstream in(dir / "d.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "position,drop_count,divergence_count");
}
