#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "goldfish/errors.hpp"
#include "goldfish/mia.hpp"

using namespace goldfish;

namespace {

RocCurve roc_of(std::vector<double> m, std::vector<double> n) {
  MiaScoreSet s;
  s.member_scores = std::move(m);
  s.nonmember_scores = std::move(n);
  return roc(s);
}

}  // namespace

TEST_CASE("auc on a small hand example with ties") {
  const auto c = roc_of({1, 2, 3}, {2, 3, 4});
  CHECK(c.auc == doctest::Approx(7.0 / 9.0).epsilon(1e-15));
  CHECK(mann_whitney_auc(std::vector<double>{1, 2, 3}, std::vector<double>{2, 3, 4}) ==
        doctest::Approx(7.0 / 9.0).epsilon(1e-15));
  CHECK(c.points.front().fpr == 0.0);
  CHECK(c.points.front().tpr == 0.0);
  CHECK(c.points.back().fpr == 1.0);
  CHECK(c.points.back().tpr == 1.0);
  CHECK(c.n_members == 3);
  CHECK(c.n_nonmembers == 3);
  CHECK_FALSE(c.degenerate);
}

TEST_CASE("separable scores") {
  const auto c = roc_of({0.1, 0.2, 0.3, 0.4}, {1.0, 1.1, 1.2, 1.3, 1.4});
  CHECK(c.auc == 1.0);
  CHECK(c.tpr_at_fpr(0.001) == 1.0);
  const auto inverted = roc_of({1.0, 1.1, 1.2}, {0.1, 0.2});
  CHECK(inverted.auc == 0.0);
  CHECK(inverted.tpr_at_fpr(0.001) == 0.0);
}

TEST_CASE("identical score distributions give chance auc") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> d(3.0, 1.0);
  std::vector<double> m(500), n(500);
  for (auto& x : m) x = d(rng);
  for (auto& x : n) x = d(rng);
  CHECK(std::abs(roc_of(m, n).auc - 0.5) <= 0.05);
}

TEST_CASE("trapezoid auc equals the pairwise statistic bitwise") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nm = 1 + rng() % 40, nn = 1 + rng() % 40;
    const int range = 1 + static_cast<int>(rng() % 10);  // small ranges force ties
    std::vector<double> m(nm), n(nn);
    for (auto& x : m) x = static_cast<double>(rng() % static_cast<unsigned>(range));
    for (auto& x : n) x = static_cast<double>(rng() % static_cast<unsigned>(range)) + 0.5 * (trial % 2);
    CHECK(roc_of(m, n).auc == mann_whitney_auc(m, n));
  }
}

TEST_CASE("auc is invariant under monotone transforms") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::vector<double> m(100), n(120);
  for (auto& x : m) x = u(rng);
  for (auto& x : n) x = u(rng) + 0.3;
  auto f = [](std::vector<double> v) {
    for (auto& x : v) x = std::exp(3.0 * x) + 1.0;
    return v;
  };
  const auto a = roc_of(m, n), b = roc_of(f(m), f(n));
  CHECK(a.auc == b.auc);
  CHECK(a.tpr_at_fpr(0.1) == b.tpr_at_fpr(0.1));
  CHECK(a.auc > 0.5);
}

TEST_CASE("degenerate and invalid score sets") {
  const auto c = roc_of({2, 2, 2}, {2, 2});
  CHECK(c.degenerate);
  CHECK(c.auc == 0.5);
  CHECK_THROWS_AS(roc_of({}, {1}), Error);
  CHECK_THROWS_AS(roc_of({1}, {}), Error);
  CHECK_THROWS_AS(roc_of({1, std::nan("")}, {1}), Error);
}

TEST_CASE("zlib ratio and compressed sizes") {
  CHECK(zlib_ratio(100.0, 50) == 0.25);
  CHECK_THROWS_AS(zlib_ratio(1.0, 0), Error);
  // sizes from Python's zlib.compress at the default level
  CHECK(deflate_size("") == 8);
  CHECK(deflate_size("a") == 9);
  CHECK(deflate_size("hello hello hello hello") == 16);
  std::string pangram;
  for (int i = 0; i < 20; ++i) pangram += "The quick brown fox jumps over the lazy dog. ";
  CHECK(deflate_size(pangram) == 61);
  std::string ramp;
  for (int r = 0; r < 4; ++r) {
    for (int b = 0; b < 256; ++b) ramp.push_back(static_cast<char>(b));
  }
  CHECK(deflate_size(ramp) == 286);
}

TEST_CASE("scores under the uniform model") {
  ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 32;
  mc.n_heads = 2;
  mc.context_len = 16;
  const auto state = init_model<float>(mc, 1);  // zero head: uniform predictions
  const auto text = normalize_text("a document longer than one context window, scored in pieces");
  const auto tokens = tokenize(text, true);
  const auto [sum, count] = total_nll(state, tokens);
  CHECK(count == tokens.size() - 1);
  CHECK(loss_score(state, tokens) == doctest::Approx(std::log(258.0)).epsilon(1e-6));
  const double expected = sum / (8.0 * static_cast<double>(deflate_size(text.str())));
  CHECK(zlib_score(state, text) == doctest::Approx(expected).epsilon(1e-12));
}
