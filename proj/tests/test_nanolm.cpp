#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "goldfish/errors.hpp"
#include "goldfish/nanolm.hpp"
#include "goldfish/synth.hpp"
#include "gradcheck.hpp"

using namespace goldfish;
using goldfish::testing::tiny_config;

namespace {

TokenSeq random_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenSeq t(n);
  for (auto& x : t) x = static_cast<Token>(rng() % kVocabSize);
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.context_len = 32;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.d_model = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.context_len = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig t;
  t.min_lr = 1e-3;
  t.max_lr = 1e-4;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("forward shape, normalization and the zero head") {
  const auto state = init_model<float>(small_config(), 1);
  const auto tokens = random_tokens(16, 2);
  const auto logits = forward(state, tokens);
  CHECK(logits.rows == 16);
  CHECK(logits.cols == 258);
  for (const float v : logits.data) CHECK(v == 0.0f);
  const std::span<const Token> all(tokens);
  CHECK(clm_loss(logits, all) == doctest::Approx(std::log(258.0)).epsilon(1e-12));
  CHECK_THROWS_AS(forward(state, random_tokens(33, 1)), ShapeError);

  const auto random_head = init_model<double>(small_config(), 1, 0.02, false);
  const auto l2 = forward(random_head, tokens);
  for (int i = 0; i < l2.rows; ++i) {
    const auto lsm = log_softmax_row(l2.row(i), l2.cols);
    double sum = 0;
    for (const double v : lsm) sum += std::exp(v);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("clm and goldfish losses against hand computation") {
  // 3 positions, 3-way vocabulary
  Matrix<double> logits(3, 3);
  const double vals[9] = {1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 0.2, 0.2, 0.2};
  std::copy(vals, vals + 9, logits.data.begin());
  const TokenSeq targets = {1, 2, 0};
  double expected = 0;
  for (int i = 0; i < 3; ++i) {
    double z = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(logits(i, j));
    expected += -(logits(i, targets[static_cast<std::size_t>(i)]) - std::log(z));
  }
  expected /= 3;
  CHECK(std::abs(clm_loss(logits, std::span<const Token>(targets)) - expected) < 1e-10);

  const auto nll = token_nll(logits, std::span<const Token>(targets));
  const auto single = MaskVector::from_bits({0, 1, 0});
  CHECK(goldfish_loss(logits, std::span<const Token>(targets), single) == nll[1]);
  CHECK_THROWS_AS(goldfish_loss(logits, std::span<const Token>(targets), MaskVector::from_bits({0, 0, 0})),
                  DegenerateMaskError);
  CHECK_THROWS_AS(clm_loss(logits, std::span<const Token>(targets).first(2)), ShapeError);

  // uniform logits and confident logits
  Matrix<double> uniform(4, 258);
  const TokenSeq t4 = {1, 2, 3, 4};
  CHECK(std::abs(clm_loss(uniform, std::span<const Token>(t4)) - std::log(258.0)) < 1e-12);
  Matrix<double> sure(4, 258);
  for (int i = 0; i < 4; ++i) sure(i, t4[static_cast<std::size_t>(i)]) = 100.0;
  CHECK(clm_loss(sure, std::span<const Token>(t4)) < 1e-40);
}

TEST_CASE("static k=4 goldfish loss on 8 tokens is the mean over 6 supervised positions") {
  const auto state = init_model<double>(tiny_config(), 3, 0.3, false);
  const auto seq = random_tokens(9, 5);
  const std::span<const Token> all(seq);
  const auto logits = forward(state, all.first(8));
  const auto nll = token_nll(logits, all.subspan(1));
  const auto mask = static_mask(8, 4);
  double hand = 0;
  for (int i = 0; i < 8; ++i) {
    if (i != 3 && i != 7) hand += nll[static_cast<std::size_t>(i)];
  }
  CHECK(std::abs(goldfish_loss(logits, all.subspan(1), mask) - hand / 6) < 1e-14);
}

TEST_CASE("all-ones goldfish loss and gradient equal the causal LM ones") {
  const auto state = init_model<double>(tiny_config(), 4, 0.3, false);
  for (int trial = 0; trial < 20; ++trial) {
    const auto seq = random_tokens(13, 100 + static_cast<std::uint64_t>(trial));
    const std::span<const Token> all(seq);
    const auto logits = forward(state, all.first(12));
    const double a = clm_loss(logits, all.subspan(1));
    const double b = goldfish_loss(logits, all.subspan(1), all_ones_mask(12));
    CHECK(std::abs(a - b) <= 1e-12 * std::abs(a));
  }
  const auto seq = random_tokens(13, 9);
  const std::span<const Token> all(seq);
  const auto g = backward(state, all.first(12), all.subspan(1), all_ones_mask(12));
  Block blk{seq, all_ones_mask(13)};
  const auto gb = batch_gradients<double>(state, std::span<const Block>(&blk, 1));
  for (std::size_t i = 0; i < g.values.size(); ++i) CHECK(g.values[i] == doctest::Approx(gb.values[i]).epsilon(1e-12));
}

TEST_CASE("finite-difference gradient check") {
  for (const bool masked : {false, true}) {
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
      const auto r = goldfish::testing::finite_difference_check(seed, masked);
      CAPTURE(masked);
      CAPTURE(seed);
      CHECK(r.checked > 1000);
      CHECK(r.max_rel_error < 1e-3);
    }
  }
}

TEST_CASE("dropped positions condition the forward pass but carry no gradient") {
  auto state = init_model<double>(tiny_config(), 8, 0.3, false);
  const auto seq = random_tokens(13, 21);
  const std::span<const Token> all(seq);
  auto mask_bits = std::vector<std::uint8_t>(12, 1);
  mask_bits[11] = 0;
  const auto g_masked = backward(state, all.first(12), all.subspan(1), MaskVector::from_bits(mask_bits));
  // the last target only enters through its head row when supervised
  TokenSeq altered = seq;
  altered[12] = static_cast<Token>((seq[12] + 1) % kVocabSize);
  const std::span<const Token> all2(altered);
  const auto g_altered = backward(state, all2.first(12), all2.subspan(1), MaskVector::from_bits(mask_bits));
  CHECK(g_masked.values == g_altered.values);
  CHECK(g_masked.loss == g_altered.loss);
  // the forward pass is unchanged by masking
  const auto a = forward(state, all.first(12));
  CHECK(goldfish_loss(a, all.subspan(1), MaskVector::from_bits(mask_bits)) != clm_loss(a, all.subspan(1)));
}

TEST_CASE("causality") {
  const auto state = init_model<float>(small_config(), 5, 0.05, false);
  auto seq = random_tokens(20, 3);
  const auto base = forward(state, seq);
  seq[12] = static_cast<Token>((seq[12] + 7) % kVocabSize);
  const auto changed = forward(state, seq);
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < base.cols; ++j) REQUIRE(base(i, j) == changed(i, j));
  }
  bool differs = false;
  for (int j = 0; j < base.cols; ++j) differs = differs || base(12, j) != changed(12, j);
  CHECK(differs);
}

TEST_CASE("kv cache matches the full forward bitwise") {
  const auto state = init_model<float>(small_config(), 6, 0.05, false);
  const auto seq = random_tokens(32, 4);
  const auto full = forward(state, seq);
  KvCache<float> cache(state.config);
  const std::span<const Token> all(seq);
  auto first = cache.append(state, all.first(10));
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < full.cols; ++j) REQUIRE(first(i, j) == full(i, j));
  }
  for (int p = 10; p < 32; ++p) {
    const auto row = cache.append(state, all.subspan(static_cast<std::size_t>(p), 1));
    for (int j = 0; j < full.cols; ++j) REQUIRE(row(0, j) == full(p, j));
  }
  CHECK(cache.length() == 32);
  CHECK_THROWS_AS(cache.append(state, all.first(1)), ShapeError);

  KvCache<float> copy(state.config);
  copy.copy_prefix_from(cache, 20);
  const auto again = copy.append(state, all.subspan(20, 1));
  for (int j = 0; j < full.cols; ++j) CHECK(again(0, j) == full(20, j));
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.warmup_steps = 1000;
  c.total_steps = 9536;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(1000, c) == doctest::Approx(4e-4).epsilon(1e-12));
  CHECK(lr_at(9536, c) == doctest::Approx(4e-5).epsilon(1e-12));
  CHECK(lr_at(500, c) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_at(1000 + (9536 - 1000) / 2, c) == doctest::Approx(2.2e-4).epsilon(1e-9));
  double prev = lr_at(1000, c);
  for (long s = 1001; s <= 9536; s += 97) {
    const double v = lr_at(s, c);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS(lr_at(-1, c), ConfigError);
  CHECK_THROWS_AS(lr_at(9537, c), ConfigError);
}

TEST_CASE("adam step with decoupled decay") {
  auto state = init_model<double>(tiny_config(), 1);
  const auto layout = state.layout();
  const std::size_t i = layout.layers[0].w_fc;  // decayed tensor
  state.params[i] = 1.0;
  std::vector<double> g(state.params.size(), 0.0);
  g[i] = 1.0;
  TrainConfig c;
  c.weight_decay = 0.1;
  const auto before = state.params;
  adam_step<double>(state, g, c, 0.1);
  CHECK(std::abs(state.params[i] - (1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.1 * 1.0)) < 1e-9);
  CHECK(state.step == 1);
  // embeddings, norms and biases are not decayed
  const std::size_t wte = layout.wte, ln = layout.lnf_g;
  CHECK(state.params[wte] == before[wte]);
  CHECK(state.params[ln] == before[ln]);
  const std::size_t other = layout.layers[0].w_qkv;
  CHECK(state.params[other] == doctest::Approx(before[other] * (1.0 - 0.1 * 0.1)).epsilon(1e-12));

  auto fixed = init_model<double>(tiny_config(), 2);
  const auto p0 = fixed.params;
  c.weight_decay = 0.0;
  adam_step<double>(fixed, std::vector<double>(p0.size(), 0.0), c, 0.1);
  CHECK(fixed.params == p0);

  g[i] = std::nan("");
  CHECK_THROWS_AS(adam_step<double>(state, g, c, 0.1), NumericError);
}

TEST_CASE("training is deterministic and masks only change the loss") {
  const SynthLanguage lang(SynthConfig{});
  const Corpus docs = lang.corpus(24, 5, "d", "t");
  ModelConfig mc = small_config();
  mc.context_len = 64;
  std::vector<TrainStreamItem> stream;
  for (const auto& d : docs.documents) {
    for (auto& b : split_blocks(d.tokens, mc.context_len)) stream.push_back({std::move(b), stream.size()});
  }
  TrainConfig tc;
  tc.max_lr = 3e-3;
  tc.min_lr = 3e-4;
  tc.warmup_steps = 2;
  tc.batch_size_tokens = 512;
  tc.seed = 9;
  const auto a = train(stream, mc, tc);
  const auto b = train(stream, mc, tc);
  CHECK(a.state.params == b.state.params);
  std::size_t in = 0, sup = 0;
  for (const auto& e : a.log) {
    in += e.input_tokens;
    sup += e.supervised_tokens;
  }
  CHECK(in == sup);

  TrainConfig ts = tc;
  ts.mask = MaskConfig{MaskStrategy::Static, 4, 13, 0};
  const auto s = train(stream, mc, ts);
  REQUIRE(s.log.size() == a.log.size());
  for (std::size_t i = 0; i < s.log.size(); ++i) {
    CHECK(s.log[i].input_tokens == a.log[i].input_tokens);
    CHECK(s.log[i].supervised_tokens < s.log[i].input_tokens);
  }
  CHECK(a.log.back().loss < a.log.front().loss);
}

TEST_CASE("smoke training lowers held-out loss") {
  const SynthLanguage lang(SynthConfig{});
  const Corpus train_docs = lang.corpus(400, 1, "t", "t");
  const Corpus val_docs = lang.corpus(20, 2, "v", "v");
  ModelConfig mc = small_config();
  mc.context_len = 128;
  std::vector<TrainStreamItem> stream;
  for (const auto& d : train_docs.documents) {
    for (auto& b : split_blocks(d.tokens, mc.context_len)) stream.push_back({std::move(b), stream.size()});
  }
  TrainConfig tc;
  tc.max_lr = 3e-3;
  tc.min_lr = 3e-4;
  tc.warmup_steps = 10;
  tc.batch_size_tokens = 400;
  std::vector<TokenSeq> val;
  for (const auto& d : val_docs.documents) val.push_back(d.tokens);
  const auto init = init_model<float>(mc, tc.seed, tc.init_std);
  const auto r = train(stream, mc, tc);
  CHECK(r.log.size() >= 200);
  CHECK(evaluate_loss(r.state, val) < evaluate_loss(init, val) - 1.0);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "goldfish_test_ckpt";
  std::filesystem::create_directories(dir);
  auto state = init_model<float>(small_config(), 12, 0.05, false);
  state.adam_m[3] = 0.25f;
  state.adam_v[4] = 0.5f;
  state.step = 17;
  TrainConfig tc;
  tc.mask = MaskConfig{MaskStrategy::Hashed, 3, 7, 99};
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(state, tc, path);
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.state.config == state.config);
  CHECK(ck.state.params == state.params);
  CHECK(ck.state.adam_m == state.adam_m);
  CHECK(ck.state.adam_v == state.adam_v);
  CHECK(ck.state.step == 17);
  CHECK(ck.train_cfg.mask.strategy == MaskStrategy::Hashed);
  CHECK(ck.train_cfg.mask.h == 7);
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), IoError);
}
