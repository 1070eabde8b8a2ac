#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "goldfish/errors.hpp"
#include "goldfish/harness.hpp"

using namespace goldfish;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment(Preset preset, const std::string& out) {
  ExperimentConfig c = preset_config(preset);
  c.synth.vocab_words = 300;
  c.synth.min_tokens = 40;
  c.synth.max_tokens = 60;
  c.num_canaries = 6;
  c.num_heldout = 20;
  c.num_background = 30;
  c.canary_repeats = 3;
  c.model.n_layers = 1;
  c.model.d_model = 32;
  c.model.n_heads = 2;
  c.model.context_len = 64;
  c.ext.prefix_len = 8;
  c.ext.suffix_len = 16;
  c.train.batch_size_tokens = 256;
  c.train.warmup_steps = 2;
  c.base_train.batch_size_tokens = 256;
  c.base_train.warmup_steps = 1;
  c.beam_width = 3;
  c.masks = {MaskConfig{}, MaskConfig{MaskStrategy::Static, 3, 13, 0}, MaskConfig{MaskStrategy::Random, 4, 13, 0}};
  c.output_dir = out;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::map<TokenSeq, std::size_t> count_docs(std::span<const TrainStreamItem> stream) {
  std::map<TokenSeq, std::size_t> m;
  for (const auto& it : stream) ++m[it.tokens];
  return m;
}

}  // namespace

TEST_CASE("extreme stream is the canary set repeated") {
  ExperimentConfig c = preset_config(Preset::Extreme);
  c.num_heldout = 120;
  const auto data = load_data(c);
  REQUIRE(data.canaries.size() == 100);
  CHECK(data.nonmembers.size() == 100);
  const auto stream = build_stream(c, data, 1, false);
  CHECK(stream.size() == 100 * 100);
  for (const auto& [doc, n] : count_docs(stream)) CHECK(n == 100);
  for (std::size_t i = 0; i < stream.size(); ++i) CHECK(stream[i].sequence_id == i);

  // the control is the base model, trained on background text only
  CHECK(build_stream(c, data, 1, true).empty());
  const auto base = build_base_stream(c, data);
  CHECK(base.size() >= data.background.size());
  CHECK_NOTHROW(assert_no_canaries(base, data.canaries, c.model.context_len));
  CHECK_THROWS_AS(assert_no_canaries(stream, data.canaries, c.model.context_len), CorpusError);

  // membership pools are disjoint
  std::set<std::string> text;
  for (const auto& d : data.canaries.documents) text.insert(d.text.str());
  for (const auto& d : data.nonmembers.documents) CHECK(text.count(d.text.str()) == 0);
  for (const auto& d : data.background.documents) CHECK(text.count(d.text.str()) == 0);
}

TEST_CASE("standard-mini stream inserts canaries into one background pass") {
  ExperimentConfig c = tiny_experiment(Preset::StandardMini, "unused");
  c.num_canaries = 20;
  c.canary_repeats = 50;
  const auto data = load_data(c);
  const auto stream = build_stream(c, data, 7, false);
  CHECK(stream.size() == 1000 + 30);
  std::size_t canary_items = 0;
  const auto counts = count_docs(stream);
  for (const auto& d : data.canaries.documents) {
    REQUIRE(counts.count(d.tokens));
    CHECK(counts.at(d.tokens) == 50);
    canary_items += counts.at(d.tokens);
  }
  CHECK(canary_items == 1000);
  // background order is preserved
  std::vector<TokenSeq> bg;
  std::set<TokenSeq> canary_set;
  for (const auto& d : data.canaries.documents) canary_set.insert(d.tokens);
  for (const auto& it : stream) {
    if (!canary_set.count(it.tokens)) bg.push_back(it.tokens);
  }
  REQUIRE(bg.size() == 30);
  for (std::size_t i = 0; i < 30; ++i) CHECK(bg[i] == data.background[i].tokens);

  const auto again = build_stream(c, data, 7, false);
  REQUIRE(again.size() == stream.size());
  for (std::size_t i = 0; i < stream.size(); ++i) CHECK(again[i].tokens == stream[i].tokens);
  const auto other = build_stream(c, data, 8, false);
  bool differs = false;
  for (std::size_t i = 0; i < stream.size(); ++i) differs = differs || other[i].tokens != stream[i].tokens;
  CHECK(differs);

  const auto control = build_stream(c, data, 7, true);
  CHECK(control.size() == 30);
  CHECK_NOTHROW(assert_no_canaries(control, data.canaries, c.model.context_len));
}

TEST_CASE("data loading is deterministic and length-matched") {
  const ExperimentConfig c = tiny_experiment(Preset::Extreme, "unused");
  const auto a = load_data(c), b = load_data(c);
  REQUIRE(a.canaries.size() == b.canaries.size());
  for (std::size_t i = 0; i < a.canaries.size(); ++i) CHECK(a.canaries[i].tokens == b.canaries[i].tokens);

  Corpus targets, pool;
  for (const int len : {10, 20, 30}) targets.documents.push_back(make_document("t" + std::to_string(len), std::string(static_cast<std::size_t>(len - 1), 'x')));
  for (const int len : {5, 11, 19, 25, 31, 50}) pool.documents.push_back(make_document("p" + std::to_string(len), std::string(static_cast<std::size_t>(len - 1), 'y')));
  const auto m = match_by_length(targets, pool);
  std::set<std::string> ids;
  for (const auto& d : m.documents) ids.insert(d.id);
  CHECK(ids == std::set<std::string>{"p11", "p19", "p31"});
  CHECK_THROWS_AS(match_by_length(pool, targets), CorpusError);
}

TEST_CASE("config files merge over the preset") {
  const auto dir = fs::temp_directory_path() / "goldfish_test_cfg";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "c.json");
    out << R"({"preset": "standard-mini", "canary_repeats": 7, "train": {"max_lr": 0.001},
               "masks": [{"strategy": "static", "k": 3}]})";
  }
  const auto c = load_experiment_config(dir / "c.json");
  const auto base = preset_config(Preset::StandardMini);
  CHECK(c.preset == Preset::StandardMini);
  CHECK(c.canary_repeats == 7);
  CHECK(c.train.max_lr == 0.001);
  CHECK(c.train.min_lr == base.train.min_lr);
  CHECK(c.model == base.model);
  REQUIRE(c.masks.size() == 1);
  CHECK(c.masks[0].strategy == MaskStrategy::Static);
  CHECK(c.masks[0].k == 3);

  const auto round = experiment_from_json(to_json(c));
  CHECK(to_json(round) == to_json(c));

  {
    std::ofstream out(dir / "bad.json");
    out << R"({"preset": "huge"})";
  }
  CHECK_THROWS_AS(load_experiment_config(dir / "bad.json"), ConfigError);
  {
    std::ofstream out(dir / "bad2.json");
    out << R"({"masks": [{"strategy": "static", "k": 1}]})";
  }
  CHECK_THROWS_AS(load_experiment_config(dir / "bad2.json").validate(), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(dir / "absent.json"), IoError);
}

TEST_CASE("rouge histogram and median") {
  std::vector<ExtractionRecord> recs(5);
  const double vals[5] = {0.0, 0.04, 0.5, 0.99, 1.0};
  for (std::size_t i = 0; i < 5; ++i) recs[i].rougeL = vals[i];
  const auto h = rouge_histogram(recs);
  CHECK(h[0] == 2);
  CHECK(h[10] == 1);
  CHECK(h[19] == 2);
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}

TEST_CASE("end-to-end matrix on a tiny model") {
  const auto root = fs::temp_directory_path() / "goldfish_test_matrix";
  fs::remove_all(root);
  ExperimentConfig c = tiny_experiment(Preset::Extreme, (root / "a").string());
  const auto reports = run_matrix(c);
  REQUIRE(reports.size() == 4);
  CHECK(reports[0].run_id == "none");
  CHECK(reports[1].run_id == "static-3");
  CHECK(reports[2].run_id == "random-4");
  CHECK(reports[3].run_id == "control");
  for (const auto& r : reports) {
    CAPTURE(r.run_id);
    CHECK(r.ok);
    CHECK(r.extraction_docs == 6);
    std::size_t total = 0;
    for (const auto v : r.rougeL_hist) total += v;
    CHECK(total == 6);
    REQUIRE(r.mia.size() == 2);
    REQUIRE(r.beam_exact_match_rate.has_value());
    CHECK(r.stream_items == (r.control ? 0u : 18u));
  }
  CHECK(reports[3].input_tokens == 0);
  CHECK(fs::exists(root / "a/base/model.ckpt"));
  CHECK(reports[0].supervised_tokens == reports[0].input_tokens);
  CHECK(reports[1].supervised_tokens < reports[1].input_tokens);
  CHECK(reports[1].input_tokens == reports[0].input_tokens);
  REQUIRE(reports[1].divergence.has_value());
  std::size_t at_dropped = 0;
  for (const auto& [pos, n] : reports[1].divergence->divergence_histogram) {
    if ((pos + 1) % 3 == 0) at_dropped += n;
  }
  CHECK(at_dropped == reports[1].divergence->num_diverged_at_dropped);
  CHECK_FALSE(reports[2].divergence.has_value());
  CHECK_FALSE(reports[2].divergence_note.empty());
  REQUIRE(reports[0].divergence.has_value());
  CHECK(reports[0].divergence->num_diverged_at_dropped == 0);

  emit_report(reports, c);
  const fs::path a = root / "a";
  for (const char* f : {"manifest.json", "matrix.csv", "rougeL_hist.svg", "none/summary.json",
                        "none/rougeL_hist.csv", "static-3/divergence.csv", "control/extraction.jsonl"}) {
    CAPTURE(f);
    CHECK(fs::exists(a / f));
  }

  // the same seed reproduces every trained model and extraction
  ExperimentConfig c2 = c;
  c2.output_dir = (root / "b").string();
  c2.masks = {MaskConfig{MaskStrategy::Static, 3, 13, 0}};
  c2.include_control = false;
  c2.run_beam = false;
  const auto again = run_matrix(c2);
  CHECK(slurp(a / "static-3/model.ckpt") == slurp(root / "b/static-3/model.ckpt"));
  CHECK(slurp(a / "static-3/extraction.jsonl") == slurp(root / "b/static-3/extraction.jsonl"));

  // re-emitting from the manifest reproduces the report files
  const auto loaded = load_reports(a);
  REQUIRE(loaded.size() == 4);
  const std::string matrix_before = slurp(a / "matrix.csv");
  const std::string summary_before = slurp(a / "static-3/summary.json");
  emit_report(loaded, c);
  CHECK(slurp(a / "matrix.csv") == matrix_before);
  CHECK(slurp(a / "static-3/summary.json") == summary_before);
}
