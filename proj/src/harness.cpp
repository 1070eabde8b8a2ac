#include "goldfish/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "goldfish/decoding.hpp"
#include "goldfish/errors.hpp"
#include "goldfish/mia.hpp"
#include "goldfish/serialize.hpp"
#include "rng.hpp"

namespace goldfish {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Preset p) { return p == Preset::Extreme ? "extreme" : "standard-mini"; }

Preset parse_preset(std::string_view name) {
  if (name == "extreme") return Preset::Extreme;
  if (name == "standard-mini") return Preset::StandardMini;
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected extreme or standard-mini)");
}

void ExperimentConfig::validate() const {
  synth.validate();
  model.validate();
  train.validate();
  base_train.validate();
  ext.validate();
  for (const auto& m : masks) m.validate();
  if (masks.empty() && !include_control) throw ConfigError("experiment has no runs");
  if (num_canaries < 1 && canary_corpus.empty()) throw ConfigError("num_canaries must be >= 1");
  if (num_heldout < 1 && heldout_corpus.empty()) throw ConfigError("num_heldout must be >= 1");
  if (canary_repeats < 1) throw ConfigError("canary_repeats must be >= 1");
  if (preset == Preset::StandardMini && num_background < 1 && background_corpus.empty()) {
    throw ConfigError("standard-mini needs a background corpus");
  }
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (ext.prefix_len + ext.suffix_len > model.context_len) {
    throw ConfigError("prefix_len + suffix_len exceeds context_len");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig preset_config(Preset preset) {
  ExperimentConfig c;
  c.preset = preset;
  c.model.n_layers = 2;
  c.model.d_model = 128;
  c.model.n_heads = 4;
  c.model.context_len = 256;
  // Short documents so that a ~0.5M-parameter model can memorize 100 of them.
  c.synth.min_tokens = 96;
  c.synth.max_tokens = 144;
  c.ext.prefix_len = 32;
  c.train.weight_decay = 0.1;
  if (preset == Preset::Extreme) {
    c.num_canaries = 100;
    c.num_heldout = 300;
    c.canary_repeats = 100;
    c.masks = {MaskConfig{MaskStrategy::None, 4, 13, 0}, MaskConfig{MaskStrategy::Static, 3, 13, 0},
               MaskConfig{MaskStrategy::Hashed, 4, 13, 0}};
    c.ext.suffix_len = 64;
    c.num_background = 4000;
    c.base_train.max_lr = 2e-3;
    c.base_train.min_lr = 2e-4;
    c.base_train.warmup_steps = 50;
    c.base_train.batch_size_tokens = 4096;
    c.train.max_lr = 5e-3;
    c.train.min_lr = 5e-5;
    c.train.warmup_steps = 100;
    c.train.batch_size_tokens = 512;
  } else {
    c.num_canaries = 100;
    c.num_background = 5000;
    c.num_heldout = 300;
    // 50 insertions leave the loss criterion near 0.85 at this size, where the
    // hashed/standard AUC gap is inside sampling noise.
    c.canary_repeats = 100;
    c.masks = {MaskConfig{MaskStrategy::None, 4, 13, 0}, MaskConfig{MaskStrategy::Hashed, 4, 13, 0}};
    c.ext.suffix_len = 64;
    c.train.max_lr = 5e-3;
    c.train.min_lr = 5e-5;
    c.train.warmup_steps = 100;
    c.train.batch_size_tokens = 512;
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  json masks = json::array();
  for (const auto& m : c.masks) masks.push_back(m);
  return json{{"preset", to_string(c.preset)},
              {"background_corpus", c.background_corpus},
              {"canary_corpus", c.canary_corpus},
              {"heldout_corpus", c.heldout_corpus},
              {"synth",
               {{"language_seed", c.synth.language_seed},
                {"vocab_words", c.synth.vocab_words},
                {"zipf_exponent", c.synth.zipf_exponent},
                {"min_tokens", c.synth.min_tokens},
                {"max_tokens", c.synth.max_tokens}}},
              {"num_canaries", c.num_canaries},
              {"num_background", c.num_background},
              {"num_heldout", c.num_heldout},
              {"canary_repeats", c.canary_repeats},
              {"masks", masks},
              {"include_control", c.include_control},
              {"model", c.model},
              {"train", c.train},
              {"base_train", c.base_train},
              {"ext", {{"prefix_len", c.ext.prefix_len}, {"suffix_len", c.ext.suffix_len}}},
              {"beam_width", c.beam_width},
              {"run_beam", c.run_beam},
              {"svg", c.svg},
              {"seed", c.seed},
              {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_from_json(const json& user) {
  const Preset preset = parse_preset(user.value("preset", std::string("extreme")));
  json j = to_json(preset_config(preset));
  // arrays replace, objects merge
  j.merge_patch(user);
  try {
    ExperimentConfig c;
    c.preset = preset;
    c.background_corpus = j.at("background_corpus").get<std::string>();
    c.canary_corpus = j.at("canary_corpus").get<std::string>();
    c.heldout_corpus = j.at("heldout_corpus").get<std::string>();
    const json& s = j.at("synth");
    c.synth.language_seed = s.at("language_seed").get<std::uint64_t>();
    c.synth.vocab_words = s.at("vocab_words").get<int>();
    c.synth.zipf_exponent = s.at("zipf_exponent").get<double>();
    c.synth.min_tokens = s.at("min_tokens").get<int>();
    c.synth.max_tokens = s.at("max_tokens").get<int>();
    c.num_canaries = j.at("num_canaries").get<int>();
    c.num_background = j.at("num_background").get<int>();
    c.num_heldout = j.at("num_heldout").get<int>();
    c.canary_repeats = j.at("canary_repeats").get<int>();
    c.masks.clear();
    for (const auto& m : j.at("masks")) c.masks.push_back(m.get<MaskConfig>());
    c.include_control = j.at("include_control").get<bool>();
    c.model = j.at("model").get<ModelConfig>();
    c.train = j.at("train").get<TrainConfig>();
    c.base_train = j.at("base_train").get<TrainConfig>();
    c.ext.prefix_len = j.at("ext").at("prefix_len").get<int>();
    c.ext.suffix_len = j.at("ext").at("suffix_len").get<int>();
    c.beam_width = j.at("beam_width").get<int>();
    c.run_beam = j.at("run_beam").get<bool>();
    c.svg = j.at("svg").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": expected a JSON object");
  return experiment_from_json(j);
}

// ---- data ----

Corpus match_by_length(const Corpus& targets, const Corpus& pool) {
  if (pool.size() < targets.size()) throw CorpusError("held-out pool is smaller than the canary set");
  std::vector<std::size_t> order(targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return targets[a].tokens.size() < targets[b].tokens.size();
  });
  std::multimap<std::size_t, std::size_t> free;  // length -> pool index
  for (std::size_t i = 0; i < pool.size(); ++i) free.emplace(pool[i].tokens.size(), i);
  std::vector<std::size_t> picked;
  for (const std::size_t t : order) {
    const std::size_t len = targets[t].tokens.size();
    auto hi = free.lower_bound(len);
    auto best = hi;
    if (hi == free.end() || (hi != free.begin() && len - std::prev(hi)->first <= hi->first - len)) {
      best = std::prev(hi);
    }
    picked.push_back(best->second);
    free.erase(best);
  }
  std::sort(picked.begin(), picked.end());
  Corpus out;
  for (const std::size_t i : picked) out.documents.push_back(pool[i]);
  return out;
}

namespace {

Corpus load_or_synth(const std::string& path, const SynthLanguage& lang, int count, std::uint64_t seed,
                     const std::string& prefix) {
  if (!path.empty()) return load_corpus(path);
  return lang.corpus(count, seed, prefix, "synthetic");
}

}  // namespace

ExperimentData load_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const SynthLanguage lang(cfg.synth);
  Rng rng(cfg.seed ^ 0x5eed5eed5eed5eedULL);
  const std::uint64_t s_canary = rng.next(), s_heldout = rng.next(), s_background = rng.next();
  ExperimentData d;
  d.canaries = load_or_synth(cfg.canary_corpus, lang, cfg.num_canaries, s_canary, "canary-");
  const Corpus pool = load_or_synth(cfg.heldout_corpus, lang, cfg.num_heldout, s_heldout, "heldout-");
  for (const auto& doc : d.canaries.documents) {
    if (doc.tokens.size() > static_cast<std::size_t>(cfg.model.context_len)) {
      throw CorpusError("canary '" + doc.id + "' has " + std::to_string(doc.tokens.size()) +
                        " tokens, longer than context_len " + std::to_string(cfg.model.context_len));
    }
    if (doc.tokens.size() <= static_cast<std::size_t>(cfg.ext.prefix_len)) {
      throw CorpusError("canary '" + doc.id + "' is not longer than prefix_len");
    }
  }
  d.nonmembers = match_by_length(d.canaries, pool);
  if (cfg.num_background > 0 || !cfg.background_corpus.empty()) {
    d.background = load_or_synth(cfg.background_corpus, lang, cfg.num_background, s_background, "bg-");
  }
  return d;
}

std::vector<TrainStreamItem> build_stream(const ExperimentConfig& cfg, const ExperimentData& data,
                                          std::uint64_t seed, bool control) {
  const int ctx = cfg.model.context_len;
  std::vector<TokenSeq> docs;
  auto push_doc = [&](const Document& d) {
    for (auto& b : split_blocks(d.tokens, ctx)) docs.push_back(std::move(b));
  };
  Rng rng(seed);
  if (cfg.preset == Preset::Extreme) {
    if (control) return {};
    const Corpus& src = data.canaries;
    std::vector<std::size_t> order(src.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.canary_repeats; ++epoch) {
      rng.shuffle(order.begin(), order.end());
      for (const std::size_t i : order) push_doc(src[i]);
    }
  } else {
    // canary copies land on seeded-random document boundaries of the background pass;
    // the insertion plan is drawn even for the control so the background order is shared
    const std::size_t nb = data.background.size();
    std::vector<std::pair<std::size_t, std::size_t>> inserts;  // (boundary, canary index)
    std::vector<std::size_t> copies;
    for (int r = 0; r < cfg.canary_repeats; ++r) {
      for (std::size_t i = 0; i < data.canaries.size(); ++i) copies.push_back(i);
    }
    rng.shuffle(copies.begin(), copies.end());
    for (const std::size_t c : copies) inserts.emplace_back(rng.below(nb + 1), c);
    std::stable_sort(inserts.begin(), inserts.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t next = 0;
    for (std::size_t b = 0; b <= nb; ++b) {
      for (; next < inserts.size() && inserts[next].first == b; ++next) {
        if (!control) push_doc(data.canaries[inserts[next].second]);
      }
      if (b < nb) push_doc(data.background[b]);
    }
  }
  std::vector<TrainStreamItem> stream;
  stream.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) stream.push_back({std::move(docs[i]), i});
  return stream;
}

std::vector<TrainStreamItem> build_base_stream(const ExperimentConfig& cfg, const ExperimentData& data) {
  std::vector<TrainStreamItem> stream;
  for (const auto& d : data.background.documents) {
    for (auto& b : split_blocks(d.tokens, cfg.model.context_len)) stream.push_back({std::move(b), stream.size()});
  }
  return stream;
}

std::optional<ModelState<float>> train_base(const ExperimentConfig& cfg, const ExperimentData& data,
                                            const ProgressFn& progress) {
  const auto stream = build_base_stream(cfg, data);
  if (stream.empty()) return std::nullopt;
  assert_no_canaries(stream, data.canaries, cfg.model.context_len);
  TrainConfig tc = cfg.base_train;
  tc.mask = MaskConfig{};
  tc.seed = cfg.seed;
  if (progress) progress("base: pretraining on " + std::to_string(stream.size()) + " blocks");
  long last_report = 0;
  TrainResult tr = train(stream, cfg.model, tc, [&](const TrainLogEntry& e) {
    if (progress && e.step - last_report >= 100) {
      last_report = e.step;
      std::ostringstream os;
      os << "base: step " << e.step << " loss " << e.loss;
      progress(os.str());
    }
  });
  const fs::path dir = fs::path(cfg.output_dir) / "base";
  fs::create_directories(dir);
  write_train_log(tr.log, (dir / "train_log.jsonl").string());
  save_checkpoint(tr.state, tc, (dir / "model.ckpt").string());
  return std::move(tr.state);
}

void assert_no_canaries(std::span<const TrainStreamItem> stream, const Corpus& canaries, int context_len) {
  std::set<TokenSeq> blocks;
  for (const auto& d : canaries.documents) {
    for (auto& b : split_blocks(d.tokens, context_len)) blocks.insert(std::move(b));
  }
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (blocks.count(stream[i].tokens)) {
      throw CorpusError("control stream item " + std::to_string(i) + " is a canary block");
    }
  }
}

// ---- reports ----

std::array<std::size_t, kRougeBins> rouge_histogram(std::span<const ExtractionRecord> records) {
  std::array<std::size_t, kRougeBins> h{};
  for (const auto& r : records) {
    const int b = std::clamp(static_cast<int>(std::floor(r.rougeL * kRougeBins)), 0, kRougeBins - 1);
    ++h[static_cast<std::size_t>(b)];
  }
  return h;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string run_id_for(const MaskConfig& mask, bool control) {
  return control ? std::string("control") : mask.label();
}

namespace {

json histogram_json(const std::map<int, std::size_t>& h) {
  json j = json::object();
  for (const auto& [pos, c] : h) j[std::to_string(pos)] = c;
  return j;
}

std::map<int, std::size_t> histogram_from_json(const json& j) {
  std::map<int, std::size_t> h;
  for (const auto& [k, v] : j.items()) h[std::stoi(k)] = v.get<std::size_t>();
  return h;
}

}  // namespace

json summary_json(const RunReport& r) {
  json j{{"run_id", r.run_id},
         {"mask", r.mask},
         {"control", r.control},
         {"ok", r.ok},
         {"train_log", r.train_log_path},
         {"checkpoint", r.checkpoint_path},
         {"final_loss", r.final_loss},
         {"train_seconds", r.train_seconds},
         {"stream_items", r.stream_items},
         {"input_tokens", r.input_tokens},
         {"supervised_tokens", r.supervised_tokens},
         {"extraction",
          {{"num_docs", r.extraction_docs},
           {"exact_match_rate", r.exact_match_rate},
           {"rougeL_median", r.rougeL_median},
           {"rougeL_mean", r.rougeL_mean},
           {"rougeL_hist", r.rougeL_hist}}}};
  if (!r.error.empty()) j["error"] = r.error;
  if (r.divergence) {
    const auto& d = *r.divergence;
    j["divergence"] = {{"num_docs", d.num_docs},
                       {"num_diverged", d.num_diverged},
                       {"num_diverged_at_dropped", d.num_diverged_at_dropped},
                       {"pct_diverged_at_dropped_index", d.pct_diverged_at_dropped_index},
                       {"divergence_histogram", histogram_json(d.divergence_histogram)},
                       {"drop_histogram", histogram_json(d.drop_histogram)}};
  }
  if (!r.divergence_note.empty()) j["divergence_note"] = r.divergence_note;
  json mia = json::array();
  for (const auto& m : r.mia) {
    mia.push_back({{"criterion", m.criterion},
                   {"auc", m.auc},
                   {"tpr_at_fpr_0.001", m.tpr_at_fpr_0_001},
                   {"degenerate", m.degenerate},
                   {"n_members", m.n_members},
                   {"n_nonmembers", m.n_nonmembers}});
  }
  j["mia"] = mia;
  if (r.beam_exact_match_rate) {
    j["beam"] = {{"width", r.beam_width},
                 {"greedy_exact_match_rate", r.exact_match_rate},
                 {"beam_exact_match_rate", *r.beam_exact_match_rate}};
  }
  return j;
}

RunReport report_from_summary(const json& j) {
  try {
    RunReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.mask = j.at("mask").get<MaskConfig>();
    r.control = j.at("control").get<bool>();
    r.ok = j.at("ok").get<bool>();
    r.error = j.value("error", std::string());
    r.train_log_path = j.at("train_log").get<std::string>();
    r.checkpoint_path = j.at("checkpoint").get<std::string>();
    r.final_loss = j.at("final_loss").get<double>();
    r.train_seconds = j.at("train_seconds").get<double>();
    r.stream_items = j.at("stream_items").get<std::size_t>();
    r.input_tokens = j.at("input_tokens").get<std::size_t>();
    r.supervised_tokens = j.at("supervised_tokens").get<std::size_t>();
    const json& e = j.at("extraction");
    r.extraction_docs = e.at("num_docs").get<std::size_t>();
    r.exact_match_rate = e.at("exact_match_rate").get<double>();
    r.rougeL_median = e.at("rougeL_median").get<double>();
    r.rougeL_mean = e.at("rougeL_mean").get<double>();
    r.rougeL_hist = e.at("rougeL_hist").get<std::array<std::size_t, kRougeBins>>();
    if (j.contains("divergence")) {
      const json& d = j["divergence"];
      DivergenceReport rep;
      rep.num_docs = d.at("num_docs").get<std::size_t>();
      rep.num_diverged = d.at("num_diverged").get<std::size_t>();
      rep.num_diverged_at_dropped = d.at("num_diverged_at_dropped").get<std::size_t>();
      rep.pct_diverged_at_dropped_index = d.at("pct_diverged_at_dropped_index").get<double>();
      rep.divergence_histogram = histogram_from_json(d.at("divergence_histogram"));
      rep.drop_histogram = histogram_from_json(d.at("drop_histogram"));
      r.divergence = std::move(rep);
    }
    r.divergence_note = j.value("divergence_note", std::string());
    for (const auto& m : j.at("mia")) {
      r.mia.push_back({m.at("criterion").get<std::string>(), m.at("auc").get<double>(),
                       m.at("tpr_at_fpr_0.001").get<double>(), m.at("degenerate").get<bool>(),
                       m.at("n_members").get<std::size_t>(), m.at("n_nonmembers").get<std::size_t>()});
    }
    if (j.contains("beam")) {
      r.beam_width = j["beam"].at("width").get<int>();
      r.beam_exact_match_rate = j["beam"].at("beam_exact_match_rate").get<double>();
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("run summary: ") + e.what());
  }
}

namespace {

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_scores_csv(const fs::path& path, const Corpus& members, std::span<const double> ms,
                      const Corpus& nonmembers, std::span<const double> ns) {
  std::ostringstream os;
  os.precision(17);
  os << "doc_id,member,score\n";
  for (std::size_t i = 0; i < ms.size(); ++i) os << members[i].id << ",1," << ms[i] << '\n';
  for (std::size_t i = 0; i < ns.size(); ++i) os << nonmembers[i].id << ",0," << ns[i] << '\n';
  write_text(path, os.str());
}

}  // namespace

RunReport run_one(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& run_id,
                  const MaskConfig& mask, bool control, const ModelState<float>* base, const ProgressFn& progress) {
  RunReport r;
  r.run_id = run_id;
  r.control = control;
  r.mask = control ? MaskConfig{} : mask;
  auto say = [&](const std::string& msg) {
    if (progress) progress(run_id + ": " + msg);
  };
  try {
    const fs::path dir = fs::path(cfg.output_dir) / run_id;
    fs::create_directories(dir);
    const auto stream = build_stream(cfg, data, cfg.seed, control);
    if (control) assert_no_canaries(stream, data.canaries, cfg.model.context_len);
    r.stream_items = stream.size();

    TrainConfig tc = cfg.train;
    tc.mask = r.mask;
    tc.seed = cfg.seed;
    TrainResult tr;
    if (stream.empty()) {
      // nothing to train on: evaluate the starting point
      tr.state = base ? *base : init_model<float>(cfg.model, tc.seed, tc.init_std);
      say("no training stream; evaluating the " + std::string(base ? "base" : "untrained") + " model");
    } else {
      say("training on " + std::to_string(stream.size()) + " blocks");
      const auto t0 = std::chrono::steady_clock::now();
      long last_report = 0;
      auto on_step = [&](const TrainLogEntry& e) {
        if (e.step - last_report >= 100) {
          last_report = e.step;
          std::ostringstream os;
          os << "step " << e.step << " loss " << e.loss;
          say(os.str());
        }
      };
      tr = base ? train(stream, *base, tc, on_step) : train(stream, cfg.model, tc, on_step);
      r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    for (const auto& e : tr.log) {
      r.input_tokens += e.input_tokens;
      r.supervised_tokens += e.supervised_tokens;
    }
    if (!tr.log.empty()) r.final_loss = tr.log.back().loss;
    r.train_log_path = run_id + "/train_log.jsonl";
    r.checkpoint_path = run_id + "/model.ckpt";
    write_train_log(tr.log, (dir / "train_log.jsonl").string());
    save_checkpoint(tr.state, tc, (dir / "model.ckpt").string());

    const TransformerLM lm(tr.state);
    say("greedy extraction");
    r.records = extract_all(lm, data.canaries, cfg.ext);
    write_records_jsonl(r.records, (dir / "extraction.jsonl").string());
    r.extraction_docs = r.records.size();
    r.exact_match_rate = exact_match_rate(r.records);
    std::vector<double> rl;
    for (const auto& rec : r.records) rl.push_back(rec.rougeL);
    r.rougeL_median = median(rl);
    r.rougeL_mean = rl.empty() ? 0.0 : std::accumulate(rl.begin(), rl.end(), 0.0) / static_cast<double>(rl.size());
    r.rougeL_hist = rouge_histogram(r.records);

    if (r.mask.strategy == MaskStrategy::Random) {
      r.divergence_note = "random masks change per stream copy; divergence analysis skipped";
    } else {
      r.divergence = divergence_from_records(r.records, data.canaries, r.mask, cfg.ext);
      r.divergence->records.clear();
    }

    say("membership inference");
    for (const MiaCriterion crit : {MiaCriterion::Loss, MiaCriterion::Zlib}) {
      MiaScoreSet s;
      s.criterion = crit;
      s.member_scores = score_documents(tr.state, data.canaries, crit);
      s.nonmember_scores = score_documents(tr.state, data.nonmembers, crit);
      const RocCurve curve = roc(s);
      const std::string name(to_string(crit));
      write_roc_csv(curve, (dir / ("roc_" + name + ".csv")).string());
      write_scores_csv(dir / ("scores_" + name + ".csv"), data.canaries, s.member_scores, data.nonmembers,
                       s.nonmember_scores);
      r.mia.push_back({name, curve.auc, curve.tpr_at_fpr(0.001), curve.degenerate, curve.n_members,
                       curve.n_nonmembers});
    }

    if (cfg.run_beam) {
      say("beam search, width " + std::to_string(cfg.beam_width));
      BeamConfig bc;
      bc.width = cfg.beam_width;
      r.beam_records = extract_all(lm, data.canaries, cfg.ext, &bc);
      write_records_jsonl(r.beam_records, (dir / "beam_extraction.jsonl").string());
      r.beam_width = cfg.beam_width;
      r.beam_exact_match_rate = exact_match_rate(r.beam_records);
    }
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    say(std::string("failed: ") + e.what());
  }
  return r;
}

std::vector<RunReport> run_matrix(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const ExperimentData data = load_data(cfg);
  std::optional<ModelState<float>> base;
  if (cfg.preset == Preset::Extreme) base = train_base(cfg, data, progress);
  std::vector<RunReport> out;
  std::set<std::string> ids;
  auto add = [&](const MaskConfig& m, bool control) {
    const std::string id = run_id_for(m, control);
    if (!ids.insert(id).second) throw ConfigError("duplicate run id '" + id + "' in the mask matrix");
    out.push_back(run_one(cfg, data, id, m, control, base ? &*base : nullptr, progress));
  };
  for (const auto& m : cfg.masks) add(m, false);
  if (cfg.include_control) add(MaskConfig{}, true);
  return out;
}

// ---- emission ----

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

std::string bar_svg(const std::string& title, const std::vector<std::string>& labels,
                    const std::vector<std::vector<double>>& series, const std::vector<std::string>& names) {
  static const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52"};
  const double W = 640, H = 320, L = 50, R = 20, T = 36, B = 50;
  double vmax = 0;
  for (const auto& s : series) {
    for (const double v : s) vmax = std::max(vmax, v);
  }
  if (vmax <= 0) vmax = 1;
  const std::size_t n = labels.size();
  const double slot = (W - L - R) / static_cast<double>(std::max<std::size_t>(n, 1));
  const double bw = slot * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
     << "font-size=\"10\">" << fmt(vmax) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = i < series[s].size() ? series[s][i] : 0.0;
      const double h = (H - T - B) * v / vmax;
      os << "<rect x=\"" << fmt(L + slot * static_cast<double>(i) + slot * 0.1 + bw * static_cast<double>(s))
         << "\" y=\"" << fmt(H - B - h) << "\" width=\"" << fmt(bw) << "\" height=\"" << fmt(h) << "\" fill=\""
         << colors[s % 4] << "\"/>\n";
    }
  }
  const std::size_t step = std::max<std::size_t>(1, n / 10);
  for (std::size_t i = 0; i < n; i += step) {
    os << "<text x=\"" << fmt(L + slot * (static_cast<double>(i) + 0.5)) << "\" y=\"" << H - B + 14
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << labels[i] << "</text>\n";
  }
  for (std::size_t s = 0; s < names.size(); ++s) {
    os << "<text x=\"" << fmt(L + 120.0 * static_cast<double>(s)) << "\" y=\"" << H - 12
       << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colors[s % 4] << "\">" << names[s]
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string rouge_csv(const RunReport& r) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  for (int b = 0; b < kRougeBins; ++b) {
    os << fmt(static_cast<double>(b) / kRougeBins) << ',' << fmt(static_cast<double>(b + 1) / kRougeBins) << ','
       << r.rougeL_hist[static_cast<std::size_t>(b)] << '\n';
  }
  return os.str();
}

}  // namespace

void emit_report(std::span<const RunReport> reports, const ExperimentConfig& cfg) {
  const fs::path root(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create output dir " + root.string() + ": " + ec.message());

  json runs = json::array();
  bool partial = false;
  std::ostringstream matrix;
  matrix << "run_id,strategy,k,ok,exact_match_rate,rougeL_median,pct_diverged_at_dropped,auc_loss,auc_zlib,"
            "beam_exact_match_rate\n";
  for (const auto& r : reports) {
    const fs::path dir = root / r.run_id;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    partial = partial || !r.ok;
    std::vector<std::string> artifacts;
    auto emit = [&](const std::string& name, const std::string& content) {
      write_text(dir / name, content);
      artifacts.push_back(r.run_id + "/" + name);
    };
    emit("summary.json", summary_json(r).dump(2) + "\n");
    emit("rougeL_hist.csv", rouge_csv(r));
    if (r.divergence) {
      std::map<int, std::pair<std::size_t, std::size_t>> rows;
      for (const auto& [pos, c] : r.divergence->drop_histogram) rows[pos].first = c;
      for (const auto& [pos, c] : r.divergence->divergence_histogram) rows[pos].second = c;
      std::ostringstream os;
      os << "position,drop_count,divergence_count\n";
      for (const auto& [pos, c] : rows) os << pos << ',' << c.first << ',' << c.second << '\n';
      emit("divergence.csv", os.str());
      if (cfg.svg && !rows.empty()) {
        std::vector<std::string> labels;
        std::vector<double> drops, divs;
        for (const auto& [pos, c] : rows) {
          labels.push_back(std::to_string(pos));
          drops.push_back(static_cast<double>(c.first));
          divs.push_back(static_cast<double>(c.second));
        }
        emit("divergence.svg",
             bar_svg(r.run_id + ": dropped vs first-divergence positions", labels, {drops, divs},
                     {"dropped", "first divergence"}));
      }
    }
    if (cfg.svg) {
      std::vector<std::string> labels;
      std::vector<double> counts;
      for (int b = 0; b < kRougeBins; ++b) {
        labels.push_back(fmt(static_cast<double>(b) / kRougeBins));
        counts.push_back(static_cast<double>(r.rougeL_hist[static_cast<std::size_t>(b)]));
      }
      emit("rougeL_hist.svg", bar_svg(r.run_id + ": RougeL", labels, {counts}, {"documents"}));
    }
    for (const char* name : {"train_log.jsonl", "model.ckpt", "extraction.jsonl", "beam_extraction.jsonl",
                             "roc_loss.csv", "roc_zlib.csv", "scores_loss.csv", "scores_zlib.csv"}) {
      if (fs::exists(dir / name)) artifacts.push_back(r.run_id + "/" + name);
    }
    std::sort(artifacts.begin(), artifacts.end());
    runs.push_back({{"run_id", r.run_id}, {"ok", r.ok}, {"summary", r.run_id + "/summary.json"},
                    {"artifacts", artifacts}});

    double auc_loss = std::nan(""), auc_zlib = std::nan("");
    for (const auto& m : r.mia) (m.criterion == "loss" ? auc_loss : auc_zlib) = m.auc;
    matrix << r.run_id << ',' << to_string(r.mask.strategy) << ',' << r.mask.k << ',' << (r.ok ? 1 : 0) << ','
           << fmt(r.exact_match_rate) << ',' << fmt(r.rougeL_median) << ','
           << (r.divergence ? fmt(r.divergence->pct_diverged_at_dropped_index) : "") << ','
           << (std::isnan(auc_loss) ? "" : fmt(auc_loss)) << ',' << (std::isnan(auc_zlib) ? "" : fmt(auc_zlib))
           << ',' << (r.beam_exact_match_rate ? fmt(*r.beam_exact_match_rate) : "") << '\n';
  }
  write_text(root / "matrix.csv", matrix.str());
  if (cfg.svg && !reports.empty()) {
    std::vector<std::string> labels;
    for (int b = 0; b < kRougeBins; ++b) labels.push_back(fmt(static_cast<double>(b) / kRougeBins));
    std::vector<std::vector<double>> series;
    std::vector<std::string> names;
    for (const auto& r : reports) {
      if (series.size() == 4) break;
      std::vector<double> s;
      for (const auto c : r.rougeL_hist) s.push_back(static_cast<double>(c));
      series.push_back(std::move(s));
      names.push_back(r.run_id);
    }
    write_text(root / "rougeL_hist.svg", bar_svg("RougeL by run", labels, series, names));
  }
  json manifest{{"preset", to_string(cfg.preset)},
                {"config", to_json(cfg)},
                {"partial", partial},
                {"matrix", "matrix.csv"},
                {"runs", runs}};
  if (fs::exists(root / "base" / "model.ckpt")) {
    manifest["base"] = {{"checkpoint", "base/model.ckpt"}, {"train_log", "base/train_log.jsonl"}};
  }
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<RunReport> load_reports(const fs::path& output_dir) {
  std::ifstream in(output_dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (output_dir / "manifest.json").string());
  std::vector<RunReport> out;
  try {
    const json m = json::parse(in);
    for (const auto& run : m.at("runs")) {
      std::ifstream s(output_dir / run.at("summary").get<std::string>());
      if (!s) throw IoError("missing run summary for " + run.at("run_id").get<std::string>());
      out.push_back(report_from_summary(json::parse(s)));
    }
  } catch (const json::exception& e) {
    throw IoError(output_dir.string() + "/manifest.json: " + e.what());
  }
  return out;
}

}  // namespace goldfish
