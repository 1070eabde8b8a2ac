#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "goldfish/analytics.hpp"
#include "goldfish/decoding.hpp"
#include "goldfish/errors.hpp"
#include "goldfish/harness.hpp"
#include "goldfish/mask.hpp"
#include "goldfish/memo_metrics.hpp"
#include "goldfish/mia.hpp"
#include "goldfish/nanolm.hpp"
#include "goldfish/serialize.hpp"
#include "goldfish/synth.hpp"
#include "goldfish/textio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace goldfish;

namespace {

struct MaskFlags {
  std::string strategy = "none";
  int k = 4;
  int h = 13;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--mask", strategy, "none | static | random | hashed")->capture_default_str();
    app->add_option("--k", k, "drop frequency")->capture_default_str();
    app->add_option("--window", h, "hashed mask context width h")->capture_default_str();
    app->add_option("--mask-seed", seed, "hash / random mask seed")->capture_default_str();
  }
  MaskConfig get() const {
    MaskConfig m{parse_mask_strategy(strategy), k, h, seed};
    m.validate();
    return m;
  }
};

struct ExtFlags {
  int prefix = 32;
  int suffix = 64;

  void add(CLI::App* app) {
    app->add_option("--prefix", prefix, "prompt length in tokens (BOS included)")->capture_default_str();
    app->add_option("--suffix", suffix, "tokens to generate")->capture_default_str();
  }
  ExtractionConfig get() const {
    ExtractionConfig e{prefix, suffix};
    e.validate();
    return e;
  }
};

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

ExperimentConfig experiment(const std::string& config_path, const std::string& preset,
                            const std::optional<std::uint64_t>& seed, const std::string& out) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = load_experiment_config(config_path);
    if (!preset.empty() && parse_preset(preset) != cfg.preset) {
      json j = to_json(cfg);
      j["preset"] = preset;
      cfg = experiment_from_json(j);
    }
  } else {
    cfg = preset_config(parse_preset(preset.empty() ? "extreme" : preset));
  }
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.output_dir = out;
  return cfg;
}

void stderr_progress(const std::string& msg) { std::cerr << msg << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Goldfish-loss memorization experiments on a small byte-level transformer"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus as JSONL");
  std::string synth_out;
  int synth_count = 100;
  std::uint64_t synth_seed = 1;
  std::string synth_prefix = "doc-";
  SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "output .jsonl path")->required();
  synth->add_option("--count", synth_count, "number of documents")->capture_default_str();
  synth->add_option("--seed", synth_seed, "document seed")->capture_default_str();
  synth->add_option("--id-prefix", synth_prefix)->capture_default_str();
  synth->add_option("--language-seed", synth_cfg.language_seed)->capture_default_str();
  synth->add_option("--vocab-words", synth_cfg.vocab_words)->capture_default_str();
  synth->add_option("--min-tokens", synth_cfg.min_tokens)->capture_default_str();
  synth->add_option("--max-tokens", synth_cfg.max_tokens)->capture_default_str();

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "Train one model on a corpus");
  std::string train_corpus, train_out, train_config, train_preset, train_init;
  int train_epochs = 1;
  std::optional<std::uint64_t> train_seed;
  MaskFlags train_mask;
  train_cmd->add_option("--corpus", train_corpus, "training corpus (.jsonl or directory of .txt)")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--epochs", train_epochs, "passes over the corpus (shuffled each pass)")
      ->capture_default_str();
  train_cmd->add_option("--config", train_config, "experiment config JSON supplying model and train settings");
  train_cmd->add_option("--preset", train_preset, "extreme | standard-mini");
  train_cmd->add_option("--seed", train_seed, "training seed");
  train_cmd->add_option("--init", train_init, "continue from this checkpoint's weights (model settings come from it)");
  train_mask.add(train_cmd);

  // ---- extract ----
  auto* extract = app.add_subcommand("extract", "Greedy (or beam) extraction of document suffixes");
  std::string ex_ckpt, ex_corpus, ex_out;
  int ex_beam = 0;
  ExtFlags ex_flags;
  extract->add_option("--checkpoint", ex_ckpt)->required();
  extract->add_option("--corpus", ex_corpus)->required();
  extract->add_option("--out", ex_out, "records .jsonl path");
  extract->add_option("--beam", ex_beam, "beam width (0 = greedy)")->capture_default_str();
  ex_flags.add(extract);

  // ---- divergence ----
  auto* divergence = app.add_subcommand("divergence", "First-divergence position versus dropped positions");
  std::string dv_ckpt, dv_corpus, dv_out;
  ExtFlags dv_flags;
  MaskFlags dv_mask;
  divergence->add_option("--checkpoint", dv_ckpt)->required();
  divergence->add_option("--corpus", dv_corpus)->required();
  divergence->add_option("--out", dv_out, "output directory");
  dv_flags.add(divergence);
  dv_mask.add(divergence);

  // ---- mia ----
  auto* mia = app.add_subcommand("mia", "Membership inference ROC for one criterion");
  std::string mia_ckpt, mia_members, mia_nonmembers, mia_out, mia_crit = "loss";
  mia->add_option("--checkpoint", mia_ckpt)->required();
  mia->add_option("--members", mia_members)->required();
  mia->add_option("--nonmembers", mia_nonmembers)->required();
  mia->add_option("--criterion", mia_crit, "loss | zlib")->capture_default_str();
  mia->add_option("--out", mia_out, "output directory");

  // ---- beam ----
  auto* beam = app.add_subcommand("beam", "Beam-search attack versus greedy decoding");
  std::string bm_ckpt, bm_corpus, bm_out;
  int bm_width = 30;
  ExtFlags bm_flags;
  beam->add_option("--checkpoint", bm_ckpt)->required();
  beam->add_option("--corpus", bm_corpus)->required();
  beam->add_option("--width", bm_width)->capture_default_str();
  beam->add_option("--out", bm_out, "output directory");
  bm_flags.add(beam);

  // ---- remark ----
  auto* remark = app.add_subcommand("remark", "Closed-form regeneration probabilities and token accounting");
  double rm_p = 0.999, rm_q = 0.95, rm_k = 3, rm_n = 256;
  std::optional<std::uint64_t> rm_supervised, rm_input;
  remark->add_option("--p", rm_p, "per-token probability on supervised tokens")->capture_default_str();
  remark->add_option("--q", rm_q, "per-token probability on dropped tokens")->capture_default_str();
  remark->add_option("--k", rm_k, "drop frequency")->capture_default_str();
  remark->add_option("--n", rm_n, "suffix length")->capture_default_str();
  remark->add_option("--supervised", rm_supervised, "report input tokens needed for this many supervised tokens");
  remark->add_option("--input", rm_input, "report supervised tokens for this many input tokens");

  // ---- matrix ----
  auto* matrix = app.add_subcommand("matrix", "Train and evaluate the full run matrix");
  std::string mx_config, mx_preset, mx_out;
  std::optional<std::uint64_t> mx_seed;
  bool mx_no_beam = false;
  matrix->add_option("--config", mx_config, "experiment config JSON");
  matrix->add_option("--preset", mx_preset, "extreme | standard-mini");
  matrix->add_option("--seed", mx_seed);
  matrix->add_option("--out", mx_out, "output directory");
  matrix->add_flag("--no-beam", mx_no_beam, "skip the beam-search attack");

  // ---- report ----
  auto* report = app.add_subcommand("report", "Re-emit summaries, CSVs and SVGs from a finished matrix");
  std::string rp_out;
  report->add_option("--out", rp_out, "matrix output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const SynthLanguage lang(synth_cfg);
      const Corpus c = lang.corpus(synth_count, synth_seed, synth_prefix, "synthetic");
      write_corpus_jsonl(c, synth_out);
      print_json({{"documents", c.size()}, {"out", synth_out}});
    } else if (train_cmd->parsed()) {
      ExperimentConfig cfg = experiment(train_config, train_preset, train_seed, "");
      const Corpus corpus = load_corpus(train_corpus);
      const MaskConfig mask = train_mask.get();
      std::vector<TrainStreamItem> stream;
      std::vector<std::size_t> order(corpus.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::mt19937_64 rng(cfg.seed);
      for (int e = 0; e < train_epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (const std::size_t i : order) {
          for (auto& b : split_blocks(corpus[i].tokens, cfg.model.context_len)) {
            stream.push_back({std::move(b), stream.size()});
          }
        }
      }
      TrainConfig tc = cfg.train;
      tc.mask = mask;
      tc.seed = cfg.seed;
      fs::create_directories(train_out);
      auto on_step = [](const TrainLogEntry& e) {
        if (e.step % 50 == 0) std::cerr << "step " << e.step << " loss " << e.loss << std::endl;
      };
      const TrainResult r = train_init.empty() ? train(stream, cfg.model, tc, on_step)
                                               : train(stream, load_checkpoint(train_init).state, tc, on_step);
      write_train_log(r.log, (fs::path(train_out) / "train_log.jsonl").string());
      save_checkpoint(r.state, tc, (fs::path(train_out) / "model.ckpt").string());
      print_json({{"steps", r.log.size()},
                  {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss},
                  {"checkpoint", (fs::path(train_out) / "model.ckpt").string()}});
    } else if (extract->parsed()) {
      const Checkpoint ck = load_checkpoint(ex_ckpt);
      const TransformerLM lm(ck.state);
      const Corpus corpus = load_corpus(ex_corpus);
      BeamConfig bc;
      bc.width = ex_beam;
      const auto recs = extract_all(lm, corpus, ex_flags.get(), ex_beam > 0 ? &bc : nullptr);
      if (!ex_out.empty()) write_records_jsonl(recs, ex_out);
      std::vector<double> rl;
      for (const auto& r : recs) rl.push_back(r.rougeL);
      print_json({{"documents", recs.size()},
                  {"exact_match_rate", exact_match_rate(recs)},
                  {"rougeL_median", median(rl)}});
    } else if (divergence->parsed()) {
      const Checkpoint ck = load_checkpoint(dv_ckpt);
      const TransformerLM lm(ck.state);
      const Corpus corpus = load_corpus(dv_corpus);
      const DivergenceReport rep = divergence_analysis(lm, corpus, dv_mask.get(), dv_flags.get());
      if (!dv_out.empty()) {
        fs::create_directories(dv_out);
        write_divergence_json(rep, (fs::path(dv_out) / "divergence.json").string());
        write_divergence_csv(rep, (fs::path(dv_out) / "divergence.csv").string());
        write_records_jsonl(rep.records, (fs::path(dv_out) / "records.jsonl").string());
      }
      print_json({{"num_docs", rep.num_docs},
                  {"num_diverged", rep.num_diverged},
                  {"pct_diverged_at_dropped_index", rep.pct_diverged_at_dropped_index}});
    } else if (mia->parsed()) {
      const Checkpoint ck = load_checkpoint(mia_ckpt);
      const MiaCriterion crit = parse_mia_criterion(mia_crit);
      MiaScoreSet s;
      s.criterion = crit;
      s.member_scores = score_documents(ck.state, load_corpus(mia_members), crit);
      s.nonmember_scores = score_documents(ck.state, load_corpus(mia_nonmembers), crit);
      const RocCurve curve = roc(s);
      if (!mia_out.empty()) {
        fs::create_directories(mia_out);
        write_roc_csv(curve, (fs::path(mia_out) / ("roc_" + mia_crit + ".csv")).string());
        write_mia_summary(curve, crit, (fs::path(mia_out) / ("mia_" + mia_crit + ".json")).string());
      }
      print_json({{"criterion", mia_crit},
                  {"auc", curve.auc},
                  {"tpr_at_fpr_0.001", curve.tpr_at_fpr(0.001)},
                  {"n_members", curve.n_members},
                  {"n_nonmembers", curve.n_nonmembers}});
    } else if (beam->parsed()) {
      const Checkpoint ck = load_checkpoint(bm_ckpt);
      const TransformerLM lm(ck.state);
      const Corpus corpus = load_corpus(bm_corpus);
      BeamConfig bc;
      bc.width = bm_width;
      const auto greedy = extract_all(lm, corpus, bm_flags.get());
      const auto beamed = extract_all(lm, corpus, bm_flags.get(), &bc);
      if (!bm_out.empty()) {
        fs::create_directories(bm_out);
        write_records_jsonl(greedy, (fs::path(bm_out) / "greedy.jsonl").string());
        write_records_jsonl(beamed, (fs::path(bm_out) / "beam.jsonl").string());
      }
      print_json({{"width", bm_width},
                  {"greedy_exact_match_rate", exact_match_rate(greedy)},
                  {"beam_exact_match_rate", exact_match_rate(beamed)}});
    } else if (remark->parsed()) {
      json j{{"p", rm_p},
             {"q", rm_q},
             {"k", rm_k},
             {"n", rm_n},
             {"regen_prob_standard", regen_prob_standard(rm_p, rm_n)},
             {"regen_prob_goldfish", regen_prob_goldfish(rm_p, rm_q, rm_k, rm_n)}};
      const auto ik = static_cast<std::uint64_t>(rm_k);
      if (rm_supervised) j["required_input"] = required_input(*rm_supervised, ik);
      if (rm_input) j["supervised_tokens"] = supervised_tokens(*rm_input, ik);
      print_json(j);
    } else if (matrix->parsed()) {
      ExperimentConfig cfg = experiment(mx_config, mx_preset, mx_seed, mx_out);
      if (mx_no_beam) cfg.run_beam = false;
      const auto reports = run_matrix(cfg, stderr_progress);
      emit_report(reports, cfg);
      json summary = json::array();
      bool all_ok = true;
      for (const auto& r : reports) {
        summary.push_back(summary_json(r));
        all_ok = all_ok && r.ok;
      }
      print_json(summary);
      return all_ok ? 0 : 2;
    } else if (report->parsed()) {
      std::ifstream in(fs::path(rp_out) / "manifest.json");
      if (!in) throw IoError("no manifest.json under " + rp_out);
      ExperimentConfig cfg = experiment_from_json(json::parse(in).at("config"));
      cfg.output_dir = rp_out;
      const auto reports = load_reports(rp_out);
      emit_report(reports, cfg);
      print_json({{"runs", reports.size()}, {"out", rp_out}});
    }
  } catch (const goldfish::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
