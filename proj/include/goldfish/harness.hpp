#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "goldfish/mask.hpp"
#include "goldfish/memo_metrics.hpp"
#include "goldfish/nanolm.hpp"
#include "goldfish/synth.hpp"
#include "goldfish/textio.hpp"

namespace goldfish {

enum class Preset { Extreme, StandardMini };

using ProgressFn = std::function<void(const std::string&)>;

std::string_view to_string(Preset p);
Preset parse_preset(std::string_view name);

struct ExperimentConfig {
  Preset preset = Preset::Extreme;
  /// Empty paths select the built-in synthetic language.
  std::string background_corpus;
  std::string canary_corpus;
  std::string heldout_corpus;
  SynthConfig synth;
  int num_canaries = 100;
  /// standard-mini: the training pass; extreme: pretraining of the shared base model
  int num_background = 0;
  int num_heldout = 200;
  /// extreme: epochs over the canaries; standard-mini: insertions of the canary set
  int canary_repeats = 100;
  std::vector<MaskConfig> masks;
  bool include_control = true;
  ModelConfig model;
  TrainConfig train;
  /// extreme only: how the base model is pretrained on the background corpus
  TrainConfig base_train;
  ExtractionConfig ext;
  int beam_width = 30;
  bool run_beam = true;
  bool svg = true;
  std::uint64_t seed = 1;
  std::string output_dir = "runs";

  void validate() const;
};

ExperimentConfig preset_config(Preset preset);

/// Reads a JSON config. Keys override the named preset ("preset" key,
/// default extreme); nested objects are merged.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

struct ExperimentData {
  Corpus canaries;
  Corpus background;
  Corpus nonmembers;  // held out, length-matched to the canaries
};

ExperimentData load_data(const ExperimentConfig& cfg);

/// For each canary (shortest first) the unused pool document closest in length.
Corpus match_by_length(const Corpus& targets, const Corpus& pool);

/// Training stream for one run. `control` leaves the canaries out, which for
/// the extreme preset leaves nothing: its control is the base model itself.
std::vector<TrainStreamItem> build_stream(const ExperimentConfig& cfg, const ExperimentData& data,
                                          std::uint64_t seed, bool control);

/// Extreme preset: one pass over the background corpus. Empty without one.
std::vector<TrainStreamItem> build_base_stream(const ExperimentConfig& cfg, const ExperimentData& data);

/// Pretrains the extreme preset's base model and writes it under
/// cfg.output_dir/base. Returns nothing when there is no background corpus.
std::optional<ModelState<float>> train_base(const ExperimentConfig& cfg, const ExperimentData& data,
                                            const ProgressFn& progress = {});

/// Throws if any stream block equals a canary block.
void assert_no_canaries(std::span<const TrainStreamItem> stream, const Corpus& canaries, int context_len);

struct MiaSummary {
  std::string criterion;
  double auc = 0.5;
  double tpr_at_fpr_0_001 = 0.0;
  bool degenerate = false;
  std::size_t n_members = 0;
  std::size_t n_nonmembers = 0;
};

constexpr int kRougeBins = 20;

struct RunReport {
  std::string run_id;
  MaskConfig mask;
  bool control = false;
  bool ok = true;
  std::string error;
  std::string train_log_path;
  std::string checkpoint_path;
  double final_loss = 0.0;
  double train_seconds = 0.0;
  std::size_t stream_items = 0;
  std::size_t input_tokens = 0;
  std::size_t supervised_tokens = 0;
  std::size_t extraction_docs = 0;
  double exact_match_rate = 0.0;
  double rougeL_median = 0.0;
  double rougeL_mean = 0.0;
  /// bin b covers [b/20, (b+1)/20); the last bin includes 1.0
  std::array<std::size_t, kRougeBins> rougeL_hist{};
  std::optional<DivergenceReport> divergence;
  std::string divergence_note;
  std::vector<MiaSummary> mia;
  std::optional<double> beam_exact_match_rate;
  int beam_width = 0;
  std::vector<ExtractionRecord> records;  // greedy, not serialized into the summary
  std::vector<ExtractionRecord> beam_records;
};

nlohmann::json summary_json(const RunReport& r);
RunReport report_from_summary(const nlohmann::json& j);

std::array<std::size_t, kRougeBins> rouge_histogram(std::span<const ExtractionRecord> records);
double median(std::vector<double> v);

/// Trains and evaluates one run, writing its artifacts under
/// cfg.output_dir/run_id. Training continues from `base` when given; a run with
/// an empty stream evaluates `base` (or an untrained model) as is. Failures are
/// captured in the report.
RunReport run_one(const ExperimentConfig& cfg, const ExperimentData& data, const std::string& run_id,
                  const MaskConfig& mask, bool control, const ModelState<float>* base = nullptr,
                  const ProgressFn& progress = {});

/// One run per mask plus the control; every run shares the stream order.
std::vector<RunReport> run_matrix(const ExperimentConfig& cfg, const ProgressFn& progress = {});

std::string run_id_for(const MaskConfig& mask, bool control);

/// Per-run summary JSON, RougeL / divergence CSVs, optional SVGs and the
/// top-level manifest. Output depends only on the reports.
void emit_report(std::span<const RunReport> reports, const ExperimentConfig& cfg);

/// Re-reads every run summary listed in output_dir/manifest.json.
std::vector<RunReport> load_reports(const std::filesystem::path& output_dir);

}  // namespace goldfish
