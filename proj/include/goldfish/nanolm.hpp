#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "goldfish/mask.hpp"
#include "goldfish/textio.hpp"

namespace goldfish {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 256;
  int n_heads = 8;
  int context_len = 512;
  int vocab = kVocabSize;
  int mlp_ratio = 4;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  int hidden() const { return d_model * mlp_ratio; }
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double max_lr = 4e-4;
  double min_lr = 4e-5;
  int warmup_steps = 1000;
  int total_steps = 0;  // 0: derived from the stream by train()
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  int batch_size_tokens = 4096;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  MaskConfig mask;

  /// Checks everything except the warmup/total relation when total_steps == 0.
  void validate() const;
};

/// Offsets of every named tensor inside the flat parameter buffer.
class ParamLayout {
 public:
  struct Tensor {
    std::string name;
    std::size_t offset = 0;
    std::vector<int> shape;
    bool decay = false;
    std::size_t count() const;
  };
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
    std::size_t ln2_g, ln2_b, w_fc, b_fc, w_out, b_out;
  };

  explicit ParamLayout(const ModelConfig& cfg);

  std::size_t size() const { return size_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t wte = 0, wpe = 0, lnf_g = 0, lnf_b = 0, w_head = 0;
  std::vector<Layer> layers;

 private:
  std::size_t add(std::string name, std::vector<int> shape, bool decay);
  std::vector<Tensor> tensors_;
  std::size_t size_ = 0;
};

/// Trainable parameters, Adam moments, and the step counter. Float for
/// training; double for gradient checking.
template <typename T>
struct ModelState {
  ModelConfig config;
  std::vector<T> params;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
  long step = 0;

  ParamLayout layout() const { return ParamLayout(config); }
  std::span<T> tensor(const std::string& name);
  std::span<const T> tensor(const std::string& name) const;
};

/// Pre-norm GPT: learned positions, GELU MLP, zero-initialized output head
/// unless `zero_head` is false.
template <typename T>
ModelState<T> init_model(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02, bool zero_head = true);

template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& s);

/// Dense row-major matrix.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c) {}
  T* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<std::size_t>(i) * cols; }
  T& operator()(int i, int j) { return row(i)[j]; }
  T operator()(int i, int j) const { return row(i)[j]; }
};

/// Next-token logits [L, V]; row i is conditioned on tokens[0..i].
template <typename T>
Matrix<T> forward(const ModelState<T>& state, std::span<const Token> tokens);

/// Per-row log softmax in double precision.
template <typename T>
std::vector<double> log_softmax_row(const T* logits, int n);

/// Per-position negative log-likelihood of `targets` under `logits`.
template <typename T>
std::vector<double> token_nll(const Matrix<T>& logits, std::span<const Token> targets);

/// Mean next-token NLL over all positions.
template <typename T>
double clm_loss(const Matrix<T>& logits, std::span<const Token> targets);

/// Mean NLL over supervised positions only; mask is aligned with targets.
template <typename T>
double goldfish_loss(const Matrix<T>& logits, std::span<const Token> targets, const MaskVector& mask);

template <typename T>
struct Gradients {
  std::vector<T> values;  // same layout as ModelState::params
  double loss = 0.0;
  std::size_t supervised = 0;
};

/// Gradient of goldfish_loss(forward(tokens), targets, mask) for one sequence.
template <typename T>
Gradients<T> backward(const ModelState<T>& state, std::span<const Token> tokens,
                      std::span<const Token> targets, const MaskVector& mask);

/// One training sequence: inputs are tokens[0..L-2], targets tokens[1..L-1];
/// mask is over the full block and mask.bits[i] weights the prediction of tokens[i].
struct Block {
  TokenSeq tokens;
  MaskVector mask;
};

/// Goldfish gradient of a batch, normalized by the batch's total supervised count.
template <typename T>
Gradients<T> batch_gradients(const ModelState<T>& state, std::span<const Block> batch);

/// Linear warmup to max_lr, then cosine decay to min_lr at total_steps.
double lr_at(long step, const TrainConfig& cfg);

/// Adam with bias correction and decoupled weight decay on matrices other than
/// the embeddings. Increments state.step. Throws NumericError on non-finite grads.
template <typename T>
void adam_step(ModelState<T>& state, std::span<const T> grads, const TrainConfig& cfg, double lr);

/// Key/value cache for incremental evaluation. Logits produced through the cache
/// are bitwise equal to forward() on the full prefix.
template <typename T>
class KvCache {
 public:
  explicit KvCache(const ModelConfig& cfg);
  int length() const { return length_; }
  int capacity() const { return capacity_; }
  void clear() { length_ = 0; }

  /// Runs `tokens` at positions [length, length + n) and returns their logits.
  Matrix<T> append(const ModelState<T>& state, std::span<const Token> tokens);

  /// Copy the first `n` cached positions of `other` (same config).
  void copy_prefix_from(const KvCache& other, int n);

 private:
  template <typename U>
  friend struct ForwardAccess;
  int n_layers_, d_model_, n_heads_, capacity_;
  int length_ = 0;
  // per layer: keys transposed [head][head_dim][capacity], values [head][capacity][head_dim]
  std::vector<std::vector<T>> keys_t_;
  std::vector<std::vector<T>> values_;
};

// ---- training ----

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::size_t input_tokens = 0;
  std::size_t supervised_tokens = 0;
  bool skipped = false;
};

struct TrainStreamItem {
  TokenSeq tokens;           // one block, at most context_len tokens
  std::uint64_t sequence_id = 0;
};

/// Groups consecutive stream items into batches of at most batch_size_tokens
/// (each batch has at least one item).
std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainStreamItem> stream, int batch_size_tokens);

struct TrainResult {
  ModelState<float> state;
  std::vector<TrainLogEntry> log;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// Optimizes the goldfish loss over `stream` in order. Masks are computed per
/// block with make_mask(tokens, cfg.mask, sequence_id).
TrainResult train(std::span<const TrainStreamItem> stream, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const TrainCallback& on_step = {});

/// Continues from `init` (its parameters; the optimizer starts fresh).
TrainResult train(std::span<const TrainStreamItem> stream, const ModelState<float>& init,
                  const TrainConfig& train_cfg, const TrainCallback& on_step = {});

/// Splits a document into consecutive blocks of at most context_len tokens.
std::vector<TokenSeq> split_blocks(std::span<const Token> doc, int context_len);

/// Summed next-token NLL of every token after the first, and how many that is.
/// Long documents are scored in context_len windows that overlap by one token.
std::pair<double, std::size_t> sequence_nll(const ModelState<float>& state, std::span<const Token> doc);

/// Mean NLL over every predicted token of the given documents.
double evaluate_loss(const ModelState<float>& state, std::span<const TokenSeq> docs);

// ---- checkpoint ----

void save_checkpoint(const ModelState<float>& state, const TrainConfig& train_cfg, const std::string& path);
struct Checkpoint {
  ModelState<float> state;
  TrainConfig train_cfg;
};
Checkpoint load_checkpoint(const std::string& path);

void write_train_log(std::span<const TrainLogEntry> log, const std::string& path);

}  // namespace goldfish
