#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "goldfish/errors.hpp"
#include "goldfish/nanolm.hpp"

namespace goldfish {

std::vector<TokenSeq> split_blocks(std::span<const Token> doc, int context_len) {
  if (context_len < 2) throw ConfigError("context_len must be >= 2");
  std::vector<TokenSeq> blocks;
  for (std::size_t start = 0; start < doc.size(); start += static_cast<std::size_t>(context_len)) {
    const std::size_t n = std::min(doc.size() - start, static_cast<std::size_t>(context_len));
    blocks.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(start),
                        doc.begin() + static_cast<std::ptrdiff_t>(start + n));
  }
  return blocks;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainStreamItem> stream, int batch_size_tokens) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const std::size_t n = stream[i].tokens.size();
    if (!current.empty() && tokens + n > static_cast<std::size_t>(batch_size_tokens)) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

TrainResult train(std::span<const TrainStreamItem> stream, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const TrainCallback& on_step) {
  model_cfg.validate();
  train_cfg.validate();
  return train(stream, init_model<float>(model_cfg, train_cfg.seed, train_cfg.init_std), train_cfg, on_step);
}

TrainResult train(std::span<const TrainStreamItem> stream, const ModelState<float>& init, const TrainConfig& train_cfg,
                  const TrainCallback& on_step) {
  const ModelConfig& model_cfg = init.config;
  model_cfg.validate();
  train_cfg.validate();
  if (init.params.size() != ParamLayout(model_cfg).size()) throw ShapeError("initial state does not match its config");
  for (const auto& item : stream) {
    if (item.tokens.size() > static_cast<std::size_t>(model_cfg.context_len)) {
      throw ShapeError("stream block longer than context_len");
    }
  }
  const auto batches = make_batches(stream, train_cfg.batch_size_tokens);
  TrainConfig cfg = train_cfg;
  if (cfg.total_steps == 0) cfg.total_steps = static_cast<int>(batches.size());
  if (cfg.warmup_steps >= cfg.total_steps) {
    throw ConfigError("warmup_steps (" + std::to_string(cfg.warmup_steps) + ") must be < total steps (" +
                      std::to_string(cfg.total_steps) + ")");
  }
  const std::size_t steps = std::min(batches.size(), static_cast<std::size_t>(cfg.total_steps));

  TrainResult result;
  result.state = init;
  std::fill(result.state.adam_m.begin(), result.state.adam_m.end(), 0.0f);
  std::fill(result.state.adam_v.begin(), result.state.adam_v.end(), 0.0f);
  result.state.step = 0;
  std::vector<Block> blocks;
  for (std::size_t s = 0; s < steps; ++s) {
    blocks.clear();
    TrainLogEntry entry;
    entry.step = static_cast<long>(s) + 1;
    for (const std::size_t idx : batches[s]) {
      const auto& item = stream[idx];
      Block b{item.tokens, make_mask(item.tokens, cfg.mask, item.sequence_id)};
      if (b.tokens.size() >= 2) {
        entry.input_tokens += b.tokens.size() - 1;
        for (std::size_t i = 1; i < b.tokens.size(); ++i) entry.supervised_tokens += b.mask.bits[i];
      }
      blocks.push_back(std::move(b));
    }
    entry.lr = lr_at(entry.step, cfg);
    if (entry.supervised_tokens == 0) {
      // Nothing to learn from; keep the schedule aligned with the stream.
      entry.skipped = true;
    } else {
      const auto grads = batch_gradients<float>(result.state, blocks);
      entry.loss = grads.loss;
      adam_step<float>(result.state, grads.values, cfg, entry.lr);
    }
    if (on_step) on_step(entry);
    result.log.push_back(entry);
  }
  return result;
}

std::pair<double, std::size_t> sequence_nll(const ModelState<float>& state, std::span<const Token> doc) {
  const std::size_t ctx = static_cast<std::size_t>(state.config.context_len);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < doc.size(); start += ctx - 1) {
    const auto window = doc.subspan(start, std::min(ctx, doc.size() - start));
    const auto logits = forward(state, window.first(window.size() - 1));
    for (const double v : token_nll(logits, window.subspan(1))) total += v;
    count += window.size() - 1;
  }
  return {total, count};
}

double evaluate_loss(const ModelState<float>& state, std::span<const TokenSeq> docs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    const auto [t, c] = sequence_nll(state, doc);
    total += t;
    count += c;
  }
  if (count == 0) throw ShapeError("evaluate_loss: no predictable tokens");
  return total / static_cast<double>(count);
}

void write_train_log(std::span<const TrainLogEntry> log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : log) {
    nlohmann::json j{{"step", e.step},
                     {"lr", e.lr},
                     {"loss", e.loss},
                     {"input_tokens", e.input_tokens},
                     {"supervised_tokens", e.supervised_tokens}};
    if (e.skipped) j["skipped"] = true;
    out << j.dump() << '\n';
  }
}

}  // namespace goldfish
