// Checkpoint container:
//   8 bytes   magic "GFCKPT01"
//   8 bytes   little-endian u64 header length
//   header    UTF-8 JSON {format_version, model_cfg, train_cfg, step, tensors, blobs}
//   payload   float32 little-endian: params, adam_m, adam_v (each layout.size() values)

#include <bit>
#include <cstring>
#include <fstream>

#include "goldfish/errors.hpp"
#include "goldfish/serialize.hpp"

namespace goldfish {

void to_json(nlohmann::json& j, const MaskConfig& c) {
  j = {{"strategy", std::string(to_string(c.strategy))}, {"k", c.k}, {"h", c.h}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MaskConfig& c) {
  c = MaskConfig{};
  c.strategy = parse_mask_strategy(j.at("strategy").get<std::string>());
  if (j.contains("k")) c.k = j["k"].get<int>();
  if (j.contains("h")) c.h = j["h"].get<int>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
       {"context_len", c.context_len}, {"vocab", c.vocab}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.context_len = j.value("context_len", c.context_len);
  c.vocab = j.value("vocab", c.vocab);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_lr", c.max_lr},
       {"min_lr", c.min_lr},
       {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"batch_size_tokens", c.batch_size_tokens},
       {"seed", c.seed},
       {"init_std", c.init_std},
       {"mask", c.mask}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.max_lr = j.value("max_lr", c.max_lr);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size_tokens = j.value("batch_size_tokens", c.batch_size_tokens);
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  if (j.contains("mask")) c.mask = j["mask"].get<MaskConfig>();
}

namespace {

constexpr char kMagic[8] = {'G', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_floats(std::ofstream& out, const std::vector<float>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_floats(std::ifstream& in, std::vector<float>& v, std::size_t n, const std::string& path) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw IoError("truncated checkpoint payload: " + path);
}

}  // namespace

void save_checkpoint(const ModelState<float>& state, const TrainConfig& train_cfg, const std::string& path) {
  const ParamLayout layout(state.config);
  if (state.params.size() != layout.size()) throw ShapeError("parameter buffer does not match config");
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : layout.tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }
  const nlohmann::json header{{"format_version", kFormatVersion},
                              {"model_cfg", state.config},
                              {"train_cfg", train_cfg},
                              {"step", state.step},
                              {"tensors", tensors},
                              {"blobs", {"params", "adam_m", "adam_v"}},
                              {"dtype", "float32"}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_floats(out, state.params);
  auto pad = [&](const std::vector<float>& v) {
    if (v.size() == state.params.size()) {
      write_floats(out, v);
    } else {
      write_floats(out, std::vector<float>(state.params.size(), 0.0f));
    }
  };
  pad(state.adam_m);
  pad(state.adam_v);
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw IoError("not a goldfish checkpoint: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw IoError("bad checkpoint header: " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path);
  const auto header = nlohmann::json::parse(text);
  if (header.at("format_version").get<int>() != kFormatVersion) {
    throw IoError("unsupported checkpoint version in " + path);
  }
  Checkpoint ck;
  ck.state.config = header.at("model_cfg").get<ModelConfig>();
  ck.train_cfg = header.at("train_cfg").get<TrainConfig>();
  ck.state.step = header.at("step").get<long>();
  const std::size_t n = ParamLayout(ck.state.config).size();
  read_floats(in, ck.state.params, n, path);
  read_floats(in, ck.state.adam_m, n, path);
  read_floats(in, ck.state.adam_v, n, path);
  return ck;
}

}  // namespace goldfish
