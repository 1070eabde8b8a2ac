#include "goldfish/nanolm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "goldfish/errors.hpp"
#include "kernels.hpp"
#include "rng.hpp"

namespace goldfish {

// ---------------------------------------------------------------- configs

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) throw ConfigError("d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (context_len < 2) throw ConfigError("context_len must be >= 2");
  if (vocab < 1) throw ConfigError("vocab must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
}

void TrainConfig::validate() const {
  if (!(min_lr > 0.0) || !(min_lr <= max_lr)) throw ConfigError("require 0 < min_lr <= max_lr");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (total_steps != 0 && warmup_steps >= total_steps) throw ConfigError("warmup_steps must be < total_steps");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size_tokens < 1) throw ConfigError("batch_size_tokens must be >= 1");
  mask.validate();
}

// ---------------------------------------------------------------- layout

std::size_t ParamLayout::Tensor::count() const {
  std::size_t n = 1;
  for (const int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

std::size_t ParamLayout::add(std::string name, std::vector<int> shape, bool decay) {
  Tensor t{std::move(name), size_, std::move(shape), decay};
  size_ += t.count();
  tensors_.push_back(std::move(t));
  return tensors_.back().offset;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  wte = add("wte", {cfg.vocab, d}, false);
  wpe = add("wpe", {cfg.context_len, d}, false);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(p + "ln1.g", {d}, false);
    L.ln1_b = add(p + "ln1.b", {d}, false);
    L.w_qkv = add(p + "attn.w_qkv", {d, 3 * d}, true);
    L.b_qkv = add(p + "attn.b_qkv", {3 * d}, false);
    L.w_proj = add(p + "attn.w_proj", {d, d}, true);
    L.b_proj = add(p + "attn.b_proj", {d}, false);
    L.ln2_g = add(p + "ln2.g", {d}, false);
    L.ln2_b = add(p + "ln2.b", {d}, false);
    L.w_fc = add(p + "mlp.w_fc", {d, cfg.hidden()}, true);
    L.b_fc = add(p + "mlp.b_fc", {cfg.hidden()}, false);
    L.w_out = add(p + "mlp.w_out", {cfg.hidden(), d}, true);
    L.b_out = add(p + "mlp.b_out", {d}, false);
    layers.push_back(L);
  }
  lnf_g = add("lnf.g", {d}, false);
  lnf_b = add("lnf.b", {d}, false);
  w_head = add("head.w", {d, cfg.vocab}, true);
}

template <typename T>
std::span<T> ModelState<T>::tensor(const std::string& name) {
  for (const auto& t : ParamLayout(config).tensors()) {
    if (t.name == name) return {params.data() + t.offset, t.count()};
  }
  throw ConfigError("no tensor named " + name);
}

template <typename T>
std::span<const T> ModelState<T>::tensor(const std::string& name) const {
  for (const auto& t : ParamLayout(config).tensors()) {
    if (t.name == name) return {params.data() + t.offset, t.count()};
  }
  throw ConfigError("no tensor named " + name);
}

template <typename T>
ModelState<T> init_model(const ModelConfig& cfg, std::uint64_t seed, double init_std, bool zero_head) {
  const ParamLayout layout(cfg);
  ModelState<T> s;
  s.config = cfg;
  s.params.assign(layout.size(), T(0));
  s.adam_m.assign(layout.size(), T(0));
  s.adam_v.assign(layout.size(), T(0));
  Rng rng(seed);
  const double proj_std = init_std / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& t : layout.tensors()) {
    T* p = s.params.data() + t.offset;
    const std::size_t n = t.count();
    const bool is_gain = t.name.ends_with(".g");
    const bool is_bias = t.shape.size() == 1 && !is_gain;
    if (is_gain) {
      std::fill(p, p + n, T(1));
    } else if (is_bias) {
      std::fill(p, p + n, T(0));
    } else if (t.name == "head.w" && zero_head) {
      std::fill(p, p + n, T(0));
    } else {
      const bool residual_proj = t.name.ends_with("attn.w_proj") || t.name.ends_with("mlp.w_out");
      const double sd = residual_proj ? proj_std : init_std;
      for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(sd * rng.normal());
    }
  }
  return s;
}

template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& s) {
  ModelState<To> out;
  out.config = s.config;
  out.step = s.step;
  out.params.assign(s.params.begin(), s.params.end());
  out.adam_m.assign(s.adam_m.begin(), s.adam_m.end());
  out.adam_v.assign(s.adam_v.begin(), s.adam_v.end());
  return out;
}

// ---------------------------------------------------------------- row ops

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm_row(const T* x, const T* g, const T* b, int d, T* out, T* mean_out, T* rstd_out) {
  T sum = 0;
  for (int i = 0; i < d; ++i) sum += x[i];
  const T mean = sum / static_cast<T>(d);
  T var = 0;
  for (int i = 0; i < d; ++i) {
    const T c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
  for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * g[i] + b[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

// dx += LN backward of dout given the forward input x and its stats.
template <typename T>
void layer_norm_backward_row(const T* x, T mean, T rstd, const T* g, const T* dout, int d, T* dx, T* dg, T* db) {
  T sum_dxhat = 0;
  T sum_dxhat_xhat = 0;
  for (int i = 0; i < d; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dout[i] * g[i];
    dg[i] += dout[i] * xhat;
    db[i] += dout[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  const T inv_d = T(1) / static_cast<T>(d);
  for (int i = 0; i < d; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dout[i] * g[i];
    dx[i] += rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
  }
}

template <typename T>
void add_bias(T* m, int rows, int cols, const T* bias) {
  for (int r = 0; r < rows; ++r) {
    T* row = m + static_cast<std::size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

template <typename T>
void add_colsum(const T* m, int rows, int cols, T* out) {
  for (int r = 0; r < rows; ++r) {
    const T* row = m + static_cast<std::size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) out[j] += row[j];
  }
}

// dW[K,N] += A[M,K]^T * dY[M,N]
template <typename T>
void accumulate_weight_grad(const T* A, const T* dY, int M, int K, int N, T* dW, std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(K) * M);
  kernels::transpose(A, M, K, scratch.data());
  kernels::matmul(scratch.data(), dY, dW, K, M, N, true);
}

// dX[M,K] = dY[M,N] * W[K,N]^T
template <typename T>
void input_grad(const T* dY, const T* W, int M, int K, int N, T* dX, std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(N) * K);
  kernels::transpose(W, K, N, scratch.data());
  kernels::matmul(dY, scratch.data(), dX, M, N, K, false);
}

template <typename T>
struct LayerActs {
  std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd, fc_pre, fc_act;
};

template <typename T>
struct Acts {
  int L = 0;
  std::vector<LayerActs<T>> layers;
  std::vector<T> x_final, lnf, lnf_mean, lnf_rstd;
};

}  // namespace

// ---------------------------------------------------------------- KV cache

template <typename T>
KvCache<T>::KvCache(const ModelConfig& cfg)
    : n_layers_(cfg.n_layers), d_model_(cfg.d_model), n_heads_(cfg.n_heads), capacity_(cfg.context_len) {
  cfg.validate();
  const std::size_t per_layer = static_cast<std::size_t>(capacity_) * d_model_;
  keys_t_.assign(n_layers_, std::vector<T>(per_layer));
  values_.assign(n_layers_, std::vector<T>(per_layer));
}

template <typename T>
void KvCache<T>::copy_prefix_from(const KvCache& other, int n) {
  if (other.d_model_ != d_model_ || other.n_layers_ != n_layers_ || other.capacity_ != capacity_) {
    throw ShapeError("KvCache::copy_prefix_from: config mismatch");
  }
  if (n > other.length_) throw ShapeError("KvCache::copy_prefix_from: prefix longer than source");
  const int hd = d_model_ / n_heads_;
  for (int l = 0; l < n_layers_; ++l) {
    for (int h = 0; h < n_heads_; ++h) {
      for (int d = 0; d < hd; ++d) {
        const std::size_t off = (static_cast<std::size_t>(h) * hd + d) * capacity_;
        std::copy_n(other.keys_t_[l].data() + off, n, keys_t_[l].data() + off);
      }
      const std::size_t voff = static_cast<std::size_t>(h) * capacity_ * hd;
      std::copy_n(other.values_[l].data() + voff, static_cast<std::size_t>(n) * hd, values_[l].data() + voff);
    }
  }
  length_ = n;
}

template <typename U>
struct ForwardAccess {
  // Evaluates tokens at positions [cache.length_, cache.length_ + n). When
  // `acts` is non-null the cache must be empty and activations are recorded.
  static Matrix<U> run(const ModelState<U>& s, std::span<const Token> tokens, KvCache<U>& cache, Acts<U>* acts) {
    const kernels::FlushDenormals ftz;
    const ModelConfig& cfg = s.config;
    const ParamLayout layout(cfg);
    const int n = static_cast<int>(tokens.size());
    const int pos0 = cache.length_;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int F = cfg.hidden();
    const int cap = cache.capacity_;
    if (pos0 + n > cfg.context_len) {
      throw ShapeError("sequence of length " + std::to_string(pos0 + n) + " exceeds context_len " +
                       std::to_string(cfg.context_len));
    }
    for (const Token t : tokens) {
      if (t < 0 || t >= cfg.vocab) throw ShapeError("token id out of range: " + std::to_string(t));
    }
    const U* P = s.params.data();
    const U scale = U(1) / std::sqrt(static_cast<U>(hd));

    std::vector<U> x(static_cast<std::size_t>(n) * d);
    for (int r = 0; r < n; ++r) {
      const U* te = P + layout.wte + static_cast<std::size_t>(tokens[r]) * d;
      const U* pe = P + layout.wpe + static_cast<std::size_t>(pos0 + r) * d;
      for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(r) * d + i] = te[i] + pe[i];
    }
    if (acts) {
      acts->L = n;
      acts->layers.resize(cfg.n_layers);
    }

    std::vector<U> ln(static_cast<std::size_t>(n) * d), qkv(static_cast<std::size_t>(n) * 3 * d),
        att(static_cast<std::size_t>(n) * d), tmp(static_cast<std::size_t>(n) * d),
        fc(static_cast<std::size_t>(n) * F), fc_act(static_cast<std::size_t>(n) * F);
    std::vector<U> mean(n), rstd(n), scores(cap);

    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& Lo = layout.layers[l];
      LayerActs<U>* la = acts ? &acts->layers[l] : nullptr;
      if (la) la->x_in = x;
      for (int r = 0; r < n; ++r) {
        layer_norm_row(x.data() + static_cast<std::size_t>(r) * d, P + Lo.ln1_g, P + Lo.ln1_b, d,
                       ln.data() + static_cast<std::size_t>(r) * d, &mean[r], &rstd[r]);
      }
      if (la) {
        la->ln1 = ln;
        la->ln1_mean = mean;
        la->ln1_rstd = rstd;
      }
      kernels::matmul(ln.data(), P + Lo.w_qkv, qkv.data(), n, d, 3 * d, false);
      add_bias(qkv.data(), n, 3 * d, P + Lo.b_qkv);

      U* kt = cache.keys_t_[l].data();
      U* vv = cache.values_[l].data();
      for (int r = 0; r < n; ++r) {
        const int t = pos0 + r;
        const U* row = qkv.data() + static_cast<std::size_t>(r) * 3 * d;
        for (int h = 0; h < H; ++h) {
          for (int e = 0; e < hd; ++e) {
            kt[(static_cast<std::size_t>(h) * hd + e) * cap + t] = row[d + h * hd + e];
            vv[(static_cast<std::size_t>(h) * cap + t) * hd + e] = row[2 * d + h * hd + e];
          }
        }
      }
      if (la) la->probs.assign(static_cast<std::size_t>(H) * n * n, U(0));
      for (int r = 0; r < n; ++r) {
        const int t = pos0 + r;
        const int len = t + 1;
        const U* q = qkv.data() + static_cast<std::size_t>(r) * 3 * d;
        U* out = att.data() + static_cast<std::size_t>(r) * d;
        for (int h = 0; h < H; ++h) {
          const U* qh = q + h * hd;
          const U* kth = kt + static_cast<std::size_t>(h) * hd * cap;
          std::fill_n(scores.data(), len, U(0));
          for (int e = 0; e < hd; ++e) {
            const U qe = qh[e];
            const U* krow = kth + static_cast<std::size_t>(e) * cap;
            for (int j = 0; j < len; ++j) scores[j] += qe * krow[j];
          }
          U mx = -std::numeric_limits<U>::infinity();
          for (int j = 0; j < len; ++j) {
            scores[j] *= scale;
            mx = std::max(mx, scores[j]);
          }
          for (int j = 0; j < len; ++j) scores[j] -= mx;
          kernels::exp_inplace(scores.data(), len);
          U sum = 0;
          for (int j = 0; j < len; ++j) sum += scores[j];
          const U inv = U(1) / sum;
          for (int j = 0; j < len; ++j) scores[j] *= inv;
          U* oh = out + h * hd;
          std::fill_n(oh, hd, U(0));
          const U* vh = vv + static_cast<std::size_t>(h) * cap * hd;
          for (int j = 0; j < len; ++j) {
            const U pj = scores[j];
            const U* vrow = vh + static_cast<std::size_t>(j) * hd;
            for (int e = 0; e < hd; ++e) oh[e] += pj * vrow[e];
          }
          if (la) std::copy_n(scores.data(), len, la->probs.data() + (static_cast<std::size_t>(h) * n + r) * n);
        }
      }
      if (la) {
        la->qkv = qkv;
        la->att = att;
      }
      kernels::matmul(att.data(), P + Lo.w_proj, tmp.data(), n, d, d, false);
      add_bias(tmp.data(), n, d, P + Lo.b_proj);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
      if (la) la->x_mid = x;

      for (int r = 0; r < n; ++r) {
        layer_norm_row(x.data() + static_cast<std::size_t>(r) * d, P + Lo.ln2_g, P + Lo.ln2_b, d,
                       ln.data() + static_cast<std::size_t>(r) * d, &mean[r], &rstd[r]);
      }
      if (la) {
        la->ln2 = ln;
        la->ln2_mean = mean;
        la->ln2_rstd = rstd;
      }
      kernels::matmul(ln.data(), P + Lo.w_fc, fc.data(), n, d, F, false);
      add_bias(fc.data(), n, F, P + Lo.b_fc);
      kernels::gelu_forward(fc.data(), fc_act.data(), fc.size());
      if (la) {
        la->fc_pre = fc;
        la->fc_act = fc_act;
      }
      kernels::matmul(fc_act.data(), P + Lo.w_out, tmp.data(), n, F, d, false);
      add_bias(tmp.data(), n, d, P + Lo.b_out);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
    }
    cache.length_ = pos0 + n;

    for (int r = 0; r < n; ++r) {
      layer_norm_row(x.data() + static_cast<std::size_t>(r) * d, P + layout.lnf_g, P + layout.lnf_b, d,
                     ln.data() + static_cast<std::size_t>(r) * d, &mean[r], &rstd[r]);
    }
    if (acts) {
      acts->x_final = x;
      acts->lnf = ln;
      acts->lnf_mean = mean;
      acts->lnf_rstd = rstd;
    }
    Matrix<U> logits(n, cfg.vocab);
    kernels::matmul(ln.data(), P + layout.w_head, logits.data.data(), n, d, cfg.vocab, false);
    return logits;
  }

  // Accumulates parameter gradients given dlogits for a sequence run through
  // run() with activations.
  static void backprop(const ModelState<U>& s, std::span<const Token> tokens, const Acts<U>& acts,
                       const Matrix<U>& dlogits, U* G) {
    const ModelConfig& cfg = s.config;
    const ParamLayout layout(cfg);
    const int n = acts.L;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int F = cfg.hidden();
    const int V = cfg.vocab;
    const U* P = s.params.data();
    const U scale = U(1) / std::sqrt(static_cast<U>(hd));
    std::vector<U> scratch;

    accumulate_weight_grad(acts.lnf.data(), dlogits.data.data(), n, d, V, G + layout.w_head, scratch);
    std::vector<U> dln(static_cast<std::size_t>(n) * d);
    input_grad(dlogits.data.data(), P + layout.w_head, n, d, V, dln.data(), scratch);

    std::vector<U> dx(static_cast<std::size_t>(n) * d, U(0));
    for (int r = 0; r < n; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * d;
      layer_norm_backward_row(acts.x_final.data() + o, acts.lnf_mean[r], acts.lnf_rstd[r], P + layout.lnf_g,
                              dln.data() + o, d, dx.data() + o, G + layout.lnf_g, G + layout.lnf_b);
    }

    std::vector<U> dfc(static_cast<std::size_t>(n) * F), datt(static_cast<std::size_t>(n) * d),
        dqkv(static_cast<std::size_t>(n) * 3 * d), dp(n), vt;
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      const auto& Lo = layout.layers[l];
      const LayerActs<U>& la = acts.layers[l];

      // MLP
      accumulate_weight_grad(la.fc_act.data(), dx.data(), n, F, d, G + Lo.w_out, scratch);
      add_colsum(dx.data(), n, d, G + Lo.b_out);
      input_grad(dx.data(), P + Lo.w_out, n, F, d, dfc.data(), scratch);
      kernels::gelu_backward(la.fc_pre.data(), dfc.data(), dfc.size());
      accumulate_weight_grad(la.ln2.data(), dfc.data(), n, d, F, G + Lo.w_fc, scratch);
      add_colsum(dfc.data(), n, F, G + Lo.b_fc);
      input_grad(dfc.data(), P + Lo.w_fc, n, d, F, dln.data(), scratch);
      for (int r = 0; r < n; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) * d;
        layer_norm_backward_row(la.x_mid.data() + o, la.ln2_mean[r], la.ln2_rstd[r], P + Lo.ln2_g, dln.data() + o, d,
                                dx.data() + o, G + Lo.ln2_g, G + Lo.ln2_b);
      }

      // attention
      accumulate_weight_grad(la.att.data(), dx.data(), n, d, d, G + Lo.w_proj, scratch);
      add_colsum(dx.data(), n, d, G + Lo.b_proj);
      input_grad(dx.data(), P + Lo.w_proj, n, d, d, datt.data(), scratch);
      std::fill(dqkv.begin(), dqkv.end(), U(0));
      const std::size_t row3 = static_cast<std::size_t>(3) * d;
      for (int h = 0; h < H; ++h) {
        // values of this head transposed: vt[e][j]
        vt.resize(static_cast<std::size_t>(hd) * n);
        for (int j = 0; j < n; ++j) {
          const U* vj = la.qkv.data() + j * row3 + 2 * d + h * hd;
          for (int e = 0; e < hd; ++e) vt[static_cast<std::size_t>(e) * n + j] = vj[e];
        }
        for (int i = 0; i < n; ++i) {
          const U* probs = la.probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
          const U* dout = datt.data() + static_cast<std::size_t>(i) * d + h * hd;
          const U* qi = la.qkv.data() + i * row3 + h * hd;
          const int len = i + 1;
          std::fill_n(dp.data(), len, U(0));
          for (int e = 0; e < hd; ++e) {
            const U de = dout[e];
            const U* vrow = vt.data() + static_cast<std::size_t>(e) * n;
            for (int j = 0; j < len; ++j) dp[j] += de * vrow[j];
          }
          U dot_pd = 0;
          for (int j = 0; j < len; ++j) dot_pd += probs[j] * dp[j];
          U* dqi = dqkv.data() + i * row3 + h * hd;
          for (int j = 0; j < len; ++j) {
            const U ds = probs[j] * (dp[j] - dot_pd) * scale;
            const U* kj = la.qkv.data() + j * row3 + d + h * hd;
            U* dkj = dqkv.data() + j * row3 + d + h * hd;
            U* dvj = dqkv.data() + j * row3 + 2 * d + h * hd;
            const U pj = probs[j];
            for (int e = 0; e < hd; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
              dvj[e] += pj * dout[e];
            }
          }
        }
      }
      accumulate_weight_grad(la.ln1.data(), dqkv.data(), n, d, 3 * d, G + Lo.w_qkv, scratch);
      add_colsum(dqkv.data(), n, 3 * d, G + Lo.b_qkv);
      input_grad(dqkv.data(), P + Lo.w_qkv, n, d, 3 * d, dln.data(), scratch);
      for (int r = 0; r < n; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) * d;
        layer_norm_backward_row(la.x_in.data() + o, la.ln1_mean[r], la.ln1_rstd[r], P + Lo.ln1_g, dln.data() + o, d,
                                dx.data() + o, G + Lo.ln1_g, G + Lo.ln1_b);
      }
    }

    for (int r = 0; r < n; ++r) {
      U* gte = G + layout.wte + static_cast<std::size_t>(tokens[r]) * d;
      U* gpe = G + layout.wpe + static_cast<std::size_t>(r) * d;
      const U* g = dx.data() + static_cast<std::size_t>(r) * d;
      for (int i = 0; i < d; ++i) {
        gte[i] += g[i];
        gpe[i] += g[i];
      }
    }
  }
};

template <typename T>
Matrix<T> KvCache<T>::append(const ModelState<T>& state, std::span<const Token> tokens) {
  if (state.config.d_model != d_model_ || state.config.n_layers != n_layers_ ||
      state.config.context_len != capacity_ || state.config.n_heads != n_heads_) {
    throw ShapeError("KvCache does not match model config");
  }
  return ForwardAccess<T>::run(state, tokens, *this, nullptr);
}

// ---------------------------------------------------------------- forward & losses

template <typename T>
Matrix<T> forward(const ModelState<T>& state, std::span<const Token> tokens) {
  KvCache<T> cache(state.config);
  return ForwardAccess<T>::run(state, tokens, cache, nullptr);
}

template <typename T>
std::vector<double> log_softmax_row(const T* logits, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double sum = 0.0;
  for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(logits[j]) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(n);
  for (int j = 0; j < n; ++j) out[j] = static_cast<double>(logits[j]) - lse;
  return out;
}

namespace {

template <typename T>
double nll_at(const T* row, int n, Token target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return mx + std::log(sum) - static_cast<double>(row[target]);
}

template <typename T>
void check_targets(const Matrix<T>& logits, std::span<const Token> targets) {
  if (static_cast<std::size_t>(logits.rows) != targets.size()) {
    throw ShapeError("logits rows (" + std::to_string(logits.rows) + ") != targets (" +
                     std::to_string(targets.size()) + ")");
  }
  for (const Token t : targets) {
    if (t < 0 || t >= logits.cols) throw ShapeError("target id out of range: " + std::to_string(t));
  }
}

}  // namespace

template <typename T>
std::vector<double> token_nll(const Matrix<T>& logits, std::span<const Token> targets) {
  check_targets(logits, targets);
  std::vector<double> out(targets.size());
  for (int i = 0; i < logits.rows; ++i) out[i] = nll_at(logits.row(i), logits.cols, targets[i]);
  return out;
}

template <typename T>
double clm_loss(const Matrix<T>& logits, std::span<const Token> targets) {
  const auto nll = token_nll(logits, targets);
  if (nll.empty()) throw ShapeError("clm_loss: empty sequence");
  double sum = 0.0;
  for (const double v : nll) sum += v;
  return sum / static_cast<double>(nll.size());
}

template <typename T>
double goldfish_loss(const Matrix<T>& logits, std::span<const Token> targets, const MaskVector& mask) {
  if (mask.size() != targets.size()) throw ShapeError("mask length does not match targets");
  if (mask.supervised_count == 0) throw DegenerateMaskError("goldfish_loss: mask has no supervised positions");
  const auto nll = token_nll(logits, targets);
  double sum = 0.0;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    if (mask.bits[i]) sum += nll[i];
  }
  return sum / static_cast<double>(mask.supervised_count);
}

// ---------------------------------------------------------------- gradients

namespace {

// Forward + backward of one sequence with per-position loss weight
// mask.bits[i] * inv_norm. Returns the weighted NLL sum (unnormalized).
template <typename T>
double accumulate_sequence(const ModelState<T>& state, std::span<const Token> tokens, std::span<const Token> targets,
                           std::span<const std::uint8_t> mask, double inv_norm, T* grads) {
  KvCache<T> cache(state.config);
  Acts<T> acts;
  Matrix<T> logits = ForwardAccess<T>::run(state, tokens, cache, &acts);
  const int V = logits.cols;
  double nll_sum = 0.0;
  Matrix<T> dlogits(logits.rows, V);
  for (int i = 0; i < logits.rows; ++i) {
    if (!mask[i]) continue;
    const auto lsm = log_softmax_row(logits.row(i), V);
    nll_sum -= lsm[targets[i]];
    T* dr = dlogits.row(i);
    for (int j = 0; j < V; ++j) dr[j] = static_cast<T>(std::exp(lsm[j]) * inv_norm);
    dr[targets[i]] -= static_cast<T>(inv_norm);
  }
  ForwardAccess<T>::backprop(state, tokens, acts, dlogits, grads);
  return nll_sum;
}

}  // namespace

template <typename T>
Gradients<T> backward(const ModelState<T>& state, std::span<const Token> tokens, std::span<const Token> targets,
                      const MaskVector& mask) {
  if (tokens.size() != targets.size()) throw ShapeError("tokens and targets differ in length");
  if (mask.size() != targets.size()) throw ShapeError("mask length does not match targets");
  if (mask.supervised_count == 0) throw DegenerateMaskError("backward: mask has no supervised positions");
  for (const Token t : targets) {
    if (t < 0 || t >= state.config.vocab) throw ShapeError("target id out of range: " + std::to_string(t));
  }
  const kernels::FlushDenormals ftz;
  Gradients<T> g;
  g.values.assign(state.params.size(), T(0));
  g.supervised = mask.supervised_count;
  const double inv = 1.0 / static_cast<double>(mask.supervised_count);
  g.loss = accumulate_sequence(state, tokens, targets, mask.bits, inv, g.values.data()) * inv;
  return g;
}

template <typename T>
Gradients<T> batch_gradients(const ModelState<T>& state, std::span<const Block> batch) {
  const kernels::FlushDenormals ftz;
  Gradients<T> g;
  g.values.assign(state.params.size(), T(0));
  for (const auto& b : batch) {
    if (b.mask.size() != b.tokens.size()) throw ShapeError("block mask length does not match tokens");
    for (std::size_t i = 1; i < b.tokens.size(); ++i) g.supervised += b.mask.bits[i] != 0;
  }
  if (g.supervised == 0) throw DegenerateMaskError("batch has no supervised tokens");
  const double inv = 1.0 / static_cast<double>(g.supervised);
  double total = 0.0;
  for (const auto& b : batch) {
    if (b.tokens.size() < 2) continue;
    const std::span<const Token> all(b.tokens);
    const std::span<const std::uint8_t> bits(b.mask.bits);
    const std::size_t n = b.tokens.size() - 1;
    bool any = false;
    for (std::size_t i = 1; i <= n; ++i) any = any || bits[i] != 0;
    if (!any) continue;
    total += accumulate_sequence(state, all.first(n), all.subspan(1, n), bits.subspan(1, n), inv, g.values.data());
  }
  g.loss = total * inv;
  return g;
}

// ---------------------------------------------------------------- optimizer

double lr_at(long step, const TrainConfig& cfg) {
  if (cfg.total_steps <= 0 || cfg.warmup_steps >= cfg.total_steps) {
    throw ConfigError("lr_at requires 0 <= warmup_steps < total_steps");
  }
  if (step < 0 || step > cfg.total_steps) {
    throw ConfigError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
  if (step < cfg.warmup_steps) {
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adam_step(ModelState<T>& state, std::span<const T> grads, const TrainConfig& cfg, double lr) {
  if (grads.size() != state.params.size()) throw ShapeError("gradient size does not match parameters");
  const kernels::FlushDenormals ftz;
  const ParamLayout layout(state.config);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grads[i]))) {
      for (const auto& t : layout.tensors()) {
        if (i >= t.offset && i < t.offset + t.count()) {
          throw NumericError("non-finite gradient in " + t.name + "[" + std::to_string(i - t.offset) + "] at step " +
                             std::to_string(state.step + 1));
        }
      }
      throw NumericError("non-finite gradient at index " + std::to_string(i));
    }
  }
  state.step += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& t : layout.tensors()) {
    const double decay = t.decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = t.offset; i < t.offset + t.count(); ++i) {
      const double g = grads[i];
      const double m = b1 * state.adam_m[i] + (1.0 - b1) * g;
      const double v = b2 * state.adam_v[i] + (1.0 - b2) * g * g;
      state.adam_m[i] = static_cast<T>(m);
      state.adam_v[i] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double w = state.params[i];
      state.params[i] = static_cast<T>(w - lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps)) - lr * decay * w);
    }
  }
}

// ---------------------------------------------------------------- instantiations

#define GOLDFISH_INSTANTIATE(T)                                                                                  \
  template struct ModelState<T>;                                                                                 \
  template class KvCache<T>;                                                                                     \
  template ModelState<T> init_model<T>(const ModelConfig&, std::uint64_t, double, bool);                         \
  template Matrix<T> forward<T>(const ModelState<T>&, std::span<const Token>);                                   \
  template std::vector<double> log_softmax_row<T>(const T*, int);                                                \
  template std::vector<double> token_nll<T>(const Matrix<T>&, std::span<const Token>);                           \
  template double clm_loss<T>(const Matrix<T>&, std::span<const Token>);                                         \
  template double goldfish_loss<T>(const Matrix<T>&, std::span<const Token>, const MaskVector&);                 \
  template Gradients<T> backward<T>(const ModelState<T>&, std::span<const Token>, std::span<const Token>,        \
                                    const MaskVector&);                                                          \
  template Gradients<T> batch_gradients<T>(const ModelState<T>&, std::span<const Block>);                        \
  template void adam_step<T>(ModelState<T>&, std::span<const T>, const TrainConfig&, double);

GOLDFISH_INSTANTIATE(float)
GOLDFISH_INSTANTIATE(double)
#undef GOLDFISH_INSTANTIATE

template ModelState<double> convert_state<double, float>(const ModelState<float>&);
template ModelState<float> convert_state<float, double>(const ModelState<double>&);
template ModelState<float> convert_state<float, float>(const ModelState<float>&);
template ModelState<double> convert_state<double, double>(const ModelState<double>&);

}  // namespace goldfish
