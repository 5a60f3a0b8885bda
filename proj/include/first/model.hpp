#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "first/errors.hpp"
#include "first/lora.hpp"
#include "first/model_config.hpp"
#include "first/ops.hpp"
#include "first/rng.hpp"
#include "first/tensor.hpp"

namespace first {

// Row-major [batch, length] token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  static TokenBatch single(std::vector<std::int32_t> ids) {
    const std::size_t n = ids.size();
    return TokenBatch{1, n, std::move(ids)};
  }
  std::span<const std::int32_t> row(std::size_t b) const { return {ids.data() + b * length, length}; }
};

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [D]
  Tensor<T> wq, wk, wv, wo;  // [D, D], stored [in, out]
  Tensor<T> ffn_norm;  // [D]
  Tensor<T> w_gate, w_up;  // [D, d_ff]
  Tensor<T> w_down;  // [d_ff, D]

  const Tensor<T>& projection(LoraTarget t) const {
    switch (t) {
      case LoraTarget::kQuery: return wq;
      case LoraTarget::kKey: return wk;
      case LoraTarget::kValue: return wv;
      case LoraTarget::kOutput: return wo;
      case LoraTarget::kGate: return w_gate;
      case LoraTarget::kUp: return w_up;
      case LoraTarget::kDown: return w_down;
    }
    throw ConfigError("unknown projection");
  }
  Tensor<T>& projection(LoraTarget t) {
    return const_cast<Tensor<T>&>(static_cast<const LayerWeights&>(*this).projection(t));
  }

  // Serialization order.
  std::vector<Tensor<T>> tensors() const { return {attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down}; }
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> tok_embedding;  // [V, D]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [D]
  Tensor<T> head;  // [D, V]

  static ModelWeights random(const ModelConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
    auto normal = [&](Shape shape) {
      std::vector<T> vals(numel_of(shape));
      for (auto& x : vals) x = static_cast<T>(rng.normal(0.0, 0.02));
      return Tensor<T>(std::move(shape), std::move(vals));
    };
    ModelWeights w;
    w.config = config;
    w.tok_embedding = normal({v, d});
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.attn_norm = Tensor<T>::full({d}, T(1));
      lw.wq = normal({d, d});
      lw.wk = normal({d, d});
      lw.wv = normal({d, d});
      lw.wo = normal({d, d});
      lw.ffn_norm = Tensor<T>::full({d}, T(1));
      lw.w_gate = normal({d, f});
      lw.w_up = normal({d, f});
      lw.w_down = normal({f, d});
      w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor<T>::full({d}, T(1));
    w.head = normal({d, v});
    return w;
  }

  // Serialization order: embedding, each layer's tensors, final norm, head.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out{tok_embedding};
    for (const auto& l : layers)
      for (auto& t : l.tensors()) out.push_back(t);
    out.push_back(final_norm);
    out.push_back(head);
    return out;
  }

  std::vector<Shape> expected_shapes() const { return shapes_for(config); }

  static std::vector<Shape> shapes_for(const ModelConfig& config) {
    const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
    std::vector<Shape> s{{v, d}};
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (const Shape& x : {Shape{d}, Shape{d, d}, Shape{d, d}, Shape{d, d}, Shape{d, d}, Shape{d}, Shape{d, f},
                             Shape{d, f}, Shape{f, d}})
        s.push_back(x);
    }
    s.push_back({d});
    s.push_back({d, v});
    return s;
  }

  // Inverse of parameters(); layers are rebuilt from the flat list.
  void assign_parameters(std::vector<Tensor<T>> flat) {
    const std::size_t per_layer = 9;
    if (flat.size() != config.n_layers * per_layer + 3) throw DimensionError("model weights: wrong tensor count");
    std::size_t k = 0;
    tok_embedding = std::move(flat[k++]);
    layers.clear();
    for (std::size_t l = 0; l < config.n_layers; ++l, k += per_layer) {
      layers.push_back(LayerWeights<T>{flat[k], flat[k + 1], flat[k + 2], flat[k + 3], flat[k + 4], flat[k + 5],
                                       flat[k + 6], flat[k + 7], flat[k + 8]});
    }
    final_norm = std::move(flat[k++]);
    head = std::move(flat[k]);
  }

  void validate() const {
    config.validate();
    if (layers.size() != config.n_layers) throw DimensionError("model weights: layer count disagrees with config");
    const auto params = parameters();
    const auto shapes = expected_shapes();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].shape() != shapes[i]) {
        throw DimensionError("model weights: tensor " + std::to_string(i) + " has shape " +
                             to_string(params[i].shape()) + ", expected " + to_string(shapes[i]));
      }
      for (T v : params[i].data())
        if (!std::isfinite(static_cast<double>(v))) throw NumericalError("model weights: non-finite entry");
    }
  }

  void set_trainable(bool flag) const {
    for (auto p : parameters()) p.set_requires_grad(flag);
  }

  ModelWeights clone() const {
    ModelWeights w;
    w.config = config;
    w.tok_embedding = tok_embedding.clone();
    for (const auto& l : layers) {
      LayerWeights<T> c;
      c.attn_norm = l.attn_norm.clone();
      c.wq = l.wq.clone();
      c.wk = l.wk.clone();
      c.wv = l.wv.clone();
      c.wo = l.wo.clone();
      c.ffn_norm = l.ffn_norm.clone();
      c.w_gate = l.w_gate.clone();
      c.w_up = l.w_up.clone();
      c.w_down = l.w_down.clone();
      w.layers.push_back(std::move(c));
    }
    w.final_norm = final_norm.clone();
    w.head = head.clone();
    return w;
  }

  template <typename U>
  ModelWeights<U> cast() const {
    auto conv = [](const Tensor<T>& t) {
      std::vector<U> v(t.data().begin(), t.data().end());
      return Tensor<U>(t.shape(), std::move(v));
    };
    ModelWeights<U> w;
    w.config = config;
    w.tok_embedding = conv(tok_embedding);
    for (const auto& l : layers) {
      w.layers.push_back(LayerWeights<U>{conv(l.attn_norm), conv(l.wq), conv(l.wk), conv(l.wv), conv(l.wo),
                                         conv(l.ffn_norm), conv(l.w_gate), conv(l.w_up), conv(l.w_down)});
    }
    w.final_norm = conv(final_norm);
    w.head = conv(head);
    return w;
  }
};

// Per-layer key/value history for one generation session. Storage for a
// layer is allocated on first write, so layers that are never executed
// stay empty. Layout per layer: [batch, heads, max_seq, head_dim].
template <typename T>
class KVCache {
 public:
  KVCache(const ModelConfig& config, std::size_t batch)
      : batch_(batch),
        heads_(config.n_heads),
        head_dim_(config.head_dim()),
        max_seq_(config.max_seq),
        keys_(config.n_layers),
        values_(config.n_layers),
        filled_(config.n_layers, 0) {}

  std::size_t batch() const { return batch_; }
  std::size_t n_layers() const { return filled_.size(); }
  std::size_t filled(std::size_t layer) const { return filled_.at(layer); }
  std::size_t tokens_processed() const { return processed_; }

  // Skip set this session was opened with; fixed until reset.
  bool bound() const { return bound_; }
  const LayerMask& skip_set() const { return skip_; }
  void bind(const LayerMask& skip) {
    if (bound_) throw CacheConsistencyError("kv cache: session already bound to a skip set");
    if (!skip.empty() && skip.size() != filled_.size()) {
      throw CacheConsistencyError("kv cache: skip set size " + std::to_string(skip.size()) + " vs " +
                                  std::to_string(filled_.size()) + " layers");
    }
    skip_ = skip.empty() ? LayerMask(filled_.size()) : skip;
    bound_ = true;
  }

  void advance(std::size_t n) { processed_ += n; }

  // k, v: [batch, heads, n, head_dim]
  void append(std::size_t layer, const Tensor<T>& k, const Tensor<T>& v) {
    const std::size_t n = k.dim(2);
    if (filled_[layer] + n > max_seq_) throw CacheConsistencyError("kv cache: exceeds max_seq");
    if (keys_[layer].empty()) {
      keys_[layer].assign(batch_ * heads_ * max_seq_ * head_dim_, T(0));
      values_[layer].assign(keys_[layer].size(), T(0));
    }
    for (std::size_t bh = 0; bh < batch_ * heads_; ++bh) {
      const std::size_t dst = (bh * max_seq_ + filled_[layer]) * head_dim_;
      std::copy_n(k.data().data() + bh * n * head_dim_, n * head_dim_, keys_[layer].data() + dst);
      std::copy_n(v.data().data() + bh * n * head_dim_, n * head_dim_, values_[layer].data() + dst);
    }
    filled_[layer] += n;
  }

  Tensor<T> keys(std::size_t layer) const { return gather(keys_[layer], filled_[layer]); }
  Tensor<T> values(std::size_t layer) const { return gather(values_[layer], filled_[layer]); }

 private:
  Tensor<T> gather(const std::vector<T>& buf, std::size_t len) const {
    std::vector<T> out(batch_ * heads_ * len * head_dim_);
    for (std::size_t bh = 0; bh < batch_ * heads_; ++bh)
      std::copy_n(buf.data() + bh * max_seq_ * head_dim_, len * head_dim_, out.data() + bh * len * head_dim_);
    return Tensor<T>(Shape{batch_, heads_, len, head_dim_}, std::move(out));
  }

  std::size_t batch_, heads_, head_dim_, max_seq_;
  std::vector<std::vector<T>> keys_, values_;
  std::vector<std::size_t> filled_;
  std::size_t processed_ = 0;
  LayerMask skip_;
  bool bound_ = false;
};

template <typename T>
struct ForwardOptions {
  const LoraSet<T>* lora = nullptr;
  bool training = false;  // enables adapter dropout
  Rng* dropout_rng = nullptr;
};

namespace detail {

inline std::size_t& layer_invocations() {
  thread_local std::size_t count = 0;
  return count;
}

}  // namespace detail

// Number of residual-branch evaluations on this thread since the last reset.
inline std::size_t layer_invocation_count() { return detail::layer_invocations(); }
inline void reset_layer_invocation_count() { detail::layer_invocations() = 0; }

template <typename T>
Tensor<T> embed(const ModelWeights<T>& w, const TokenBatch& tokens) {
  return embedding(w.tok_embedding, std::span<const std::int32_t>(tokens.ids), Shape{tokens.batch, tokens.length});
}

// Final norm and output projection: hidden [B, n, D] -> logits [B, n, V].
template <typename T>
Tensor<T> output_logits(const ModelWeights<T>& w, const Tensor<T>& hidden) {
  return matmul(rmsnorm(hidden, w.final_norm, static_cast<T>(ModelConfig::kNormEps)), w.head);
}

// Residual branch phi(h) of one layer, so that layer output = h + phi(h).
// With a cache, this call's keys/values are appended and attention covers the
// whole cached history; `start_pos` must equal the layer's filled length.
template <typename T>
Tensor<T> layer_branch(const ModelWeights<T>& w, std::size_t layer, const Tensor<T>& hidden, KVCache<T>* cache,
                       std::size_t start_pos, const ForwardOptions<T>& opts = {}) {
  const ModelConfig& c = w.config;
  if (layer >= c.n_layers) throw ConfigError("layer index " + std::to_string(layer) + " out of range");
  if (hidden.rank() != 3 || hidden.dim(2) != c.d_model) {
    throw DimensionError("layer_forward: hidden must be [B, n, " + std::to_string(c.d_model) + "], got " +
                         to_string(hidden.shape()));
  }
  if (cache) {
    if (cache->filled(layer) != start_pos) {
      throw CacheConsistencyError("layer " + std::to_string(layer) + ": positions start at " +
                                  std::to_string(start_pos) + " but cache holds " +
                                  std::to_string(cache->filled(layer)));
    }
    if (cache->batch() != hidden.dim(0)) throw CacheConsistencyError("kv cache batch size disagrees with input");
  }
  ++detail::layer_invocations();
  const auto& lw = w.layers[layer];
  const std::size_t batch = hidden.dim(0), n = hidden.dim(1), heads = c.n_heads, hd = c.head_dim();
  const T eps = static_cast<T>(ModelConfig::kNormEps);
  auto proj = [&](const Tensor<T>& x, LoraTarget t) {
    return adapted_matmul(x, lw.projection(t), opts.lora ? opts.lora->get(layer, t) : nullptr, opts.training,
                          opts.dropout_rng);
  };
  auto split_heads = [&](const Tensor<T>& x) { return permute(reshape(x, {batch, n, heads, hd}), {0, 2, 1, 3}); };

  const Tensor<T> xn = rmsnorm(hidden, lw.attn_norm, eps);
  const Tensor<T> q = rope(split_heads(proj(xn, LoraTarget::kQuery)), start_pos, ModelConfig::kRopeTheta);
  const Tensor<T> k = rope(split_heads(proj(xn, LoraTarget::kKey)), start_pos, ModelConfig::kRopeTheta);
  const Tensor<T> v = split_heads(proj(xn, LoraTarget::kValue));

  Tensor<T> keys = k, vals = v;
  std::size_t past = 0;
  if (cache) {
    past = cache->filled(layer);
    if (past > 0) {
      keys = concat(cache->keys(layer), k, 2);
      vals = concat(cache->values(layer), v, 2);
    }
    cache->append(layer, k.detach(), v.detach());
  }
  Tensor<T> scores = scale(matmul_nt(q, keys), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  std::optional<RowMask> mask;
  if (n > 1) mask = RowMask::causal(n, past + n, past);
  const Tensor<T> attn = matmul(softmax_rows(scores, mask), vals);
  const Tensor<T> merged = reshape(permute(attn, {0, 2, 1, 3}), {batch, n, c.d_model});
  const Tensor<T> attn_out = proj(merged, LoraTarget::kOutput);

  const Tensor<T> h1 = add(hidden, attn_out);
  const Tensor<T> x2 = rmsnorm(h1, lw.ffn_norm, eps);
  const Tensor<T> act = mul(silu(proj(x2, LoraTarget::kGate)), proj(x2, LoraTarget::kUp));
  const Tensor<T> ffn_out = proj(act, LoraTarget::kDown);
  return add(attn_out, ffn_out);
}

template <typename T>
Tensor<T> layer_forward(const ModelWeights<T>& w, std::size_t layer, const Tensor<T>& hidden, KVCache<T>* cache,
                        std::size_t start_pos, const ForwardOptions<T>& opts = {}) {
  return add(hidden, layer_branch(w, layer, hidden, cache, start_pos, opts));
}

namespace detail {

inline void check_skip_size(const LayerMask& skip, std::size_t n_layers) {
  if (!skip.empty() && skip.size() != n_layers) {
    throw ConfigError("skip set covers " + std::to_string(skip.size()) + " layers, model has " +
                      std::to_string(n_layers));
  }
}

template <typename T>
Tensor<T> run_stack(const ModelWeights<T>& w, const TokenBatch& tokens, const LayerMask& skip, KVCache<T>* cache,
                    std::size_t start_pos, const ForwardOptions<T>& opts) {
  check_skip_size(skip, w.config.n_layers);
  if (start_pos + tokens.length > w.config.max_seq) {
    throw DimensionError("sequence of " + std::to_string(start_pos + tokens.length) + " tokens exceeds max_seq " +
                         std::to_string(w.config.max_seq));
  }
  Tensor<T> h = embed(w, tokens);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    if (skip.test(l)) continue;  // H_l = H_{l-1}: no compute, no cache write
    h = layer_forward(w, l, h, cache, start_pos, opts);
  }
  if (cache) cache->advance(tokens.length);
  return output_logits(w, h);
}

}  // namespace detail

// Whole-sequence forward without a cache. Layers in `skip` pass the hidden
// state through unchanged.
template <typename T>
Tensor<T> forward_full(const ModelWeights<T>& w, const TokenBatch& tokens, const LayerMask& skip = {},
                       const ForwardOptions<T>& opts = {}) {
  return detail::run_stack<T>(w, tokens, skip, nullptr, 0, opts);
}

// Prompt pass that opens a cache session bound to `skip`.
template <typename T>
Tensor<T> prefill(const ModelWeights<T>& w, const TokenBatch& tokens, KVCache<T>& cache, const LayerMask& skip = {},
                  const ForwardOptions<T>& opts = {}) {
  if (cache.tokens_processed() != 0) throw CacheConsistencyError("prefill: cache already holds tokens");
  detail::check_skip_size(skip, w.config.n_layers);
  cache.bind(skip);
  return detail::run_stack<T>(w, tokens, skip, &cache, 0, opts);
}

// One incremental step: tokens is [B, 1].
template <typename T>
Tensor<T> decode_step(const ModelWeights<T>& w, const TokenBatch& tokens, KVCache<T>& cache,
                      const LayerMask& skip = {}, const ForwardOptions<T>& opts = {}) {
  if (tokens.length != 1) throw DimensionError("decode_step: expects one token per sequence");
  const LayerMask normalized = skip.empty() ? LayerMask(w.config.n_layers) : skip;
  if (!cache.bound()) throw CacheConsistencyError("decode_step: cache was not opened by prefill");
  if (!(normalized == cache.skip_set())) {
    throw CacheConsistencyError("decode_step: skip set " + normalized.to_bitstring() + " differs from session set " +
                                cache.skip_set().to_bitstring());
  }
  return detail::run_stack<T>(w, tokens, normalized, &cache, cache.tokens_processed(), opts);
}

}  // namespace first
