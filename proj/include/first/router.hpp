#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "first/errors.hpp"
#include "first/model.hpp"
#include "first/ops.hpp"

namespace first {

inline constexpr double kPassThreshold = 0.5;

// Bias-free linear probe: rho = mean over valid tokens of sigmoid(w . h).
template <typename T>
struct Router {
  Tensor<T> weight;  // [D]
};

template <typename T>
class RouterBank {
 public:
  RouterBank() = default;
  explicit RouterBank(std::vector<Router<T>> routers) : routers_(std::move(routers)) {}

  static RouterBank zeros(const ModelConfig& config) {
    std::vector<Router<T>> r(config.n_layers);
    for (auto& x : r) x.weight = Tensor<T>::zeros({config.d_model});
    return RouterBank(std::move(r));
  }

  std::size_t size() const { return routers_.size(); }
  const Router<T>& operator[](std::size_t i) const { return routers_.at(i); }
  Router<T>& operator[](std::size_t i) { return routers_.at(i); }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& r : routers_) out.push_back(r.weight);
    return out;
  }
  void set_trainable(bool flag) const {
    for (auto p : parameters()) p.set_requires_grad(flag);
  }

  void validate(const ModelConfig& config) const {
    if (routers_.size() != config.n_layers) {
      throw DimensionError("router bank: " + std::to_string(routers_.size()) + " routers for " +
                           std::to_string(config.n_layers) + " layers");
    }
    for (const auto& r : routers_) {
      if (r.weight.rank() != 1 || r.weight.numel() != config.d_model) {
        throw DimensionError("router: weight " + to_string(r.weight.shape()) + " does not match d_model");
      }
      for (T v : r.weight.data())
        if (!std::isfinite(static_cast<double>(v))) throw NumericalError("router: non-finite weight");
    }
  }

  RouterBank clone() const {
    std::vector<Router<T>> r;
    for (const auto& x : routers_) r.push_back(Router<T>{x.weight.clone()});
    return RouterBank(std::move(r));
  }

  template <typename U>
  RouterBank<U> cast() const {
    std::vector<Router<U>> r;
    for (const auto& x : routers_) {
      r.push_back(Router<U>{Tensor<U>(x.weight.shape(), std::vector<U>(x.weight.data().begin(), x.weight.data().end()))});
    }
    return RouterBank<U>(std::move(r));
  }

 private:
  std::vector<Router<T>> routers_;
};

// Per-layer pass flags frozen at prefill. pass[i] == (rho[i] >= 0.5).
class SkipDecision {
 public:
  static SkipDecision from_rhos(std::vector<double> rhos) {
    std::vector<bool> pass(rhos.size());
    for (std::size_t i = 0; i < rhos.size(); ++i) pass[i] = rhos[i] >= kPassThreshold;
    return SkipDecision(std::move(rhos), std::move(pass));
  }
  // Decision that obeys a fixed skip set (rho reported as 0 or 1).
  static SkipDecision from_skip_set(const LayerMask& skip) {
    std::vector<double> rhos(skip.size());
    for (std::size_t i = 0; i < skip.size(); ++i) rhos[i] = skip.test(i) ? 0.0 : 1.0;
    return from_rhos(std::move(rhos));
  }

  std::size_t size() const { return rho_.size(); }
  const std::vector<double>& rho() const { return rho_; }
  bool passes(std::size_t layer) const { return pass_.at(layer); }
  std::size_t skipped_count() const {
    std::size_t c = 0;
    for (bool p : pass_) c += p ? 0 : 1;
    return c;
  }
  LayerMask skip_set() const {
    LayerMask m(pass_.size());
    for (std::size_t i = 0; i < pass_.size(); ++i) m.set(i, !pass_[i]);
    return m;
  }

 private:
  SkipDecision(std::vector<double> rho, std::vector<bool> pass) : rho_(std::move(rho)), pass_(std::move(pass)) {}
  std::vector<double> rho_;
  std::vector<bool> pass_;
};

// hidden [B, n, D], mask [B * n] (non-zero = valid token) -> rho [B].
template <typename T>
Tensor<T> router_probability(const Router<T>& router, const Tensor<T>& hidden, std::span<const std::uint8_t> mask) {
  if (hidden.rank() != 3 || hidden.dim(2) != router.weight.numel()) {
    throw DimensionError("router_probability: hidden " + to_string(hidden.shape()) + " vs router weight " +
                         to_string(router.weight.shape()));
  }
  const std::size_t batch = hidden.dim(0), n = hidden.dim(1);
  const Tensor<T> w = reshape(router.weight, {router.weight.numel(), 1});
  const Tensor<T> per_token = sigmoid(reshape(matmul(hidden, w), {batch, n}));
  return masked_mean_last(per_token, mask);
}

// Every token valid.
template <typename T>
Tensor<T> router_probability(const Router<T>& router, const Tensor<T>& hidden) {
  std::vector<std::uint8_t> mask(hidden.dim(0) * hidden.dim(1), 1);
  return router_probability(router, hidden, std::span<const std::uint8_t>(mask));
}

// Batch-level rho: arithmetic mean of the per-sequence values.
inline double unify_batch(std::span<const double> rhos) {
  if (rhos.empty()) throw DegenerateInputError("unify_batch: empty batch");
  double sum = 0;
  for (double r : rhos) sum += r;
  return sum / static_cast<double>(rhos.size());
}

// H = H_prev + rho * phi(H_prev), with rho given per sequence ([B]).
template <typename T>
Tensor<T> soft_layer_forward(const ModelWeights<T>& w, std::size_t layer, const Tensor<T>& hidden,
                             const Tensor<T>& rho, const ForwardOptions<T>& opts = {}) {
  return add(hidden, scale_batch(layer_branch<T>(w, layer, hidden, nullptr, 0, opts), rho));
}

template <typename T>
Tensor<T> soft_layer_forward(const ModelWeights<T>& w, std::size_t layer, const Tensor<T>& hidden, T rho,
                             const ForwardOptions<T>& opts = {}) {
  return soft_layer_forward(w, layer, hidden, Tensor<T>::full({hidden.dim(0)}, rho), opts);
}

template <typename T>
struct SoftForwardResult {
  Tensor<T> logits;
  std::vector<Tensor<T>> rhos;  // per layer, each [B]
};

// Training-time forward: router i reads the (soft) input of layer i and its
// rho scales that layer's residual branch. `router_mask` selects the tokens
// the routers average over.
template <typename T>
SoftForwardResult<T> soft_forward(const ModelWeights<T>& w, const RouterBank<T>& routers, const TokenBatch& tokens,
                                  std::span<const std::uint8_t> router_mask, const ForwardOptions<T>& opts = {}) {
  routers.validate(w.config);
  SoftForwardResult<T> out;
  Tensor<T> h = embed(w, tokens);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    Tensor<T> rho = router_probability(routers[l], h, router_mask);
    h = soft_layer_forward(w, l, h, rho, opts);
    out.rhos.push_back(std::move(rho));
  }
  out.logits = output_logits(w, h);
  return out;
}

template <typename T>
struct RoutedPrefill {
  Tensor<T> logits;
  KVCache<T> cache;
  SkipDecision decision;
};

// Full-compute prompt pass. Before executing layer i its router reads the
// layer's input (the embedding for i = 0); the batch-unified rho fixes the
// decision. Every layer runs, but only passing layers write the cache.
// Prompts in a batch must share one length (no padding).
template <typename T>
RoutedPrefill<T> prefill_with_routers(const ModelWeights<T>& w, const RouterBank<T>& routers, const TokenBatch& tokens,
                                      const ForwardOptions<T>& opts = {}) {
  if (tokens.length == 0) throw DegenerateInputError("prefill: empty prompt");
  routers.validate(w.config);
  if (tokens.length > w.config.max_seq) throw DimensionError("prefill: prompt exceeds max_seq");
  KVCache<T> cache(w.config, tokens.batch);
  std::vector<double> rhos;
  Tensor<T> h = embed(w, tokens);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const Tensor<T> per_seq = router_probability(routers[l], h);
    std::vector<double> vals(per_seq.data().begin(), per_seq.data().end());
    const double rho = unify_batch(vals);
    rhos.push_back(rho);
    h = layer_forward(w, l, h, rho >= kPassThreshold ? &cache : nullptr, 0, opts);
  }
  cache.advance(tokens.length);
  SkipDecision decision = SkipDecision::from_rhos(std::move(rhos));
  cache.bind(decision.skip_set());
  return RoutedPrefill<T>{output_logits(w, h), std::move(cache), std::move(decision)};
}

// Full-compute prompt pass under an already fixed decision: every layer
// runs, only passing layers write the cache. Mirrors the routed protocol
// for input-agnostic skip sets.
template <typename T>
RoutedPrefill<T> prefill_with_decision(const ModelWeights<T>& w, const TokenBatch& tokens, const SkipDecision& decision,
                                       const ForwardOptions<T>& opts = {}) {
  if (tokens.length == 0) throw DegenerateInputError("prefill: empty prompt");
  if (decision.size() != w.config.n_layers) throw CacheConsistencyError("decision does not cover every layer");
  if (tokens.length > w.config.max_seq) throw DimensionError("prefill: prompt exceeds max_seq");
  KVCache<T> cache(w.config, tokens.batch);
  Tensor<T> h = embed(w, tokens);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    h = layer_forward(w, l, h, decision.passes(l) ? &cache : nullptr, 0, opts);
  }
  cache.advance(tokens.length);
  cache.bind(decision.skip_set());
  return RoutedPrefill<T>{output_logits(w, h), std::move(cache), decision};
}

// Decode step obeying the cached decision; routers are not consulted.
template <typename T>
Tensor<T> decode_with_decision(const ModelWeights<T>& w, const TokenBatch& token, KVCache<T>& cache,
                               const SkipDecision& decision, const ForwardOptions<T>& opts = {}) {
  if (decision.size() != w.config.n_layers) throw CacheConsistencyError("decision does not cover every layer");
  return decode_step(w, token, cache, decision.skip_set(), opts);
}

}  // namespace first
