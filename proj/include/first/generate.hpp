#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <variant>
#include <vector>

#include "first/model.hpp"
#include "first/rng.hpp"
#include "first/router.hpp"

namespace first {

struct SamplerConfig {
  bool greedy = false;
  double temperature = 0.8;
  std::size_t top_k = 10;
};

// Which layers decoding executes.
struct NoSkip {};
struct FixedSkip {
  LayerMask skip;
};
template <typename T>
struct RoutedSkip {
  const RouterBank<T>* routers = nullptr;
};

template <typename T>
using SkipPolicy = std::variant<NoSkip, FixedSkip, RoutedSkip<T>>;

struct GenerationResult {
  std::vector<std::int32_t> ids;
  std::vector<double> step_seconds;  // one entry per decode step (excludes prefill)
  double prefill_seconds = 0.0;
  std::optional<SkipDecision> decision;
};

// Picks a token from a logits row.
template <typename T>
std::int32_t sample_token(std::span<const T> logits, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.greedy || cfg.top_k == 1) {
    return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<std::int32_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = cfg.top_k == 0 ? logits.size() : std::min(cfg.top_k, logits.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::int32_t a, std::int32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  const double top = static_cast<double>(logits[order[0]]);
  std::vector<double> weights(k);
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    weights[i] = std::exp((static_cast<double>(logits[order[i]]) - top) / cfg.temperature);
    sum += weights[i];
  }
  double u = rng.uniform() * sum;
  for (std::size_t i = 0; i < k; ++i) {
    u -= weights[i];
    if (u <= 0) return order[i];
  }
  return order[k - 1];
}

namespace detail {

template <typename T>
std::span<const T> last_row(const Tensor<T>& logits) {
  const std::size_t v = logits.shape().back();
  return logits.data().subspan(logits.numel() - v, v);
}

}  // namespace detail

// Autoregressive generation for a single prompt. Skipping policies other
// than NoSkip use the deployed protocol: prefill runs every layer, then all
// decode steps obey one frozen decision. Stops early at `stop_token`.
template <typename T>
GenerationResult generate(const ModelWeights<T>& w, const std::vector<std::int32_t>& prompt, std::size_t max_new_tokens,
                          const SamplerConfig& sampler, const SkipPolicy<T>& policy, Rng& rng,
                          std::optional<std::int32_t> stop_token = std::nullopt, const ForwardOptions<T>& opts = {}) {
  if (max_new_tokens < 1) throw ConfigError("generate: max_new_tokens must be >= 1");
  if (prompt.empty()) throw DegenerateInputError("generate: empty prompt");
  NoGradGuard no_grad;
  using clock = std::chrono::steady_clock;
  GenerationResult result;
  const TokenBatch prompt_batch = TokenBatch::single(prompt);

  const auto t0 = clock::now();
  Tensor<T> logits;
  std::optional<KVCache<T>> cache;
  LayerMask skip(w.config.n_layers);
  if (std::holds_alternative<NoSkip>(policy)) {
    cache.emplace(w.config, 1);
    logits = prefill(w, prompt_batch, *cache, skip, opts);
  } else {
    RoutedPrefill<T> pre = std::holds_alternative<FixedSkip>(policy)
                               ? prefill_with_decision(w, prompt_batch,
                                                       SkipDecision::from_skip_set(std::get<FixedSkip>(policy).skip), opts)
                               : prefill_with_routers(w, *std::get<RoutedSkip<T>>(policy).routers, prompt_batch, opts);
    logits = pre.logits;
    cache.emplace(std::move(pre.cache));
    skip = pre.decision.skip_set();
    result.decision = std::move(pre.decision);
  }
  std::int32_t next = sample_token<T>(detail::last_row(logits), sampler, rng);
  result.prefill_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  result.ids.push_back(next);

  while (result.ids.size() < max_new_tokens && !(stop_token && next == *stop_token) &&
         prompt.size() + result.ids.size() < w.config.max_seq) {
    const auto s0 = clock::now();
    logits = decode_step(w, TokenBatch::single({next}), *cache, skip, opts);
    next = sample_token<T>(detail::last_row(logits), sampler, rng);
    result.step_seconds.push_back(std::chrono::duration<double>(clock::now() - s0).count());
    result.ids.push_back(next);
  }
  return result;
}

}  // namespace first
