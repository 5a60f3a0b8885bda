#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "first/dataset.hpp"
#include "first/errors.hpp"
#include "first/generate.hpp"
#include "first/model.hpp"
#include "first/router.hpp"
#include "first/tokenizer.hpp"

namespace first {

// A path through the include/exclude tree: include[i] means layer i runs.
struct LayerSubsequence {
  LayerMask include;

  static LayerSubsequence all(std::size_t n_layers) { return {LayerMask(n_layers, true)}; }
  static LayerSubsequence none(std::size_t n_layers) { return {LayerMask(n_layers, false)}; }
  static LayerSubsequence from_skip_set(const LayerMask& skip) { return {skip.complement()}; }

  std::size_t size() const { return include.size(); }
  std::size_t layers_used() const { return include.count(); }
  LayerMask skip_set() const { return include.complement(); }

  friend bool operator==(const LayerSubsequence&, const LayerSubsequence&) = default;
};

// Nearest included layer strictly below i; nullopt means the embedding.
inline std::optional<std::size_t> anc(const LayerSubsequence& path, std::size_t i) {
  if (i >= path.size()) throw ConfigError("anc: layer " + std::to_string(i) + " out of range");
  for (std::size_t k = i; k-- > 0;) {
    if (path.include.test(k)) return k;
  }
  return std::nullopt;
}

// Reference interpreter for the skipped-layer recursion: level i holds
// H_anc(i) if layer i is excluded, else H_anc(i) + phi_i(H_anc(i)).
// Kept separate from forward_full so the two can be cross-checked.
template <typename T>
Tensor<T> subsequence_forward(const ModelWeights<T>& w, const TokenBatch& tokens, const LayerSubsequence& path) {
  const std::size_t m = w.config.n_layers;
  if (path.size() != m) throw ConfigError("subsequence_forward: path length disagrees with model depth");
  const Tensor<T> embedded = embed(w, tokens);
  std::vector<Tensor<T>> level(m);
  auto at = [&](std::optional<std::size_t> k) -> const Tensor<T>& { return k ? level[*k] : embedded; };
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor<T>& below = at(anc(path, i));
    level[i] = path.include.test(i) ? add(below, layer_branch<T>(w, i, below, nullptr, 0)) : below;
  }
  return output_logits(w, level[m - 1]);
}

// Scores one subsequence under the deployed protocol (full prefill, skipped
// decode). Higher is better; values are expected to be non-negative.
using QualityFn = std::function<double(const LayerSubsequence&)>;

// Fraction of examples whose greedy response (up to EOS) matches exactly.
template <typename T>
QualityFn sequence_accuracy_quality(const ModelWeights<T>& w, std::vector<Example> eval_set) {
  return [&w, eval_set = std::move(eval_set)](const LayerSubsequence& path) {
    if (eval_set.empty()) throw DegenerateInputError("quality: empty evaluation set");
    SamplerConfig greedy{true, 1.0, 1};
    Rng rng(0);
    std::size_t hits = 0;
    for (const auto& ex : eval_set) {
      const auto res = generate(w, encode_prompt(ex.prompt), ex.response.size() + 1, greedy,
                                SkipPolicy<T>{FixedSkip{path.skip_set()}}, rng, tokens::kEos);
      if (!res.ids.empty() && res.ids.back() == tokens::kEos && decode_response(res.ids) == ex.response) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(eval_set.size());
  };
}

namespace detail {

// Teacher-forced next-token distributions over [response, EOS] under a skip
// set: prefill the prompt with every layer, then decode the reference.
template <typename T>
std::vector<std::vector<double>> response_log_probs(const ModelWeights<T>& w, const Example& ex, const LayerMask& skip) {
  NoGradGuard guard;
  const auto prompt = encode_prompt(ex.prompt);
  std::vector<std::int32_t> reference = encode_bytes(ex.response);
  reference.push_back(tokens::kEos);
  auto pre = prefill_with_decision(w, TokenBatch::single(prompt), SkipDecision::from_skip_set(skip));
  std::vector<std::vector<double>> out;
  auto push = [&](const Tensor<T>& logits) {
    const auto row = last_row(logits);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> lp(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) lp[i] = static_cast<double>(row[i]) - lse;
    out.push_back(std::move(lp));
  };
  push(pre.logits);
  for (std::size_t t = 0; t + 1 < reference.size(); ++t) {
    push(decode_step(w, TokenBatch::single({reference[t]}), pre.cache, skip));
  }
  return out;
}

}  // namespace detail

// exp(-mean NLL) of the reference responses: 1 / perplexity, in (0, 1].
template <typename T>
QualityFn inverse_perplexity_quality(const ModelWeights<T>& w, std::vector<Example> eval_set) {
  return [&w, eval_set = std::move(eval_set)](const LayerSubsequence& path) {
    if (eval_set.empty()) throw DegenerateInputError("quality: empty evaluation set");
    double nll = 0;
    std::size_t count = 0;
    for (const auto& ex : eval_set) {
      std::vector<std::int32_t> reference = encode_bytes(ex.response);
      reference.push_back(tokens::kEos);
      const auto lps = detail::response_log_probs(w, ex, path.skip_set());
      for (std::size_t t = 0; t < reference.size(); ++t) nll -= lps[t][static_cast<std::size_t>(reference[t])];
      count += reference.size();
    }
    return std::exp(-nll / static_cast<double>(count));
  };
}

// exp(-mean KL(full || path)) over teacher-forced reference positions. Equals
// 1 exactly iff the subsequence reproduces the full model's distributions.
template <typename T>
QualityFn fidelity_quality(const ModelWeights<T>& w, std::vector<Example> eval_set) {
  std::vector<std::vector<std::vector<double>>> full;
  for (const auto& ex : eval_set) full.push_back(detail::response_log_probs(w, ex, LayerMask(w.config.n_layers)));
  return [&w, eval_set = std::move(eval_set), full = std::move(full)](const LayerSubsequence& path) {
    if (eval_set.empty()) throw DegenerateInputError("quality: empty evaluation set");
    double kl = 0;
    std::size_t count = 0;
    for (std::size_t e = 0; e < eval_set.size(); ++e) {
      const auto lps = detail::response_log_probs(w, eval_set[e], path.skip_set());
      for (std::size_t t = 0; t < lps.size(); ++t) {
        for (std::size_t v = 0; v < lps[t].size(); ++v) {
          kl += std::exp(full[e][t][v]) * (full[e][t][v] - lps[t][v]);
        }
        ++count;
      }
    }
    return std::exp(-std::max(0.0, kl) / static_cast<double>(count));
  };
}

struct OraclePoint {
  LayerSubsequence path;
  std::size_t layers_used = 0;
  double quality = 0;
};

struct OracleResult {
  LayerSubsequence best;
  double quality = 0;
  std::size_t layers_used = 0;
  double full_quality = 0;
  double epsilon = 0;
  std::vector<OraclePoint> best_by_size;  // index = layers used
  std::vector<OraclePoint> pareto;  // non-dominated points, increasing size
};

inline constexpr std::size_t kMaxOracleLayers = 16;

namespace detail {

// Higher quality first; then lexicographically smaller include mask.
inline bool better_point(const OraclePoint& a, const OraclePoint& b) {
  if (a.quality != b.quality) return a.quality > b.quality;
  return a.path.include.to_bitstring() < b.path.include.to_bitstring();
}

}  // namespace detail

// Exhaustive search over all 2^m subsequences. Returns the fewest-layer
// subsequence with quality >= (1 - epsilon) * full quality.
inline OracleResult brute_force_oracle(std::size_t n_layers, const QualityFn& quality, double epsilon) {
  if (n_layers > kMaxOracleLayers) {
    throw EnumerationLimitError("oracle: " + std::to_string(n_layers) + " layers exceeds enumeration limit of " +
                                std::to_string(kMaxOracleLayers));
  }
  if (epsilon < 0 || epsilon > 1) throw ConfigError("oracle: epsilon must lie in [0, 1]");
  OracleResult r;
  r.epsilon = epsilon;
  const std::uint32_t full_mask = (1u << n_layers) - 1;
  std::vector<std::optional<OraclePoint>> by_size(n_layers + 1), winner_by_size(n_layers + 1);
  std::optional<double> full_quality;
  std::vector<OraclePoint> points;
  points.reserve(full_mask + 1);
  for (std::uint32_t bits = 0; bits <= full_mask; ++bits) {
    LayerSubsequence path{LayerMask(n_layers)};
    for (std::size_t i = 0; i < n_layers; ++i) path.include.set(i, (bits >> i) & 1u);
    OraclePoint p{path, path.layers_used(), quality(path)};
    if (bits == full_mask) full_quality = p.quality;
    points.push_back(std::move(p));
  }
  r.full_quality = *full_quality;
  const double bar = (1.0 - epsilon) * r.full_quality;
  for (const auto& p : points) {
    auto& slot = by_size[p.layers_used];
    if (!slot || detail::better_point(p, *slot)) slot = p;
    if (p.quality >= bar) {
      auto& w = winner_by_size[p.layers_used];
      if (!w || detail::better_point(p, *w)) w = p;
    }
  }
  for (std::size_t c = 0; c <= n_layers; ++c) {
    if (winner_by_size[c]) {
      r.best = winner_by_size[c]->path;
      r.quality = winner_by_size[c]->quality;
      r.layers_used = c;
      break;
    }
  }
  double best_so_far = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c <= n_layers; ++c) {
    r.best_by_size.push_back(*by_size[c]);
    if (by_size[c]->quality > best_so_far) {
      r.pareto.push_back(*by_size[c]);
      best_so_far = by_size[c]->quality;
    }
  }
  return r;
}

// Input-agnostic baseline: keep layers round(k (m-1)/(K-1)), k = 0..K-1.
inline LayerSubsequence unified_skipping_set(std::size_t n_layers, std::size_t retain) {
  if (retain < 2 || retain > n_layers) {
    throw ConfigError("unified skipping: retain count " + std::to_string(retain) + " outside [2, " +
                      std::to_string(n_layers) + "]");
  }
  LayerSubsequence path{LayerMask(n_layers)};
  for (std::size_t k = 0; k < retain; ++k) {
    const double pos = static_cast<double>(k) * static_cast<double>(n_layers - 1) / static_cast<double>(retain - 1);
    path.include.set(static_cast<std::size_t>(std::lround(pos)), true);
  }
  return path;
}

// Retain count for a target skip fraction.
inline std::size_t unified_retain_count(std::size_t n_layers, double skip_budget) {
  const auto skipped = static_cast<std::size_t>(std::lround(skip_budget * static_cast<double>(n_layers)));
  return std::clamp<std::size_t>(n_layers - std::min(skipped, n_layers), 2, n_layers);
}

}  // namespace first
