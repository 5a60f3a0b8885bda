#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "first/config.hpp"
#include "first/csv.hpp"
#include "first/dataset.hpp"
#include "first/generate.hpp"
#include "first/lora_merge.hpp"
#include "first/metrics.hpp"
#include "first/oracle.hpp"
#include "first/training.hpp"

namespace first {

// Greedy-decoding quality of one configuration over an evaluation split.
struct QualityReport {
  double accuracy = 0;        // exact response match, EOS required
  double bleu1 = 0, bleu2 = 0;
  double rouge1 = 0, rouge_l = 0;  // F1
  double token_accuracy = 0;  // byte-level, position-wise
  double skip_fraction = 0;   // mean fraction of layers skipped while decoding
  std::size_t examples = 0;
};

template <typename T>
QualityReport evaluate_quality(const ModelWeights<T>& w, const SkipPolicy<T>& policy, const std::vector<Example>& data,
                               const ForwardOptions<T>& opts = {}, std::size_t extra_tokens = 4) {
  if (data.empty()) throw DegenerateInputError("evaluate: empty split");
  SamplerConfig greedy;
  greedy.greedy = true;
  Rng rng(0);
  QualityReport q;
  for (const auto& ex : data) {
    const auto res = generate(w, encode_prompt(ex.prompt), ex.response.size() + extra_tokens, greedy, policy, rng,
                              tokens::kEos, opts);
    const std::string got = decode_response(res.ids);
    const bool ended = std::find(res.ids.begin(), res.ids.end(), tokens::kEos) != res.ids.end();
    q.accuracy += ended && got == ex.response;
    const auto cand = split_words(got), ref = split_words(ex.response);
    if (!ref.empty()) {
      q.bleu1 += bleu_n(cand, ref, 1);
      q.bleu2 += bleu_n(cand, ref, 2);
      q.rouge1 += rouge_1(cand, ref).f1;
      q.rouge_l += rouge_l(cand, ref).f1;
    }
    if (!ex.response.empty()) q.token_accuracy += token_accuracy(encode_bytes(got), encode_bytes(ex.response));
    if (res.decision) {
      q.skip_fraction += static_cast<double>(res.decision->skipped_count()) / static_cast<double>(w.config.n_layers);
    }
  }
  const double n = static_cast<double>(data.size());
  for (double* v : {&q.accuracy, &q.bleu1, &q.bleu2, &q.rouge1, &q.rouge_l, &q.token_accuracy, &q.skip_fraction}) *v /= n;
  q.examples = data.size();
  return q;
}

// One timed configuration: a generation closure and its label.
struct TimedConfig {
  std::string label;
  std::function<GenerationResult()> run;
};

// Runs every configuration once per round, rotating the starting point, so
// slow drifts in machine speed hit all configurations alike. The first
// `warmup` rounds are discarded. Reports are relative to the first entry.
inline std::vector<LatencyReport> measure_tpot_interleaved(const std::vector<TimedConfig>& configs, std::size_t runs,
                                                           std::size_t warmup = 2) {
  if (configs.empty()) throw DegenerateInputError("latency: no configurations");
  if (runs < 1) throw ConfigError("latency: need at least one measured run");
  const std::size_t k = configs.size();
  std::vector<std::vector<GenerationResult>> results(k);
  for (std::size_t round = 0; round < warmup + runs; ++round) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = (round + j) % k;
      GenerationResult g = configs[c].run();
      if (round >= warmup) results[c].push_back(std::move(g));
    }
  }
  std::vector<LatencyReport> out;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t next = 0;
    out.push_back(measure_tpot(configs[c].label, [&] { return results[c][next++]; }, runs, 0));
  }
  for (std::size_t c = 1; c < k; ++c) out[c].relative_to(out[0]);
  return out;
}

// Long fixed-length generation for timing: EOS does not stop it.
template <typename T>
std::function<GenerationResult()> timing_run(const ModelWeights<T>& w, std::vector<std::int32_t> prompt,
                                             std::size_t tokens, SkipPolicy<T> policy) {
  return [&w, prompt = std::move(prompt), tokens, policy = std::move(policy)] {
    SamplerConfig greedy;
    greedy.greedy = true;
    Rng rng(0);
    return generate(w, prompt, tokens, greedy, policy, rng);
  };
}

// ---------------------------------------------------------------------------
// Reaching a skip level

inline std::vector<std::vector<std::int32_t>> encode_prompts(const std::vector<Example>& data) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& ex : data) out.push_back(encode_prompt(ex.prompt));
  return out;
}

struct SkipBand {
  double lo = 0.15, hi = 0.25;
  bool contains(double f) const { return f >= lo && f <= hi; }
  double distance(double f) const { return f < lo ? lo - f : (f > hi ? f - hi : 0.0); }
};

struct AlphaTrial {
  double alpha = 0;
  double skip = 0;
};

struct RouterTuning {
  double alpha = 0;
  double skip = 0;  // mean fraction over the tuning prompts
  bool in_band = false;
  RouterBank<float> routers;
  TrainResult log;
  std::vector<AlphaTrial> trials;
};

// Phase 1 searched over the penalty coefficient until the mean skip fraction
// over `prompts` lands in `band`. Starting at `start`, alpha is multiplied or
// divided by `factor` until the band is bracketed, then the bracket is bisected
// on a log scale. Each run starts from `warm_rho` (0 keeps zero routers).
// Returns the in-band run, or else the closest of `max_trials` runs.
inline RouterTuning tune_router_alpha(const ModelWeights<float>& w, const std::vector<Example>& train,
                                      const std::vector<Example>& val,
                                      const std::vector<std::vector<std::int32_t>>& prompts, TrainConfig config,
                                      double start, SkipBand band, double factor = 2.0, std::size_t max_trials = 6,
                                      double warm_rho = 0.9, std::size_t warm_sample = 64) {
  if (!(start > 0) || !(factor > 1) || max_trials == 0) throw ConfigError("alpha tuning: bad search settings");
  std::optional<RouterTuning> best;
  std::vector<AlphaTrial> trials;
  double under = 0, over = 0, alpha = start;
  for (std::size_t i = 0; i < max_trials; ++i) {
    RouterTuning t;
    t.alpha = alpha;
    t.routers = RouterBank<float>::zeros(w.config);
    if (warm_rho > 0) {
      const std::size_t n = std::min(warm_sample, train.size());
      warm_start_routers(w, t.routers, std::span<const Example>(train.data(), n), warm_rho);
    }
    config.alpha = alpha;
    t.log = train_routers(w, t.routers, train, val, config);
    t.skip = collect_skip_stats(w, t.routers, prompts).stats.average;
    t.in_band = band.contains(t.skip);
    trials.push_back({t.alpha, t.skip});
    const double skip = t.skip;
    if (!best || band.distance(skip) < band.distance(best->skip)) best = std::move(t);
    if (best->in_band) break;
    (skip < band.lo ? under : over) = alpha;
    if (under > 0 && over > 0)
      alpha = std::sqrt(under * over);
    else
      alpha = under > 0 ? alpha * factor : alpha / factor;
  }
  best->trials = std::move(trials);
  return std::move(*best);
}

struct DivisorTrial {
  double divisor = 0;
  double skip = 0;
};

struct AdapterTuning {
  double divisor = 0;
  double skip = 0;
  bool held = false;  // skip stayed within tolerance of the phase-1 level
  LoraSet<float> adapters;
  TrainResult log;
  std::vector<DivisorTrial> trials;
};

// Phase 2 with the penalty divisor raised along `divisors` until the skip
// level lands within `tolerance` of `phase1_skip` or falls below it. Returns
// the run that drifted least.
inline AdapterTuning tune_phase2_divisor(const ModelWeights<float>& w, const RouterBank<float>& routers,
                                         const std::vector<Example>& train, const std::vector<Example>& val,
                                         const std::vector<std::vector<std::int32_t>>& prompts, TrainConfig config,
                                         const LoraConfig& lora, double phase1_skip, double tolerance,
                                         std::vector<double> divisors, std::uint64_t seed) {
  if (divisors.empty()) throw ConfigError("divisor tuning: no candidates");
  std::sort(divisors.begin(), divisors.end());
  std::optional<AdapterTuning> best;
  std::vector<DivisorTrial> trials;
  for (double d : divisors) {
    AdapterTuning t;
    t.divisor = d;
    Rng rng = Rng(seed).split("phase2-adapters");
    t.adapters = LoraSet<float>::create(w.config, lora.rank, lora.lora_alpha, lora.dropout, rng);
    config.phase2_alpha_divisor = d;
    t.log = train_lora(w, routers, t.adapters, train, val, config);
    const ForwardOptions<float> opts{&t.adapters, false, nullptr};
    t.skip = collect_skip_stats(w, routers, prompts, opts).stats.average;
    const double drift = t.skip - phase1_skip;
    t.held = std::abs(drift) <= tolerance;
    trials.push_back({d, t.skip});
    const bool done = t.held || drift < 0;
    if (!best || std::abs(drift) < std::abs(best->skip - phase1_skip)) best = std::move(t);
    if (done) break;
  }
  best->trials = std::move(trials);
  return std::move(*best);
}

// ---------------------------------------------------------------------------
// FiRST versus fixed-interval skipping at a matched budget

struct CompareRow {
  std::string method;   // "Base", "Unified", "FiRST"
  std::string variant;  // "-", "R", "R+L"
  QualityReport quality;
  double tpot_median = 0;
  double relative_tpot = 1;
};

struct CompareSettings {
  double budget = 0.15;
  std::size_t latency_tokens = 128;
  std::size_t latency_runs = 5;
  bool train_unified_lora = true;
  LoraConfig lora;
  TrainConfig train;  // Phase-2 style settings for the unified adapters
  std::uint64_t seed = 0;
};

// Rows: Base, Unified R, Unified R+L, FiRST R and, when adapters are given,
// FiRST R+L. Adapter variants run on merged weights.
inline std::vector<CompareRow> run_comparison(const ModelWeights<float>& base, const RouterBank<float>& routers,
                                              const std::optional<LoraSet<float>>& first_lora,
                                              const DatasetSplits& data, const CompareSettings& s) {
  if (data.test.empty()) throw DegenerateInputError("compare: empty test split");
  const std::size_t m = base.config.n_layers;
  const LayerMask unified_skip = unified_skipping_set(m, unified_retain_count(m, s.budget)).skip_set();

  std::optional<ModelWeights<float>> unified_merged;
  if (s.train_unified_lora) {
    Rng rng = Rng(s.seed).split("unified-lora");
    auto adapters = LoraSet<float>::create(base.config, s.lora.rank, s.lora.lora_alpha, s.lora.dropout, rng);
    train_lora_fixed(base, unified_skip, adapters, data.train, data.val, s.train);
    unified_merged = merge(base, adapters);
  }
  std::optional<ModelWeights<float>> first_merged;
  if (first_lora) {
    LoraSet<float> copy = first_lora->clone();
    first_merged = merge(base, copy);
  }

  struct Entry {
    std::string method, variant;
    const ModelWeights<float>* w;
    SkipPolicy<float> policy;
  };
  std::vector<Entry> entries{{"Base", "-", &base, NoSkip{}}, {"Unified", "R", &base, FixedSkip{unified_skip}}};
  if (unified_merged) entries.push_back({"Unified", "R+L", &*unified_merged, FixedSkip{unified_skip}});
  entries.push_back({"FiRST", "R", &base, RoutedSkip<float>{&routers}});
  if (first_merged) entries.push_back({"FiRST", "R+L", &*first_merged, RoutedSkip<float>{&routers}});

  std::vector<CompareRow> rows;
  std::vector<TimedConfig> timed;
  const auto prompt = encode_prompt(data.test.front().prompt);
  for (const auto& e : entries) {
    rows.push_back({e.method, e.variant, evaluate_quality(*e.w, e.policy, data.test), 0, 1});
    timed.push_back({e.method + " " + e.variant, timing_run(*e.w, prompt, s.latency_tokens, e.policy)});
  }
  const auto lat = measure_tpot_interleaved(timed, s.latency_runs);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].tpot_median = lat[i].median_tpot;
    rows[i].relative_tpot = lat[i].relative_median;
  }
  return rows;
}

inline csv::Table compare_table(const std::vector<CompareRow>& rows) {
  csv::Table t{{"method", "variant", "skip_pct", "accuracy", "bleu1", "bleu2", "rouge1", "rouge_l", "token_accuracy",
                "tpot_median_s", "relative_tpot"},
               {}};
  for (const auto& r : rows) {
    const auto& q = r.quality;
    t.rows.push_back({r.method, r.variant, csv::format_real(100 * q.skip_fraction), csv::format_real(q.accuracy),
                      csv::format_real(q.bleu1), csv::format_real(q.bleu2), csv::format_real(q.rouge1),
                      csv::format_real(q.rouge_l), csv::format_real(q.token_accuracy), csv::format_real(r.tpot_median),
                      csv::format_real(r.relative_tpot)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Other report tables

inline csv::Table training_log_table(const TrainResult& r) {
  std::size_t layers = 0;
  for (const auto& row : r.log) layers = std::max(layers, row.mean_rho.size());
  csv::Table t{{"step", "ce", "reg", "pp", "total", "val_ce"}, {}};
  for (std::size_t l = 0; l < layers; ++l) t.header.push_back("rho_" + std::to_string(l));
  for (const auto& row : r.log) {
    std::vector<std::string> cells{std::to_string(row.step),       csv::format_real(row.loss.ce),
                                   csv::format_real(row.loss.reg), csv::format_real(row.loss.pp),
                                   csv::format_real(row.loss.total), csv::format_real(row.val_ce)};
    for (std::size_t l = 0; l < layers; ++l) cells.push_back(l < row.mean_rho.size() ? csv::format_real(row.mean_rho[l]) : "");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

// Pareto-front points, then the winner.
inline csv::Table oracle_table(const OracleResult& r) {
  csv::Table t{{"role", "include_mask", "layers_used", "quality"}, {}};
  for (const auto& p : r.pareto) {
    t.rows.push_back({"pareto", p.path.include.to_bitstring(), std::to_string(p.layers_used), csv::format_real(p.quality)});
  }
  t.rows.push_back({"winner", r.best.include.to_bitstring(), std::to_string(r.layers_used), csv::format_real(r.quality)});
  return t;
}

}  // namespace first
