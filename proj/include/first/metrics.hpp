#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "first/csv.hpp"
#include "first/errors.hpp"
#include "first/generate.hpp"
#include "first/router.hpp"
#include "first/tokenizer.hpp"

namespace first {

// Whitespace word split used for text metrics.
inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(std::move(w));
  return out;
}

namespace detail {

template <typename Tok>
std::map<std::vector<Tok>, std::size_t> ngram_counts(const std::vector<Tok>& toks, std::size_t n) {
  std::map<std::vector<Tok>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[std::vector<Tok>(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

template <typename Tok>
std::size_t clipped_matches(const std::vector<Tok>& cand, const std::vector<Tok>& ref, std::size_t n) {
  const auto rc = ngram_counts(ref, n);
  std::size_t hits = 0;
  for (const auto& [g, c] : ngram_counts(cand, n)) {
    if (auto it = rc.find(g); it != rc.end()) hits += std::min(c, it->second);
  }
  return hits;
}

template <typename Tok>
std::size_t lcs_length(const std::vector<Tok>& a, const std::vector<Tok>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// Sentence BLEU with clipped n-gram precision, geometric mean over orders
// 1..max_n and brevity penalty. Any zero precision gives 0.
template <typename Tok>
double bleu_n(const std::vector<Tok>& candidate, const std::vector<Tok>& reference, std::size_t max_n) {
  if (reference.empty()) throw DegenerateInputError("bleu: empty reference");
  if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");
  if (candidate.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (candidate.size() < n) return 0.0;
    const std::size_t hits = detail::clipped_matches(candidate, reference, n);
    if (hits == 0) return 0.0;
    log_sum += std::log(static_cast<double>(hits) / static_cast<double>(candidate.size() - n + 1));
  }
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

struct RougeScore {
  double precision = 0, recall = 0, f1 = 0;
};

namespace detail {

inline RougeScore rouge_from(std::size_t hits, std::size_t cand, std::size_t ref) {
  RougeScore s;
  if (hits == 0 || cand == 0) return s;
  s.precision = static_cast<double>(hits) / static_cast<double>(cand);
  s.recall = static_cast<double>(hits) / static_cast<double>(ref);
  s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

}  // namespace detail

template <typename Tok>
RougeScore rouge_1(const std::vector<Tok>& candidate, const std::vector<Tok>& reference) {
  if (reference.empty()) throw DegenerateInputError("rouge: empty reference");
  return detail::rouge_from(detail::clipped_matches(candidate, reference, 1), candidate.size(), reference.size());
}

template <typename Tok>
RougeScore rouge_l(const std::vector<Tok>& candidate, const std::vector<Tok>& reference) {
  if (reference.empty()) throw DegenerateInputError("rouge: empty reference");
  return detail::rouge_from(detail::lcs_length(candidate, reference), candidate.size(), reference.size());
}

// Position-wise match rate against the reference length.
template <typename Tok>
double token_accuracy(const std::vector<Tok>& candidate, const std::vector<Tok>& reference) {
  if (reference.empty()) throw DegenerateInputError("token accuracy: empty reference");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(candidate.size(), reference.size()); ++i) hits += candidate[i] == reference[i];
  return static_cast<double>(hits) / static_cast<double>(reference.size());
}

// exp(mean NLL) from summed negative log-likelihood.
inline double perplexity(double total_nll, std::size_t tokens) {
  if (tokens == 0) throw DegenerateInputError("perplexity: no tokens");
  return std::exp(total_nll / static_cast<double>(tokens));
}

// ---------------------------------------------------------------------------
// Per-layer skip statistics

struct SkipStats {
  std::vector<double> per_layer;  // fraction of sequences skipping each layer
  double average = 0;
  std::size_t sequences = 0;
};

// One skip mask per prompt, as observed at prefill.
using DecisionDump = std::vector<LayerMask>;

inline SkipStats aggregate_skip_stats(const DecisionDump& dump) {
  if (dump.empty()) throw DegenerateInputError("skip stats: no decisions");
  const std::size_t m = dump.front().size();
  std::vector<std::size_t> counts(m, 0);
  for (const auto& d : dump) {
    if (d.size() != m) throw DimensionError("skip stats: decisions disagree on layer count");
    for (std::size_t l = 0; l < m; ++l) counts[l] += d.test(l);
  }
  SkipStats s;
  s.sequences = dump.size();
  s.per_layer.resize(m);
  double sum = 0;
  for (std::size_t l = 0; l < m; ++l) {
    s.per_layer[l] = static_cast<double>(counts[l]) / static_cast<double>(dump.size());
    sum += s.per_layer[l];
  }
  s.average = sum / static_cast<double>(m);
  return s;
}

struct SkipStatsRun {
  SkipStats stats;
  DecisionDump decisions;
};

template <typename T>
SkipStatsRun collect_skip_stats(const ModelWeights<T>& w, const RouterBank<T>& routers,
                                const std::vector<std::vector<std::int32_t>>& prompts,
                                const ForwardOptions<T>& opts = {}) {
  if (prompts.empty()) throw DegenerateInputError("skip stats: empty prompt set");
  NoGradGuard guard;
  SkipStatsRun run;
  for (const auto& p : prompts) {
    run.decisions.push_back(prefill_with_routers(w, routers, TokenBatch::single(p), opts).decision.skip_set());
  }
  run.stats = aggregate_skip_stats(run.decisions);
  return run;
}

// Layer-by-column layout: one row per layer plus an "average" row, one
// fraction column per labelled run.
inline csv::Table skip_stats_table(const std::vector<std::pair<std::string, SkipStats>>& columns) {
  if (columns.empty()) throw DegenerateInputError("skip stats table: no columns");
  const std::size_t m = columns.front().second.per_layer.size();
  csv::Table t;
  t.header.push_back("layer");
  for (const auto& [label, s] : columns) {
    if (s.per_layer.size() != m) throw DimensionError("skip stats table: columns disagree on layer count");
    t.header.push_back(label);
  }
  for (std::size_t l = 0; l < m; ++l) {
    std::vector<std::string> row{std::to_string(l)};
    for (const auto& c : columns) row.push_back(csv::format_real(c.second.per_layer[l]));
    t.rows.push_back(std::move(row));
  }
  std::vector<std::string> avg{"average"};
  for (const auto& c : columns) avg.push_back(csv::format_real(c.second.average));
  t.rows.push_back(std::move(avg));
  return t;
}

inline csv::Table decision_dump_table(const DecisionDump& dump) {
  csv::Table t{{"prompt", "skip_mask"}, {}};
  for (std::size_t i = 0; i < dump.size(); ++i) t.rows.push_back({std::to_string(i), dump[i].to_bitstring()});
  return t;
}

inline DecisionDump parse_decision_dump(const csv::Table& t) {
  const std::size_t col = t.column("skip_mask");
  DecisionDump dump;
  for (const auto& r : t.rows) dump.push_back(LayerMask::from_bitstring(r[col]));
  return dump;
}

// ---------------------------------------------------------------------------
// Decode latency

struct LatencyReport {
  std::string label;
  double mean_tpot = 0;    // seconds per output token, mean over measured runs
  double median_tpot = 0;  // median of per-run TPOT
  std::size_t decode_tokens = 0;
  std::size_t runs = 0;
  std::string baseline;
  double relative_mean = 1;
  double relative_median = 1;

  void relative_to(const LatencyReport& base) {
    baseline = base.label;
    relative_mean = mean_tpot / base.mean_tpot;
    relative_median = median_tpot / base.median_tpot;
  }
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DegenerateInputError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs `warmup + runs` generations and summarises per-run TPOT over the
// measured ones. Only decode steps are timed.
inline LatencyReport measure_tpot(const std::string& label, const std::function<GenerationResult()>& run_once,
                                  std::size_t runs, std::size_t warmup = 2) {
  if (runs < 1) throw ConfigError("measure_tpot: need at least one measured run");
  for (std::size_t i = 0; i < warmup; ++i) run_once();
  LatencyReport r;
  r.label = label;
  r.runs = runs;
  std::vector<double> per_run;
  for (std::size_t i = 0; i < runs; ++i) {
    const GenerationResult g = run_once();
    if (g.step_seconds.empty()) throw DegenerateInputError("measure_tpot: run produced no decode steps");
    const double total = std::accumulate(g.step_seconds.begin(), g.step_seconds.end(), 0.0);
    per_run.push_back(total / static_cast<double>(g.step_seconds.size()));
    r.decode_tokens += g.step_seconds.size();
  }
  r.mean_tpot = std::accumulate(per_run.begin(), per_run.end(), 0.0) / static_cast<double>(per_run.size());
  r.median_tpot = median_of(per_run);
  r.baseline = label;
  return r;
}

inline csv::Table latency_table(const std::vector<std::pair<double, LatencyReport>>& rows) {
  csv::Table t{{"model", "skip_pct", "tpot_mean_s", "tpot_median_s", "relative_tpot", "baseline"}, {}};
  for (const auto& [skip_pct, r] : rows) {
    t.rows.push_back({r.label, csv::format_real(skip_pct), csv::format_real(r.mean_tpot), csv::format_real(r.median_tpot),
                      csv::format_real(r.relative_median), r.baseline});
  }
  return t;
}

}  // namespace first
