// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Usage: acceptance [output-dir [criterion ids...]]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "first/first.hpp"
#include "grad_check.hpp"

namespace {

using namespace first;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using In = std::vector<Tensor<double>>;

fs::path g_out = "acceptance_out";
std::vector<fs::path> g_csvs;  // every CSV written, re-read by the last criterion
int g_failures = 0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& line) {
  std::printf("    %s\n", line.c_str());
  std::fflush(stdout);
}

void verdict(int id, const char* name, bool pass, double secs, double limit, const std::string& msg) {
  const bool in_time = limit <= 0 || secs < limit;
  const bool ok = pass && in_time;
  if (!ok) ++g_failures;
  std::printf("%s criterion %d: %s (%.1f s%s) %s\n", ok ? "PASS" : "FAIL", id, name, secs,
              in_time ? "" : ", over time limit", msg.c_str());
  std::fflush(stdout);
}

void write_csv(const csv::Table& t, const std::string& name) {
  const fs::path p = g_out / name;
  std::ofstream os(p, std::ios::binary);
  csv::write(os, t);
  g_csvs.push_back(p);
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// 1. gradients

bool gradient_suite(std::string& msg) {
  using testing::gradient_error;
  using testing::projected;
  Rng rng(1234);
  auto r = [&](Shape s) { return testing::random_tensor(std::move(s), rng); };
  struct Case {
    const char* name;
    testing::Fn f;
    In inputs;
  };
  const std::vector<std::int32_t> targets{0, 3, 2, 1, 4, 4}, ids{1, 3, 1, 0, 3, 3};
  const std::vector<std::uint8_t> ignore{0, 1, 0, 0, 1, 0}, mask{1, 0, 1, 1, 0, 1, 1, 1};
  const RowMask causal = RowMask::causal(4, 4, 0);
  std::vector<Case> cases{
      {"add", projected([](const In& x) { return add(x[0], x[1]); }), {r({3, 4}), r({3, 4})}},
      {"sub", projected([](const In& x) { return sub(x[0], x[1]); }), {r({2, 5}), r({2, 5})}},
      {"mul", projected([](const In& x) { return mul(x[0], x[1]); }), {r({4, 3}), r({4, 3})}},
      {"mul-self", projected([](const In& x) { return mul(x[0], x[0]); }), {r({6})}},
      {"scale", projected([](const In& x) { return scale(x[0], -1.7); }), {r({3, 3})}},
      {"scale_batch", projected([](const In& x) { return scale_batch(x[0], x[1]); }), {r({3, 2, 4}), r({3})}},
      {"sigmoid", projected([](const In& x) { return sigmoid(x[0]); }), {r({10})}},
      {"silu", projected([](const In& x) { return silu(x[0]); }), {r({10})}},
      {"matmul", projected([](const In& x) { return matmul(x[0], x[1]); }), {r({3, 4}), r({4, 5})}},
      {"matmul-broadcast", projected([](const In& x) { return matmul(x[0], x[1]); }), {r({2, 3, 4}), r({4, 2})}},
      {"matmul-batched", projected([](const In& x) { return matmul(x[0], x[1]); }), {r({2, 3, 4}), r({2, 4, 3})}},
      {"matmul_nt", projected([](const In& x) { return matmul_nt(x[0], x[1]); }), {r({2, 3, 4}), r({2, 5, 4})}},
      {"softmax_rows", projected([](const In& x) { return softmax_rows(x[0]); }), {r({2, 3, 5})}},
      {"softmax_rows-causal", projected([&](const In& x) { return softmax_rows(x[0], causal); }), {r({2, 4, 4})}},
      {"mean_axis-0", projected([](const In& x) { return mean_axis(x[0], 0); }), {r({2, 3, 4})}},
      {"mean_axis-2", projected([](const In& x) { return mean_axis(x[0], 2); }), {r({2, 3, 4})}},
      {"masked_mean_last", projected([&](const In& x) { return masked_mean_last(x[0], std::span(mask)); }),
       {r({2, 4})}},
      {"sum_all", [](const In& x) { return sum_all(x[0]); }, {r({3, 2})}},
      {"sum_squares", [](const In& x) { return sum_squares(x[0]); }, {r({3, 2})}},
      {"cross_entropy",
       [&](const In& x) { return cross_entropy(x[0], std::span(targets), std::span(ignore)); },
       {r({2, 3, 5})}},
      {"rmsnorm", projected([](const In& x) { return rmsnorm(x[0], x[1], 1e-5); }), {r({2, 3, 6}), r({6})}},
      {"embedding", projected([&](const In& x) { return embedding(x[0], std::span(ids), Shape{2, 3}); }),
       {r({5, 4})}},
      {"reshape", projected([](const In& x) { return reshape(x[0], Shape{4, 6}); }), {r({2, 3, 4})}},
      {"permute", projected([](const In& x) { return permute(x[0], {2, 0, 3, 1}); }), {r({2, 3, 4, 2})}},
      {"transpose", projected([](const In& x) { return transpose(x[0]); }), {r({2, 3, 4})}},
      {"concat", projected([](const In& x) { return concat(x[0], x[1], 1); }), {r({2, 1, 3}), r({2, 4, 3})}},
      {"slice", projected([](const In& x) { return slice(x[0], 1, 1, 2); }), {r({2, 4, 3})}},
      {"rope", projected([](const In& x) { return rope(x[0], 3); }), {r({2, 2, 4, 6})}},
      {"dropout", projected([](const In& x) {
         Rng m(99);
         return dropout(x[0], 0.3, m);
       }),
       {r({4, 5})}},
  };
  double worst_op = 0;
  std::string worst_name;
  for (auto& c : cases) {
    const double e = gradient_error(c.f, c.inputs);
    if (e > worst_op) {
      worst_op = e;
      worst_name = c.name;
    }
  }

  // Router weights through the frozen soft forward and the full loss.
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.max_seq = 32;
  Rng mrng(3);
  auto w = ModelWeights<double>::random(cfg, mrng);
  for (auto p : w.parameters())
    for (auto& v : p.mutable_data()) v *= 5.0;
  auto routers = RouterBank<double>::zeros(cfg);
  for (auto p : routers.parameters())
    for (auto& v : p.mutable_data()) v = mrng.normal(0.0, 1.0);
  const std::vector<Example> ex{{"abc", "def"}, {"hello", "khoor"}};
  const TrainBatch b = make_train_batch(ex, 64);
  auto loss = [&](const In& rw) {
    RouterBank<double> bank(std::vector<Router<double>>{{rw[0]}, {rw[1]}});
    auto fwd = soft_forward(w, bank, b.inputs, std::span<const std::uint8_t>(b.router_mask));
    return loss_total(fwd.logits, std::span<const std::int32_t>(b.targets), std::span<const std::uint8_t>(b.ignore),
                      bank, fwd.rhos, 0.01, 0.05)
        .total;
  };
  const double model_err = gradient_error(loss, {routers[0].weight.clone(), routers[1].weight.clone()});
  msg = fmt("%zu ops, worst op %s rel err %.2e (< 1e-5); router path m=2 D=4 rel err %.2e (< 1e-3)", cases.size(),
               worst_name.c_str(), worst_op, model_err);
  return worst_op < 1e-5 && model_err < 1e-3;
}

// ---------------------------------------------------------------------------
// 2. KV cache

bool kv_cache_equivalence(std::string& msg) {
  Rng rng(42);
  const ModelConfig cfg;  // m = 12 toy model
  const auto w = ModelWeights<float>::random(cfg, rng);
  NoGradGuard guard;
  double worst = 0;
  for (int pair = 0; pair < 50; ++pair) {
    LayerMask skip(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) skip.set(l, rng.uniform() < 0.3);
    std::vector<std::int32_t> ids{tokens::kBos};
    const auto len = static_cast<std::size_t>(rng.integer(2, 16));
    for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<std::int32_t>(rng.integer(0, 255)));
    KVCache<float> cache(cfg, 1);
    Tensor<float> logits = prefill(w, TokenBatch::single(ids), cache, skip);
    for (int step = 0; step < 4; ++step) {
      const Tensor<float> full = forward_full(w, TokenBatch::single(ids), skip);
      const auto a = detail::last_row(logits), f = detail::last_row(full);
      for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(double(a[k]) - double(f[k])));
      const auto next = static_cast<std::int32_t>(rng.integer(0, 255));
      ids.push_back(next);
      logits = decode_step(w, TokenBatch::single({next}), cache, skip);
    }
  }
  msg = fmt("50 random (skip set, prompt) pairs x 4 decode steps, max |dlogit| %.2e (< 1e-4)", worst);
  return worst < 1e-4;
}

// ---------------------------------------------------------------------------
// 3. protocol

bool protocol_equivalence(std::string& msg) {
  Rng rng(5);
  const ModelConfig cfg;
  const auto w = ModelWeights<float>::random(cfg, rng);
  TaskSpec spec;
  spec.kind = TaskKind::kCopy;
  spec.n_train = 64;
  spec.n_val = spec.n_test = 0;
  spec.seed = 5;
  const auto sample = generate_dataset(spec).train;

  std::vector<std::pair<std::string, RouterBank<float>>> banks;
  banks.emplace_back("zero", RouterBank<float>::zeros(cfg));
  auto warm = RouterBank<float>::zeros(cfg);
  warm_start_routers(w, warm, std::span<const Example>(sample), 0.9);
  banks.emplace_back("warm", std::move(warm));

  SamplerConfig greedy;
  greedy.greedy = true;
  std::size_t compared = 0, identical = 0, preconditions = 0;
  for (const auto& [name, bank] : banks) {
    for (std::size_t i = 0; i < 20; ++i) {
      const auto prompt = encode_prompt(detail::random_word(rng, 2, 12));
      Rng r1(1), r2(1);
      const auto routed = generate(w, prompt, 24, greedy, SkipPolicy<float>{RoutedSkip<float>{&bank}}, r1);
      // Only prompts where every layer passes are in scope.
      if (routed.decision->skipped_count() != 0) continue;
      ++preconditions;
      const auto base = generate(w, prompt, 24, greedy, SkipPolicy<float>{NoSkip{}}, r2);
      ++compared;
      identical += routed.ids == base.ids;
    }
  }

  // Soft layer at the limits versus hard pass / skip, bitwise.
  NoGradGuard guard;
  bool bitwise = true;
  const Tensor<float> hidden = embed(w, TokenBatch::single(encode_prompt("limits")));
  Tensor<float> h = hidden;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto pass = layer_forward<float>(w, l, h, nullptr, 0);
    bitwise &= soft_layer_forward(w, l, h, 1.0f).values() == pass.values();
    bitwise &= soft_layer_forward(w, l, h, 0.0f).values() == h.values();
    h = pass;
  }
  msg = fmt("%zu/%zu all-pass generations token-identical to base; soft rho in {0,1} bitwise %s", identical,
               compared, bitwise ? "equal" : "DIFFERENT");
  return compared == 40 && identical == compared && bitwise;
}

// ---------------------------------------------------------------------------
// 4. oracle

template <typename T>
ModelWeights<T> oracle_model(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 64;
  Rng rng(seed);
  auto w = ModelWeights<T>::random(c, rng);
  for (auto& l : w.layers)
    for (auto t : l.tensors())
      if (t.rank() == 2)
        for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, 0.3));
  return w;
}

bool oracle_cross_check(std::string& msg) {
  const std::vector<Example> eval{{"abc", "def"}, {"xyz", "abc"}, {"hello", "khoor"}};
  const auto w = oracle_model<float>(1);
  const TokenBatch tokens{2, 6, {256, 97, 98, 99, 259, 100, 256, 120, 121, 122, 259, 123}};
  std::size_t exact = 0;
  for (std::uint32_t bits = 0; bits < 16; ++bits) {
    LayerSubsequence p{LayerMask(4)};
    for (std::size_t i = 0; i < 4; ++i) p.include.set(i, (bits >> i) & 1u);
    exact += subsequence_forward(w, tokens, p).values() == forward_full(w, tokens, p.skip_set()).values();
  }
  const auto loose = brute_force_oracle(4, inverse_perplexity_quality(w, eval), 1.0);
  write_csv(oracle_table(loose), "oracle_eps1.csv");
  std::size_t dropped_right = 0;
  for (std::size_t zeroed = 0; zeroed < 4; ++zeroed) {
    auto wz = oracle_model<double>(4 + zeroed);
    for (auto& v : wz.layers[zeroed].wo.mutable_data()) v = 0.0;
    for (auto& v : wz.layers[zeroed].w_down.mutable_data()) v = 0.0;
    const auto r = brute_force_oracle(4, fidelity_quality(wz, eval), 0.0);
    dropped_right += r.layers_used == 3 && r.best.skip_set() == LayerMask::from_indices(4, {zeroed});
  }
  msg = fmt("%zu/16 subsequences exact; eps=1 uses %zu layers; zeroed layer dropped alone %zu/4", exact,
               loose.layers_used, dropped_right);
  return exact == 16 && loose.layers_used == 0 && dropped_right == 4;
}

// ---------------------------------------------------------------------------
// Shared pretrained models

struct Pretrained {
  ModelWeights<float> w;
  DatasetSplits data;
  double accuracy = 0;
  double seconds = 0;
};

Pretrained pretrain(const ModelConfig& cfg, TaskKind kind, std::size_t steps, std::uint64_t seed) {
  const auto t0 = Clock::now();
  TaskSpec spec;
  spec.kind = kind;
  spec.min_len = spec.max_len = 6;
  spec.n_train = 4000;
  spec.n_val = 64;
  spec.n_test = 100;
  spec.seed = seed;
  Pretrained p{ModelWeights<float>(), generate_dataset(spec), 0, 0};
  Rng rng(seed + 6);
  p.w = ModelWeights<float>::random(cfg, rng);
  TrainConfig tc;
  tc.lr_max = 3e-3;
  tc.lr_min = 3e-4;
  tc.accumulation_steps = 1;
  tc.batch_size = 16;
  tc.max_epochs = 100;
  tc.max_steps = steps;
  tc.patience = 100;
  tc.seed = seed;
  train_base(p.w, p.data.train, p.data.val, tc);
  p.accuracy = evaluate_quality(p.w, SkipPolicy<float>{NoSkip{}}, p.data.test).accuracy;
  p.seconds = seconds_since(t0);
  return p;
}

// Phase 1 and Phase 2 settings: the library defaults (lambda 0.01, cosine lr
// 3e-4 -> 1e-4, accumulation 5, patience 4 evaluations, every 50 steps).
TrainConfig phase_config(std::size_t max_steps, std::uint64_t seed) {
  TrainConfig c;
  c.batch_size = 4;
  c.max_epochs = 100;
  c.max_steps = max_steps;
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// 5. alpha monotonicity

bool alpha_monotonicity(std::string& msg) {
  const ModelConfig cfg;
  const auto base = pretrain(cfg, TaskKind::kCopy, 1200, 11);
  note(fmt("copy model m=12 D=64 pretrained in %.0f s, test accuracy %.2f", base.seconds, base.accuracy));
  const auto prompts = encode_prompts(base.data.test);
  const double a1 = 1e-2;
  std::vector<double> fractions;
  std::vector<std::pair<std::string, SkipStats>> columns;
  for (double alpha : {0.0, a1, 2 * a1}) {
    auto routers = RouterBank<float>::zeros(cfg);
    warm_start_routers(base.w, routers, std::span<const Example>(base.data.train.data(), 64), 0.9);
    TrainConfig tc = phase_config(500, 1);
    tc.alpha = alpha;
    const auto log = train_routers(base.w, routers, base.data.train, base.data.val, tc);
    write_csv(training_log_table(log), fmt("copy_phase1_alpha%g.csv", alpha));
    const auto run = collect_skip_stats(base.w, routers, prompts);
    write_csv(decision_dump_table(run.decisions), fmt("copy_decisions_alpha%g.csv", alpha));
    fractions.push_back(run.stats.average);
    columns.emplace_back(fmt("alpha=%g", alpha), run.stats);
  }
  write_csv(skip_stats_table(columns), "copy_skip_stats.csv");
  msg = fmt("mean skip at alpha {0, %g, %g}: %.3f, %.3f, %.3f", a1, 2 * a1, fractions[0], fractions[1],
               fractions[2]);
  return fractions[0] <= fractions[1] && fractions[1] <= fractions[2] && fractions[2] > fractions[0];
}

// ---------------------------------------------------------------------------
// 6. quality retention

struct SeedRun {
  std::uint64_t seed = 0;
  RouterTuning phase1;
  AdapterTuning phase2;
  double router_only = 0, compensated = 0, test_skip = 0, compensated_skip = 0;
};

SeedRun run_seed(const Pretrained& base, std::uint64_t seed) {
  SeedRun s;
  s.seed = seed;
  const auto val_prompts = encode_prompts(base.data.val);
  s.phase1 = tune_router_alpha(base.w, base.data.train, base.data.val, val_prompts, phase_config(500, seed),
                               1e-2, SkipBand{0.15, 0.25});
  TrainConfig p2 = phase_config(200, seed);
  p2.alpha = s.phase1.alpha;
  s.phase2 = tune_phase2_divisor(base.w, s.phase1.routers, base.data.train, base.data.val, val_prompts, p2,
                                 LoraConfig{}, s.phase1.skip, 0.01, {3, 6, 12, 24, 48, 96}, seed);
  write_csv(training_log_table(s.phase1.log), fmt("caesar_phase1_seed%llu.csv", (unsigned long long)seed));
  write_csv(training_log_table(s.phase2.log), fmt("caesar_phase2_seed%llu.csv", (unsigned long long)seed));

  const auto& routers = s.phase1.routers;
  const auto q1 = evaluate_quality(base.w, SkipPolicy<float>{RoutedSkip<float>{&routers}}, base.data.test);
  LoraSet<float> copy = s.phase2.adapters.clone();
  const auto merged = merge(base.w, copy);
  const auto q2 = evaluate_quality(merged, SkipPolicy<float>{RoutedSkip<float>{&routers}}, base.data.test);
  s.router_only = q1.accuracy;
  s.test_skip = q1.skip_fraction;
  s.compensated = q2.accuracy;
  s.compensated_skip = q2.skip_fraction;

  std::string tried;
  for (const auto& t : s.phase1.trials) tried += fmt(" %g->%.3f", t.alpha, t.skip);
  note(fmt("seed %llu phase 1 alpha trials (val skip):%s", (unsigned long long)seed, tried.c_str()));
  tried.clear();
  for (const auto& t : s.phase2.trials) tried += fmt(" %g->%.3f", t.divisor, t.skip);
  note(fmt("seed %llu phase 2 divisor trials (val skip):%s", (unsigned long long)seed, tried.c_str()));
  note(fmt("seed %llu test: router-only acc %.2f at skip %.3f; compensated acc %.2f at skip %.3f",
           (unsigned long long)seed, s.router_only, s.test_skip, s.compensated, s.compensated_skip));
  return s;
}

bool quality_retention(const Pretrained& base, const std::vector<SeedRun>& runs, std::string& msg) {
  std::vector<double> comp, ro;
  bool tuned = true;
  for (const auto& r : runs) {
    comp.push_back(r.compensated);
    ro.push_back(r.router_only);
    tuned &= r.phase1.in_band;
  }
  const double mc = median3(comp), mr = median3(ro);
  msg = fmt("full acc %.2f; median compensated %.2f (bar %.2f), median router-only %.2f; skip tuned into "
               "15-25%% on all seeds: %s",
               base.accuracy, mc, 0.8 * base.accuracy, mr, tuned ? "yes" : "no");
  return base.accuracy >= 0.95 && tuned && mc >= 0.8 * base.accuracy && mc >= mr;
}

// ---------------------------------------------------------------------------
// 7. latency

bool latency(const Pretrained& base, std::string& msg) {
  const auto& w = base.w;
  const auto prompt = encode_prompt(base.data.test.front().prompt);
  const std::size_t tokens = 200;
  const LayerMask none(12), two = LayerMask::from_indices(12, {5, 9}), four = LayerMask::from_indices(12, {5, 7, 9, 10});
  const std::vector<TimedConfig> configs{
      {"no-skip", timing_run(w, prompt, tokens, SkipPolicy<float>{NoSkip{}})},
      {"skip 2/12", timing_run(w, prompt, tokens, SkipPolicy<float>{FixedSkip{two}})},
      {"skip 4/12", timing_run(w, prompt, tokens, SkipPolicy<float>{FixedSkip{four}})},
  };
  const auto reports = measure_tpot_interleaved(configs, 5, 2);
  write_csv(latency_table({{0.0, reports[0]}, {100.0 * 2 / 12, reports[1]}, {100.0 * 4 / 12, reports[2]}}),
            "latency.csv");
  msg = fmt("median TPOT %.1f us; ratio 2/12 %.3f (<= 0.92), 4/12 %.3f (<= 0.80)", 1e6 * reports[0].median_tpot,
               reports[1].relative_median, reports[2].relative_median);
  return reports[1].relative_median <= 0.92 && reports[2].relative_median <= 0.80;
}

// ---------------------------------------------------------------------------
// 8. baseline comparison

bool baseline_comparison(const Pretrained& base, const std::vector<SeedRun>& runs, std::string& msg) {
  std::size_t wins = 0;
  std::string per_seed;
  for (const auto& r : runs) {
    CompareSettings s;
    s.budget = 0.15;
    s.train = phase_config(200, r.seed);
    s.seed = r.seed;
    const auto rows = run_comparison(base.w, r.phase1.routers, r.phase2.adapters, base.data, s);
    write_csv(compare_table(rows), fmt("compare_seed%llu.csv", (unsigned long long)r.seed));
    const CompareRow *first = nullptr, *unified = nullptr;
    for (const auto& row : rows) {
      if (row.variant != "R+L") continue;
      (row.method == "FiRST" ? first : unified) = &row;
    }
    const bool win = first->quality.accuracy >= unified->quality.accuracy;
    wins += win;
    per_seed += fmt(" seed %llu FiRST %.2f (skip %.0f%%, tpot x%.2f) vs unified %.2f (skip %.0f%%, tpot x%.2f);",
                    (unsigned long long)r.seed, first->quality.accuracy, 100 * first->quality.skip_fraction,
                    first->relative_tpot, unified->quality.accuracy, 100 * unified->quality.skip_fraction,
                    unified->relative_tpot);
  }
  note("R+L accuracy:" + per_seed);
  msg = fmt("FiRST R+L >= unified R+L accuracy on %zu/3 seeds (need 2)", wins);
  return wins >= 2;
}

// ---------------------------------------------------------------------------
// 9. phase isolation

// Tags whose payload bytes differ; the header must match.
std::vector<std::string> changed_sections(const Bundle& before, const Bundle& after) {
  const auto a = encode_bundle(before), b = encode_bundle(after);
  const auto sa = bundle_sections(a), sb = bundle_sections(b);
  std::vector<std::string> out;
  const std::size_t head = sa.begin()->second.offset;
  if (!std::equal(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(head), b.begin())) out.push_back("header");
  for (const auto& [tag, span] : sb) {
    const auto it = sa.find(tag);
    if (it == sa.end() || it->second.size != span.size ||
        !std::equal(a.begin() + static_cast<std::ptrdiff_t>(it->second.offset),
                    a.begin() + static_cast<std::ptrdiff_t>(it->second.offset + it->second.size),
                    b.begin() + static_cast<std::ptrdiff_t>(span.offset))) {
      out.push_back(tag);
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s.empty() ? "none" : s;
}

bool phase_isolation(std::string& msg) {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq = 64;
  TaskSpec spec;
  spec.kind = TaskKind::kCaesar;
  spec.min_len = 3;
  spec.max_len = 5;
  spec.n_train = 64;
  spec.n_val = 8;
  spec.n_test = 16;
  spec.seed = 9;
  const auto data = generate_dataset(spec);
  Rng rng(9);
  Bundle b;
  b.config = cfg;
  b.model = ModelWeights<float>::random(cfg, rng);
  b.routers = RouterBank<float>::zeros(cfg);
  TrainConfig tc;
  tc.alpha = 0.05;
  tc.lr_max = tc.lr_min = 1e-2;
  tc.accumulation_steps = 1;
  tc.max_steps = 10;

  const Bundle before1 = b;
  Bundle after1{cfg, before1.model->clone(), before1.routers->clone(), std::nullopt};
  train_routers(*after1.model, *after1.routers, data.train, data.val, tc);
  const auto diff1 = changed_sections(before1, after1);

  Rng lrng(10);
  Bundle before2 = after1;
  before2.lora = LoraSet<float>::create(cfg, 2, 8.0, 0.1, lrng);
  Bundle after2{cfg, before2.model->clone(), before2.routers->clone(), before2.lora->clone()};
  train_lora(*after2.model, *after2.routers, *after2.lora, data.train, data.val, tc);
  const auto diff2 = changed_sections(before2, after2);

  // Merged weights versus live adapters, greedy, through the routed protocol.
  const auto& routers = *after2.routers;
  LoraSet<float> consumed = after2.lora->clone();
  const auto merged = merge(*after2.model, consumed);
  const ForwardOptions<float> opts{&*after2.lora, false, nullptr};
  SamplerConfig greedy;
  greedy.greedy = true;
  std::size_t same = 0;
  for (const auto& ex : data.test) {
    Rng r1(0), r2(0);
    const auto prompt = encode_prompt(ex.prompt);
    const auto a = generate(*after2.model, prompt, 12, greedy, SkipPolicy<float>{RoutedSkip<float>{&routers}}, r1,
                            std::nullopt, opts);
    const auto m = generate(merged, prompt, 12, greedy, SkipPolicy<float>{RoutedSkip<float>{&routers}}, r2);
    same += a.ids == m.ids && a.decision->skip_set() == m.decision->skip_set();
  }
  msg = fmt("phase 1 changed {%s}; phase 2 changed {%s}; merged = adapted on %zu/%zu greedy prompts",
               join(diff1).c_str(), join(diff2).c_str(), same, data.test.size());
  return diff1 == std::vector<std::string>{"ROUT"} && diff2 == std::vector<std::string>{"LORA"} &&
         same == data.test.size();
}

// ---------------------------------------------------------------------------
// 10. report fidelity

bool report_fidelity(std::string& msg) {
  ModelConfig cfg;
  cfg.n_layers = 6;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq = 64;
  Rng rng(77);
  const auto w = ModelWeights<float>::random(cfg, rng);
  auto routers = RouterBank<float>::zeros(cfg);
  for (auto p : routers.parameters())
    for (auto& v : p.mutable_data()) v = static_cast<float>(rng.normal(0.0, 2.0));
  std::vector<std::vector<std::int32_t>> prompts;
  for (int i = 0; i < 200; ++i) prompts.push_back(encode_prompt(detail::random_word(rng, 1, 20)));
  const auto run = collect_skip_stats(w, routers, prompts);
  write_csv(decision_dump_table(run.decisions), "report_decisions.csv");
  write_csv(skip_stats_table({{"random", run.stats}}), "report_skip_stats.csv");

  // Re-aggregate from the dump on disk and re-emit the table.
  std::ifstream dump_in(g_out / "report_decisions.csv", std::ios::binary);
  const auto reread = aggregate_skip_stats(parse_decision_dump(csv::read(dump_in)));
  const bool stats_match =
      csv::to_string(skip_stats_table({{"random", reread}})) == read_text(g_out / "report_skip_stats.csv");

  std::size_t round_trips = 0;
  std::vector<std::string> bad;
  for (const auto& p : g_csvs) {
    const std::string text = read_text(p);
    const csv::Table t = csv::from_string(text);
    if (csv::to_string(t) == text && csv::from_string(csv::to_string(t)) == t) {
      ++round_trips;
    } else {
      bad.push_back(p.filename().string());
    }
  }
  msg = fmt("re-aggregated table %s; %zu/%zu CSVs round-trip%s", stats_match ? "identical" : "DIFFERS",
               round_trips, g_csvs.size(), bad.empty() ? "" : (" (bad: " + join(bad) + ")").c_str());
  return stats_match && round_trips == g_csvs.size();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_out = argv[1];
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids)
      if (only.count(id)) return true;
    return false;
  };
  fs::create_directories(g_out);
  const auto start = Clock::now();

  auto timed = [](int id, const char* name, double limit, const std::function<bool(std::string&)>& body) {
    const auto t0 = Clock::now();
    std::string detail;
    bool pass = false;
    try {
      pass = body(detail);
    } catch (const std::exception& e) {
      detail = std::string("threw: ") + e.what();
    }
    verdict(id, name, pass, seconds_since(t0), limit, detail);
  };

  if (wanted({1})) timed(1, "gradient suite", 30, gradient_suite);
  if (wanted({2})) timed(2, "KV-cache equivalence", 60, kv_cache_equivalence);
  if (wanted({3})) timed(3, "protocol equivalence", 0, protocol_equivalence);
  if (wanted({4})) timed(4, "oracle cross-check", 60, oracle_cross_check);
  if (wanted({9})) timed(9, "phase isolation", 0, phase_isolation);
  if (wanted({5})) timed(5, "alpha monotonicity", 600, alpha_monotonicity);

  // Criteria 6-8 share one pretrained caesar model.
  if (wanted({6, 7, 8})) {
    const auto t6 = Clock::now();
    std::optional<Pretrained> base;
    std::vector<SeedRun> runs;
    std::string setup_error;
    try {
      base = pretrain(ModelConfig{}, TaskKind::kCaesar, 1200, 1);
      note(fmt("caesar model m=12 D=64 pretrained in %.0f s, test accuracy %.2f", base->seconds, base->accuracy));
      for (std::uint64_t seed : {1, 2, 3}) runs.push_back(run_seed(*base, seed));
    } catch (const std::exception& e) {
      setup_error = std::string("threw: ") + e.what();
    }
    const double t6_secs = seconds_since(t6);
    if (base && runs.size() == 3) {
      std::string detail;
      const bool pass = quality_retention(*base, runs, detail);
      verdict(6, "quality retention", pass, t6_secs, 1800, detail);
      timed(7, "latency", 300, [&](std::string& d) { return latency(*base, d); });
      timed(8, "baseline comparison", 0, [&](std::string& d) { return baseline_comparison(*base, runs, d); });
    } else {
      verdict(6, "quality retention", false, t6_secs, 1800, setup_error);
      verdict(7, "latency", false, 0, 0, "no pretrained model");
      verdict(8, "baseline comparison", false, 0, 0, "no pretrained model");
    }
  }
  if (wanted({10})) timed(10, "report fidelity", 0, report_fidelity);

  std::printf("%d criteria failed; total %.0f s; reports in %s\n", g_failures, seconds_since(start),
              g_out.string().c_str());
  return g_failures == 0 ? 0 : 1;
}
