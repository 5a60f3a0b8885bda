#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "first/bundle.hpp"
#include "first/config.hpp"
#include "first/experiment.hpp"

using namespace first;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Options shared by every subcommand; flags override the config file.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::size_t> min_len, max_len, n_train, n_val, n_test;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "experiment config (sectioned key = value)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--task", c.task, "copy | reverse | caesar | summarize");
  app->add_option("--min-len", c.min_len, "shortest payload");
  app->add_option("--max-len", c.max_len, "longest payload");
  app->add_option("--n-train", c.n_train);
  app->add_option("--n-val", c.n_val);
  app->add_option("--n-test", c.n_test);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig e = c.config_path.empty() ? ExperimentConfig{} : load_experiment_config(c.config_path);
  if (c.seed) e.seed = *c.seed;
  if (c.task) e.task.kind = parse_task_kind(*c.task);
  if (c.min_len) e.task.min_len = *c.min_len;
  if (c.max_len) e.task.max_len = *c.max_len;
  if (c.n_train) e.task.n_train = *c.n_train;
  if (c.n_val) e.task.n_val = *c.n_val;
  if (c.n_test) e.task.n_test = *c.n_test;
  e.task.seed = e.seed;
  e.train.seed = e.seed;
  e.task.validate();
  return e;
}

void emit(const csv::Table& t, const std::string& path) {
  if (path.empty() || path == "-") {
    csv::write(std::cout, t);
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  csv::write(out, t);
}

// Training knobs exposed on the command line.
struct TrainFlags {
  std::optional<double> alpha, lambda, lr_max, lr_min;
  std::optional<std::size_t> steps, epochs, batch, accumulation, eval_every, patience;

  void add(CLI::App* app) {
    app->add_option("--alpha", alpha, "non-skip penalty coefficient");
    app->add_option("--lambda", lambda, "router l2 coefficient");
    app->add_option("--lr", lr_max, "peak learning rate");
    app->add_option("--lr-min", lr_min, "final learning rate");
    app->add_option("--steps", steps, "optimizer-step cap");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--accumulation", accumulation);
    app->add_option("--eval-every", eval_every);
    app->add_option("--patience", patience);
  }
  void apply(TrainConfig& t) const {
    if (alpha) t.alpha = *alpha;
    if (lambda) t.lambda = *lambda;
    if (lr_max) t.lr_max = *lr_max;
    if (lr_min) t.lr_min = *lr_min;
    if (lr_max && !lr_min) t.lr_min = std::min(t.lr_min, *lr_max);
    if (steps) t.max_steps = *steps;
    if (epochs) t.max_epochs = *epochs;
    if (batch) t.batch_size = *batch;
    if (accumulation) t.accumulation_steps = *accumulation;
    if (eval_every) t.eval_every = *eval_every;
    if (patience) t.patience = *patience;
    t.validate();
  }
};

const ModelWeights<float>& need_model(const Bundle& b) {
  if (!b.model) throw FormatError("bundle has no MODL section");
  return *b.model;
}

const RouterBank<float>& need_routers(const Bundle& b) {
  if (!b.routers) throw FormatError("bundle has no ROUT section");
  return *b.routers;
}

LayerMask parse_layer_list(const std::string& text, std::size_t m) {
  LayerMask mask(m);
  if (text.empty()) return mask;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      throw ConfigError("bad layer index '" + item + "'");
    }
    if (pos != item.size() || v >= m) throw ConfigError("bad layer index '" + item + "'");
    mask.set(v, true);
  }
  return mask;
}

std::vector<Example> eval_split(const DatasetSplits& d, std::size_t limit) {
  std::vector<Example> out = d.test;
  if (limit > 0 && out.size() > limit) out.resize(limit);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input-adaptive layer skipping: training, inference and evaluation"};
  app.require_subcommand(1);
  Common common;

  // init
  auto* init = app.add_subcommand("init", "build a random model, optionally pretrain it on the task");
  add_common(init, common);
  std::string init_out;
  std::size_t pretrain_steps = 0;
  std::string init_log;
  TrainFlags init_train;
  std::optional<std::size_t> layers, d_model, heads, d_ff, max_seq;
  init->add_option("--out", init_out, "output bundle")->required();
  init->add_option("--pretrain-steps", pretrain_steps, "next-token training steps on the task (0 = random only)");
  init->add_option("--log", init_log, "training log CSV");
  init->add_option("--layers", layers);
  init->add_option("--d-model", d_model);
  init->add_option("--heads", heads);
  init->add_option("--d-ff", d_ff);
  init->add_option("--max-seq", max_seq);
  init_train.add(init);

  // train-router
  auto* tr = app.add_subcommand("train-router", "phase 1: train routers on a frozen model");
  add_common(tr, common);
  std::string tr_in, tr_out, tr_log;
  TrainFlags tr_train;
  tr->add_option("--in", tr_in, "input bundle")->required();
  tr->add_option("--out", tr_out, "output bundle")->required();
  tr->add_option("--log", tr_log, "training log CSV");
  double tr_warm = 0.9;
  std::size_t tr_warm_sample = 64;
  tr->add_option("--warm-start", tr_warm, "starting rho for fresh routers; 0 keeps zero routers")
      ->check(CLI::Range(0.0, 0.999));
  tr->add_option("--warm-sample", tr_warm_sample, "training examples used by the warm start")->check(CLI::PositiveNumber);
  tr_train.add(tr);

  // train-lora
  auto* tl = app.add_subcommand("train-lora", "phase 2: train LoRA adapters with routers frozen");
  add_common(tl, common);
  std::string tl_in, tl_out, tl_log;
  TrainFlags tl_train;
  std::optional<std::size_t> tl_rank;
  std::optional<double> tl_scale, tl_dropout;
  tl->add_option("--in", tl_in, "bundle with MODL and ROUT")->required();
  tl->add_option("--out", tl_out, "output bundle")->required();
  tl->add_option("--log", tl_log, "training log CSV");
  tl->add_option("--rank", tl_rank, "adapter rank");
  tl->add_option("--lora-alpha", tl_scale, "adapter scaling numerator");
  tl->add_option("--dropout", tl_dropout, "adapter input dropout");
  tl_train.add(tl);

  // merge
  auto* mg = app.add_subcommand("merge", "fold LoRA adapters into the base weights");
  std::string mg_in, mg_out;
  mg->add_option("--in", mg_in)->required();
  mg->add_option("--out", mg_out)->required();

  // infer
  auto* inf = app.add_subcommand("infer", "generate a response for each prompt");
  std::string inf_in, inf_skip;
  std::vector<std::string> prompts;
  bool greedy = false, no_routers = false;
  std::size_t max_tokens = 32;
  std::uint64_t inf_seed = 0;
  double temperature = 0.8;
  std::size_t top_k = 10;
  inf->add_option("--in", inf_in)->required();
  inf->add_option("--prompt", prompts, "prompt text (repeatable)")->required();
  inf->add_flag("--greedy", greedy, "argmax decoding");
  inf->add_flag("--no-routers", no_routers, "ignore ROUT and run every layer");
  inf->add_option("--skip", inf_skip, "fixed skip set, comma-separated layer ids");
  inf->add_option("--max-tokens", max_tokens);
  inf->add_option("--temperature", temperature);
  inf->add_option("--top-k", top_k);
  inf->add_option("--seed", inf_seed);

  // bench
  auto* bench = app.add_subcommand("bench", "decode latency (TPOT) for several skip sets");
  std::string bench_in, bench_out, bench_prompt = "abcdef";
  std::vector<std::string> bench_skips;
  std::size_t bench_tokens = 128, bench_runs = 5, bench_warmup = 2;
  bool bench_routed = false;
  bench->add_option("--in", bench_in)->required();
  bench->add_option("--out", bench_out, "latency CSV (default stdout)");
  bench->add_option("--skip", bench_skips, "skip set to time, comma-separated ids (repeatable)");
  bench->add_flag("--routed", bench_routed, "also time the routed decision for the prompt");
  bench->add_option("--prompt", bench_prompt);
  bench->add_option("--tokens", bench_tokens, "decode steps per run");
  bench->add_option("--runs", bench_runs, "measured runs");
  bench->add_option("--warmup", bench_warmup, "discarded runs");

  // oracle
  auto* orc = app.add_subcommand("oracle", "exhaustive search for the smallest qualifying layer subsequence");
  add_common(orc, common);
  std::string orc_in, orc_out, orc_quality = "accuracy";
  double epsilon = 0.1;
  std::size_t orc_examples = 32;
  orc->add_option("--in", orc_in)->required();
  orc->add_option("--out", orc_out, "oracle CSV (default stdout)");
  orc->add_option("--epsilon", epsilon, "tolerated relative quality loss")->check(CLI::Range(0.0, 1.0));
  orc->add_option("--quality", orc_quality, "accuracy | inverse-perplexity | fidelity")
      ->check(CLI::IsMember({"accuracy", "inverse-perplexity", "fidelity"}));
  orc->add_option("--examples", orc_examples, "evaluation prompts (0 = whole test split)");

  // stats
  auto* st = app.add_subcommand("stats", "per-layer skip fractions over the test prompts");
  add_common(st, common);
  std::vector<std::string> st_in;
  std::vector<std::string> st_labels;
  std::string st_out, st_dump;
  std::size_t st_examples = 0;
  st->add_option("--in", st_in, "bundle(s) with ROUT, one column each")->required();
  st->add_option("--label", st_labels, "column label per bundle");
  st->add_option("--out", st_out, "stats CSV (default stdout)");
  st->add_option("--dump", st_dump, "per-prompt decision CSV (first bundle)");
  st->add_option("--examples", st_examples, "prompts (0 = whole test split)");

  // compare
  auto* cmp = app.add_subcommand("compare", "FiRST against fixed-interval skipping at a matched budget");
  add_common(cmp, common);
  std::string cmp_in, cmp_out;
  CompareSettings cs;
  bool no_unified_lora = false;
  TrainFlags cmp_train;
  cmp->add_option("--in", cmp_in, "bundle with MODL, ROUT and optionally LORA")->required();
  cmp->add_option("--out", cmp_out, "comparison CSV (default stdout)");
  cmp->add_option("--budget", cs.budget, "skip fraction for the fixed-interval baseline")->check(CLI::Range(0.0, 1.0));
  cmp->add_option("--latency-tokens", cs.latency_tokens);
  cmp->add_option("--latency-runs", cs.latency_runs);
  cmp->add_flag("--no-unified-lora", no_unified_lora, "skip adapter training for the baseline");
  cmp_train.add(cmp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*init) {
      ExperimentConfig e = resolve(common);
      if (layers) e.model.n_layers = *layers;
      if (d_model) e.model.d_model = *d_model;
      if (heads) e.model.n_heads = *heads;
      if (d_ff) e.model.d_ff = *d_ff;
      if (max_seq) e.model.max_seq = *max_seq;
      e.model.validate();
      init_train.apply(e.train);
      Rng rng = Rng(e.seed).split("init");
      Bundle b;
      b.config = e.model;
      b.model = ModelWeights<float>::random(e.model, rng);
      if (pretrain_steps > 0) {
        const auto data = generate_dataset(e.task);
        e.train.max_steps = pretrain_steps;
        e.train.max_epochs = std::max<std::size_t>(e.train.max_epochs, 1000);
        const auto r = train_base(*b.model, data.train, data.val, e.train);
        if (!init_log.empty()) emit(training_log_table(r), init_log);
        const auto q = evaluate_quality(*b.model, SkipPolicy<float>{NoSkip{}}, data.test);
        std::cerr << "pretrained " << r.optimizer_steps << " steps, test accuracy " << q.accuracy << "\n";
      }
      save_bundle(init_out, b);
    } else if (*tr) {
      ExperimentConfig e = resolve(common);
      tr_train.apply(e.train);
      Bundle b = load_bundle(tr_in);
      const auto& model = need_model(b);
      const auto data = generate_dataset(e.task);
      RouterBank<float> routers;
      if (b.routers) {
        routers = *b.routers;
      } else {
        routers = RouterBank<float>::zeros(b.config);
        if (tr_warm > 0) {
          if (tr_warm <= kPassThreshold) throw ConfigError("--warm-start must be 0 or above 0.5");
          const std::size_t n = std::min(tr_warm_sample, data.train.size());
          warm_start_routers(model, routers, std::span<const Example>(data.train.data(), n), tr_warm);
        }
      }
      const auto r = train_routers(model, routers, data.train, data.val, e.train);
      if (!tr_log.empty()) emit(training_log_table(r), tr_log);
      b.routers = std::move(routers);
      save_bundle(tr_out, b);
    } else if (*tl) {
      ExperimentConfig e = resolve(common);
      tl_train.apply(e.train);
      if (tl_rank) e.lora.rank = *tl_rank;
      if (tl_scale) e.lora.lora_alpha = *tl_scale;
      if (tl_dropout) e.lora.dropout = *tl_dropout;
      Bundle b = load_bundle(tl_in);
      const auto& model = need_model(b);
      const auto& routers = need_routers(b);
      Rng rng = Rng(e.seed).split("lora");
      LoraSet<float> adapters = b.lora ? b.lora->clone()
                                       : LoraSet<float>::create(b.config, e.lora.rank, e.lora.lora_alpha, e.lora.dropout, rng);
      const auto data = generate_dataset(e.task);
      const auto r = train_lora(model, routers, adapters, data.train, data.val, e.train);
      if (!tl_log.empty()) emit(training_log_table(r), tl_log);
      b.lora = std::move(adapters);
      save_bundle(tl_out, b);
    } else if (*mg) {
      Bundle b = load_bundle(mg_in);
      if (!b.lora) throw FormatError("bundle has no LORA section to merge");
      b.model = merge(need_model(b), *b.lora);
      b.lora.reset();
      save_bundle(mg_out, b);
    } else if (*inf) {
      const Bundle b = load_bundle(inf_in);
      const auto& model = need_model(b);
      SamplerConfig sampler{greedy, temperature, top_k};
      SkipPolicy<float> policy = NoSkip{};
      if (!inf_skip.empty()) {
        policy = FixedSkip{parse_layer_list(inf_skip, b.config.n_layers)};
      } else if (b.routers && !no_routers) {
        policy = RoutedSkip<float>{&*b.routers};
      }
      std::optional<LoraSet<float>> lora = b.lora;
      ForwardOptions<float> opts;
      if (lora) opts.lora = &*lora;
      Rng rng = Rng(inf_seed).split("infer");
      for (const auto& p : prompts) {
        const auto res = generate(model, encode_prompt(p), max_tokens, sampler, policy, rng, tokens::kEos, opts);
        std::cout << p << "\t" << decode_response(res.ids);
        if (res.decision) std::cout << "\tskip=" << res.decision->skip_set().to_bitstring();
        std::cout << "\n";
      }
    } else if (*bench) {
      const Bundle b = load_bundle(bench_in);
      const auto& model = need_model(b);
      const auto prompt = encode_prompt(bench_prompt);
      std::vector<TimedConfig> configs{{"no-skip", timing_run(model, prompt, bench_tokens, SkipPolicy<float>{NoSkip{}})}};
      std::vector<double> skip_pct{0.0};
      for (const auto& s : bench_skips) {
        const LayerMask mask = parse_layer_list(s, b.config.n_layers);
        configs.push_back({"skip " + mask.to_bitstring(), timing_run(model, prompt, bench_tokens, SkipPolicy<float>{FixedSkip{mask}})});
        skip_pct.push_back(100.0 * static_cast<double>(mask.count()) / static_cast<double>(b.config.n_layers));
      }
      if (bench_routed) {
        const auto& routers = need_routers(b);
        const auto decision = prefill_with_routers(model, routers, TokenBatch::single(prompt)).decision;
        configs.push_back({"routed", timing_run(model, prompt, bench_tokens, SkipPolicy<float>{RoutedSkip<float>{&routers}})});
        skip_pct.push_back(100.0 * static_cast<double>(decision.skipped_count()) / static_cast<double>(b.config.n_layers));
      }
      const auto reports = measure_tpot_interleaved(configs, bench_runs, bench_warmup);
      std::vector<std::pair<double, LatencyReport>> rows;
      for (std::size_t i = 0; i < reports.size(); ++i) rows.emplace_back(skip_pct[i], reports[i]);
      emit(latency_table(rows), bench_out);
    } else if (*orc) {
      const ExperimentConfig e = resolve(common);
      const Bundle b = load_bundle(orc_in);
      const auto& model = need_model(b);
      const auto eval = eval_split(generate_dataset(e.task), orc_examples);
      QualityFn q = orc_quality == "accuracy"             ? sequence_accuracy_quality(model, eval)
                    : orc_quality == "inverse-perplexity" ? inverse_perplexity_quality(model, eval)
                                                          : fidelity_quality(model, eval);
      const auto r = brute_force_oracle(b.config.n_layers, q, epsilon);
      emit(oracle_table(r), orc_out);
    } else if (*st) {
      const ExperimentConfig e = resolve(common);
      const auto eval = eval_split(generate_dataset(e.task), st_examples);
      std::vector<std::vector<std::int32_t>> ps;
      for (const auto& ex : eval) ps.push_back(encode_prompt(ex.prompt));
      std::vector<std::pair<std::string, SkipStats>> columns;
      for (std::size_t i = 0; i < st_in.size(); ++i) {
        const Bundle b = load_bundle(st_in[i]);
        const auto run = collect_skip_stats(need_model(b), need_routers(b), ps);
        if (i == 0 && !st_dump.empty()) emit(decision_dump_table(run.decisions), st_dump);
        columns.emplace_back(i < st_labels.size() ? st_labels[i] : "fraction_" + std::to_string(i), run.stats);
      }
      emit(skip_stats_table(columns), st_out);
    } else if (*cmp) {
      const ExperimentConfig e = resolve(common);
      cs.train = e.train;
      cmp_train.apply(cs.train);
      cs.lora = e.lora;
      cs.seed = e.seed;
      cs.train_unified_lora = !no_unified_lora;
      const Bundle b = load_bundle(cmp_in);
      const auto rows = run_comparison(need_model(b), need_routers(b), b.lora, generate_dataset(e.task), cs);
      emit(compare_table(rows), cmp_out);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
