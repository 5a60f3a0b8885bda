#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "first/dataset.hpp"
#include "first/errors.hpp"
#include "first/lora.hpp"
#include "first/model.hpp"
#include "first/ops.hpp"
#include "first/rng.hpp"
#include "first/router.hpp"
#include "first/tokenizer.hpp"

namespace first {

enum class ScheduleKind { kCosine, kConstant };

struct TrainConfig {
  double lambda = 0.01;  // router l2 coefficient
  double alpha = 0.0;  // non-skip penalty coefficient
  double lr_max = 3e-4;
  double lr_min = 1e-4;
  ScheduleKind schedule = ScheduleKind::kCosine;
  std::size_t accumulation_steps = 5;
  std::size_t patience = 4;  // evaluations without improvement before stopping
  std::size_t eval_every = 50;  // optimizer steps
  std::size_t max_epochs = 10;
  std::size_t max_steps = 0;  // optimizer-step cap; 0 = epochs only
  std::size_t batch_size = 8;
  std::size_t max_seq_len = 128;
  std::size_t max_val_examples = 0;  // 0 = whole validation split
  std::uint64_t seed = 0;
  double phase2_alpha_divisor = 3.0;

  void validate() const {
    if (lambda < 0 || alpha < 0) throw ConfigError("train config: lambda and alpha must be >= 0");
    if (patience < 1) throw ConfigError("train config: patience must be >= 1");
    if (accumulation_steps < 1 || batch_size < 1 || eval_every < 1) {
      throw ConfigError("train config: accumulation, batch size and eval interval must be >= 1");
    }
    if (lr_min < 0 || lr_max < lr_min) throw ConfigError("train config: need 0 <= lr_min <= lr_max");
    if (phase2_alpha_divisor <= 0) throw ConfigError("train config: phase-2 divisor must be positive");
  }
};

struct LossBreakdown {
  double ce = 0, reg = 0, pp = 0, total = 0;
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  LossBreakdown parts;
};

// total = ce + lambda * sum_i ||R_i||^2 + alpha_eff * sum_i rho_i, where rho_i
// is the batch mean of layer i's per-sequence probability.
template <typename T>
LossTerms<T> loss_total(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore, const RouterBank<T>& routers,
                        const std::vector<Tensor<T>>& rhos, double lambda, double alpha_effective) {
  LossTerms<T> out;
  Tensor<T> ce = cross_entropy(logits, targets, ignore);
  Tensor<T> total = ce;
  out.parts.ce = static_cast<double>(ce.item());
  if (routers.size() > 0) {
    Tensor<T> reg = sum_squares(routers[0].weight);
    for (std::size_t i = 1; i < routers.size(); ++i) reg = add(reg, sum_squares(routers[i].weight));
    out.parts.reg = static_cast<double>(reg.item());
    total = add(total, scale(reg, static_cast<T>(lambda)));
  }
  if (!rhos.empty()) {
    Tensor<T> pp = mean_axis(rhos[0], 0);
    for (std::size_t i = 1; i < rhos.size(); ++i) pp = add(pp, mean_axis(rhos[i], 0));
    out.parts.pp = static_cast<double>(pp.item());
    total = add(total, scale(pp, static_cast<T>(alpha_effective)));
  }
  out.parts.total = static_cast<double>(total.item());
  out.total = total;
  return out;
}

// Adam with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto x = p.mutable_data();
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * gj;
        v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * gj * gj;
        x[j] -= static_cast<T>(lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Cosine decay from lr_max to lr_min across total_steps.
inline double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
  if (c.schedule == ScheduleKind::kConstant || total_steps <= 1) return c.lr_max;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return c.lr_min + 0.5 * (c.lr_max - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Teacher-forced batch: inputs[j] predicts targets[j]. CE covers response
// targets only; routers average over the prompt prefix [BOS] prompt [SEP].
struct TrainBatch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> ignore;
  std::vector<std::uint8_t> router_mask;
};

inline TrainBatch make_train_batch(std::span<const Example> examples, std::size_t max_seq_len) {
  if (examples.empty()) throw DegenerateInputError("make_train_batch: no examples");
  std::vector<std::vector<std::int32_t>> seqs;
  std::vector<std::size_t> sep_pos;
  std::size_t longest = 0;
  for (const auto& ex : examples) {
    auto ids = encode_pair(ex.prompt, ex.response);
    const std::size_t sep = ex.prompt.size() + 1;
    if (ids.size() > max_seq_len + 1) ids.resize(max_seq_len + 1);
    if (ids.size() < sep + 2) throw ConfigError("make_train_batch: max_seq_len leaves no response tokens");
    longest = std::max(longest, ids.size() - 1);
    seqs.push_back(std::move(ids));
    sep_pos.push_back(sep);
  }
  TrainBatch b;
  const std::size_t B = seqs.size(), n = longest;
  b.inputs = TokenBatch{B, n, std::vector<std::int32_t>(B * n, tokens::kPad)};
  b.targets.assign(B * n, tokens::kPad);
  b.ignore.assign(B * n, 1);
  b.router_mask.assign(B * n, 0);
  for (std::size_t s = 0; s < B; ++s) {
    const auto& ids = seqs[s];
    for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
      b.inputs.ids[s * n + j] = ids[j];
      b.targets[s * n + j] = ids[j + 1];
      b.ignore[s * n + j] = j < sep_pos[s] ? 1 : 0;
      b.router_mask[s * n + j] = j <= sep_pos[s] ? 1 : 0;
    }
  }
  return b;
}

struct MetricsRow {
  std::size_t step = 0;
  LossBreakdown loss;  // mean over micro-batches since the previous row
  double val_ce = 0;
  std::vector<double> mean_rho;  // per layer; empty when no routers
};

struct TrainResult {
  std::vector<MetricsRow> log;
  std::vector<std::vector<double>> epoch_mean_rho;  // [epoch][layer]
  std::size_t optimizer_steps = 0;
  std::size_t evaluations = 0;
  bool stopped_early = false;
  double best_val_ce = std::numeric_limits<double>::infinity();
};

namespace detail {

template <typename T>
struct StepOutput {
  LossTerms<T> loss;
  std::vector<double> rho;  // per-layer batch means; empty without routers
};

// Shared loop: shuffled epochs, gradient accumulation, scheduled Adam,
// periodic validation with patience.
template <typename T>
TrainResult run_training(const TrainConfig& config, const std::vector<Example>& train, std::vector<Tensor<T>> params,
                         const std::function<StepOutput<T>(const TrainBatch&, Rng&)>& step_fn,
                         const std::function<double()>& validate_fn) {
  config.validate();
  if (train.empty()) throw DegenerateInputError("training: empty dataset");
  Adam<T> opt(params);
  Rng rng = Rng(config.seed).split("train");
  Rng dropout_rng = rng.split("dropout");
  const std::size_t batches_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  std::size_t total_steps = std::max<std::size_t>(1, config.max_epochs * batches_per_epoch / config.accumulation_steps);
  if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t micro = 0, since_best = 0;
  LossBreakdown window{};
  std::vector<double> window_rho;
  std::size_t window_count = 0;
  bool done = false;

  auto evaluate = [&]() {
    const double val = validate_fn();
    ++result.evaluations;
    MetricsRow row;
    row.step = result.optimizer_steps;
    const double k = static_cast<double>(std::max<std::size_t>(1, window_count));
    row.loss = {window.ce / k, window.reg / k, window.pp / k, window.total / k};
    row.val_ce = val;
    for (double r : window_rho) row.mean_rho.push_back(r / k);
    result.log.push_back(std::move(row));
    window = {};
    window_rho.assign(window_rho.size(), 0.0);
    window_count = 0;
    if (val < result.best_val_ce) {
      result.best_val_ce = val;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.stopped_early = true;
      done = true;
    }
  };

  for (std::size_t epoch = 0; epoch < config.max_epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<double> epoch_rho;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < train.size() && !done; start += config.batch_size) {
      std::vector<Example> chunk;
      for (std::size_t i = start; i < std::min(train.size(), start + config.batch_size); ++i) chunk.push_back(train[order[i]]);
      const TrainBatch batch = make_train_batch(chunk, config.max_seq_len);
      StepOutput<T> out = step_fn(batch, dropout_rng);
      const LossBreakdown& p = out.loss.parts;
      if (!std::isfinite(p.total)) {
        std::ostringstream os;
        os << "non-finite loss at optimizer step " << result.optimizer_steps << " (ce=" << p.ce << ", reg=" << p.reg
           << ", pp=" << p.pp << ")";
        throw NumericalError(os.str());
      }
      scale(out.loss.total, static_cast<T>(1.0 / static_cast<double>(config.accumulation_steps))).backward();
      window.ce += p.ce;
      window.reg += p.reg;
      window.pp += p.pp;
      window.total += p.total;
      if (window_rho.size() != out.rho.size()) window_rho.assign(out.rho.size(), 0.0);
      if (epoch_rho.size() != out.rho.size()) epoch_rho.assign(out.rho.size(), 0.0);
      for (std::size_t l = 0; l < out.rho.size(); ++l) {
        window_rho[l] += out.rho[l];
        epoch_rho[l] += out.rho[l];
      }
      ++window_count;
      ++epoch_batches;
      if (++micro % config.accumulation_steps == 0) {
        opt.step(scheduled_lr(config, result.optimizer_steps, total_steps));
        opt.zero_grad();
        ++result.optimizer_steps;
        if (result.optimizer_steps % config.eval_every == 0) evaluate();
        if (result.optimizer_steps >= total_steps) done = true;
      }
    }
    if (!epoch_rho.empty()) {
      for (auto& r : epoch_rho) r /= static_cast<double>(std::max<std::size_t>(1, epoch_batches));
      result.epoch_mean_rho.push_back(std::move(epoch_rho));
    }
  }
  opt.zero_grad();
  if (window_count > 0 && !result.stopped_early) evaluate();
  return result;
}

template <typename T>
std::vector<double> rho_means(const std::vector<Tensor<T>>& rhos) {
  std::vector<double> out;
  for (const auto& r : rhos) {
    double s = 0;
    for (T v : r.data()) s += static_cast<double>(v);
    out.push_back(s / static_cast<double>(r.numel()));
  }
  return out;
}

inline std::vector<Example> validation_subset(const std::vector<Example>& val, const TrainConfig& c) {
  if (c.max_val_examples == 0 || val.size() <= c.max_val_examples) return val;
  return {val.begin(), val.begin() + static_cast<std::ptrdiff_t>(c.max_val_examples)};
}

// Mean response CE over a split, evaluated in chunks without a tape.
template <typename T>
double split_ce(const std::vector<Example>& data, const TrainConfig& c,
                const std::function<Tensor<T>(const TrainBatch&)>& logits_fn) {
  if (data.empty()) return std::numeric_limits<double>::infinity();
  NoGradGuard guard;
  double sum = 0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < data.size(); start += c.batch_size) {
    std::span<const Example> chunk(data.data() + start, std::min(c.batch_size, data.size() - start));
    const TrainBatch b = make_train_batch(chunk, c.max_seq_len);
    const Tensor<T> logits = logits_fn(b);
    std::size_t count = 0;
    for (auto ig : b.ignore) count += ig ? 0 : 1;
    sum += static_cast<double>(cross_entropy(logits, std::span<const std::int32_t>(b.targets),
                                             std::span<const std::uint8_t>(b.ignore))
                                   .item()) *
           static_cast<double>(count);
    tokens += count;
  }
  return sum / static_cast<double>(tokens);
}

}  // namespace detail

// Starts every layer out passing. Each router is fit by logistic ascent from
// zero toward "pass" on the full-compute inputs of its layer, stopping once
// the batch rho over `sample` reaches `target_rho`. Returns the reached rho
// per layer.
template <typename T>
std::vector<double> warm_start_routers(const ModelWeights<T>& w, RouterBank<T>& routers, std::span<const Example> sample,
                                       double target_rho, std::size_t max_iters = 20000) {
  if (sample.empty()) throw DegenerateInputError("warm start: empty sample");
  if (!(target_rho > kPassThreshold && target_rho < 1.0)) throw ConfigError("warm start: target rho must be in (0.5, 1)");
  routers.validate(w.config);
  NoGradGuard guard;
  const TrainBatch b = make_train_batch(sample, w.config.max_seq);
  const std::size_t D = w.config.d_model, B = b.inputs.batch, n = b.inputs.length;
  std::vector<double> reached;
  Tensor<T> h = embed(w, b.inputs);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const auto hd = h.data();
    std::vector<std::vector<std::size_t>> rows(B);
    double sq = 0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < B; ++s)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t t = s * n + j;
        if (!b.router_mask[t]) continue;
        rows[s].push_back(t);
        for (std::size_t k = 0; k < D; ++k) sq += static_cast<double>(hd[t * D + k]) * static_cast<double>(hd[t * D + k]);
        ++count;
      }
    const double step = 0.5 * static_cast<double>(count) / std::max(sq, 1e-12);
    std::vector<double> wv(D, 0.0), grad(D);
    double rho = 0;
    for (std::size_t it = 0;; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      rho = 0;
      for (const auto& seq : rows) {
        double seq_rho = 0;
        for (std::size_t t : seq) {
          double z = 0;
          for (std::size_t k = 0; k < D; ++k) z += wv[k] * static_cast<double>(hd[t * D + k]);
          const double p = 1.0 / (1.0 + std::exp(-z));
          seq_rho += p;
          for (std::size_t k = 0; k < D; ++k) grad[k] += (1.0 - p) * static_cast<double>(hd[t * D + k]);
        }
        rho += seq_rho / static_cast<double>(seq.size());
      }
      rho /= static_cast<double>(B);
      if (rho >= target_rho || it == max_iters) break;
      for (std::size_t k = 0; k < D; ++k) wv[k] += step * grad[k] / static_cast<double>(count);
    }
    auto out = routers[l].weight.mutable_data();
    for (std::size_t k = 0; k < D; ++k) out[k] = static_cast<T>(wv[k]);
    reached.push_back(rho);
    h = layer_forward<T>(w, l, h, nullptr, 0);
  }
  return reached;
}

// Phase 1: only router weights receive updates.
template <typename T>
TrainResult train_routers(const ModelWeights<T>& model, RouterBank<T>& routers, const std::vector<Example>& train,
                          const std::vector<Example>& val, const TrainConfig& config) {
  model.set_trainable(false);
  routers.set_trainable(true);
  auto step = [&](const TrainBatch& b, Rng&) {
    auto fwd = soft_forward(model, routers, b.inputs, std::span<const std::uint8_t>(b.router_mask));
    detail::StepOutput<T> out;
    out.loss = loss_total(fwd.logits, std::span<const std::int32_t>(b.targets), std::span<const std::uint8_t>(b.ignore),
                          routers, fwd.rhos, config.lambda, config.alpha);
    out.rho = detail::rho_means(fwd.rhos);
    return out;
  };
  const auto val_set = detail::validation_subset(val, config);
  auto validate = [&]() {
    return detail::split_ce<T>(val_set, config, [&](const TrainBatch& b) {
      return soft_forward(model, routers, b.inputs, std::span<const std::uint8_t>(b.router_mask)).logits;
    });
  };
  TrainResult r = detail::run_training<T>(config, train, routers.parameters(), step, validate);
  routers.set_trainable(false);
  return r;
}

// Phase 2: routers and base weights frozen; adapters trained under the soft
// forward with the penalty coefficient alpha / divisor.
template <typename T>
TrainResult train_lora(const ModelWeights<T>& model, const RouterBank<T>& routers, LoraSet<T>& adapters,
                       const std::vector<Example>& train, const std::vector<Example>& val, const TrainConfig& config) {
  model.set_trainable(false);
  routers.set_trainable(false);
  adapters.set_trainable(true);
  const double alpha_eff = config.alpha / config.phase2_alpha_divisor;
  auto step = [&](const TrainBatch& b, Rng& dropout_rng) {
    ForwardOptions<T> opts{&adapters, true, &dropout_rng};
    auto fwd = soft_forward(model, routers, b.inputs, std::span<const std::uint8_t>(b.router_mask), opts);
    detail::StepOutput<T> out;
    out.loss = loss_total(fwd.logits, std::span<const std::int32_t>(b.targets), std::span<const std::uint8_t>(b.ignore),
                          routers, fwd.rhos, config.lambda, alpha_eff);
    out.rho = detail::rho_means(fwd.rhos);
    return out;
  };
  const auto val_set = detail::validation_subset(val, config);
  auto validate = [&]() {
    ForwardOptions<T> opts{&adapters, false, nullptr};
    return detail::split_ce<T>(val_set, config, [&](const TrainBatch& b) {
      return soft_forward(model, routers, b.inputs, std::span<const std::uint8_t>(b.router_mask), opts).logits;
    });
  };
  TrainResult r = detail::run_training<T>(config, train, adapters.parameters(), step, validate);
  adapters.set_trainable(false);
  return r;
}

// LoRA fine-tune under a fixed, input-agnostic skip set (hard skipping in
// training as in inference). Used to compensate the unified-skipping baseline.
template <typename T>
TrainResult train_lora_fixed(const ModelWeights<T>& model, const LayerMask& skip, LoraSet<T>& adapters,
                             const std::vector<Example>& train, const std::vector<Example>& val,
                             const TrainConfig& config) {
  model.set_trainable(false);
  adapters.set_trainable(true);
  auto step = [&](const TrainBatch& b, Rng& dropout_rng) {
    ForwardOptions<T> opts{&adapters, true, &dropout_rng};
    const Tensor<T> logits = forward_full(model, b.inputs, skip, opts);
    detail::StepOutput<T> out;
    out.loss = loss_total(logits, std::span<const std::int32_t>(b.targets), std::span<const std::uint8_t>(b.ignore),
                          RouterBank<T>{}, {}, 0.0, 0.0);
    return out;
  };
  const auto val_set = detail::validation_subset(val, config);
  auto validate = [&]() {
    ForwardOptions<T> opts{&adapters, false, nullptr};
    return detail::split_ce<T>(val_set, config,
                               [&](const TrainBatch& b) { return forward_full(model, b.inputs, skip, opts); });
  };
  TrainResult r = detail::run_training<T>(config, train, adapters.parameters(), step, validate);
  adapters.set_trainable(false);
  return r;
}

// Ordinary next-token training of every base weight; produces the
// "pre-trained" model the routers are later attached to.
template <typename T>
TrainResult train_base(ModelWeights<T>& model, const std::vector<Example>& train, const std::vector<Example>& val,
                       const TrainConfig& config) {
  model.set_trainable(true);
  auto step = [&](const TrainBatch& b, Rng&) {
    const Tensor<T> logits = forward_full(model, b.inputs);
    detail::StepOutput<T> out;
    out.loss = loss_total(logits, std::span<const std::int32_t>(b.targets), std::span<const std::uint8_t>(b.ignore),
                          RouterBank<T>{}, {}, 0.0, 0.0);
    return out;
  };
  const auto val_set = detail::validation_subset(val, config);
  auto validate = [&]() {
    return detail::split_ce<T>(val_set, config, [&](const TrainBatch& b) { return forward_full(model, b.inputs); });
  };
  TrainResult r = detail::run_training<T>(config, train, model.parameters(), step, validate);
  model.set_trainable(false);
  return r;
}

}  // namespace first
