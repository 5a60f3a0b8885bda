#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "first/errors.hpp"
#include "first/model_config.hpp"
#include "first/ops.hpp"
#include "first/rng.hpp"
#include "first/tensor.hpp"

namespace first {

// Adaptable projections inside one layer, in serialization order.
enum class LoraTarget : std::uint32_t { kQuery = 0, kKey, kValue, kOutput, kGate, kUp, kDown };
inline constexpr std::size_t kLoraTargetCount = 7;

inline const char* to_string(LoraTarget t) {
  static constexpr const char* names[] = {"q", "k", "v", "o", "gate", "up", "down"};
  return names[static_cast<std::size_t>(t)];
}

// (in, out) extents of a target's base weight.
inline std::pair<std::size_t, std::size_t> target_dims(const ModelConfig& c, LoraTarget t) {
  switch (t) {
    case LoraTarget::kGate:
    case LoraTarget::kUp:
      return {c.d_model, c.d_ff};
    case LoraTarget::kDown:
      return {c.d_ff, c.d_model};
    default:
      return {c.d_model, c.d_model};
  }
}

// Low-rank delta on a base weight stored as [in, out]:
//   y = x W + scaling * (dropout(x) A^T) B^T,  A: [r, in], B: [out, r].
// The equivalent dense delta is scaling * (B A)^T.
template <typename T>
struct LoraAdapter {
  Tensor<T> a;
  Tensor<T> b;
  std::size_t rank = 0;
  double lora_alpha = 0.0;
  double dropout = 0.0;

  double scaling() const { return lora_alpha / static_cast<double>(rank); }

  static LoraAdapter create(std::size_t in, std::size_t out, std::size_t rank, double lora_alpha, double dropout,
                            Rng& rng) {
    if (rank < 1 || rank >= std::min(in, out)) {
      throw ConfigError("lora: rank " + std::to_string(rank) + " must be in [1, min(" + std::to_string(in) + ", " +
                        std::to_string(out) + "))");
    }
    std::vector<T> av(rank * in);
    for (auto& v : av) v = static_cast<T>(rng.normal(0.0, 0.02));
    LoraAdapter ad;
    ad.a = Tensor<T>(Shape{rank, in}, std::move(av));
    ad.b = Tensor<T>::zeros(Shape{out, rank});
    ad.rank = rank;
    ad.lora_alpha = lora_alpha;
    ad.dropout = dropout;
    return ad;
  }
};

template <typename T>
Tensor<T> adapted_matmul(const Tensor<T>& x, const Tensor<T>& base, const LoraAdapter<T>* adapter, bool training,
                         Rng* rng) {
  Tensor<T> y = matmul(x, base);
  if (!adapter) return y;
  if (adapter->a.dim(1) != base.dim(0) || adapter->b.dim(0) != base.dim(1)) {
    throw DimensionError("lora: adapter A" + to_string(adapter->a.shape()) + " B" + to_string(adapter->b.shape()) +
                         " does not fit weight " + to_string(base.shape()));
  }
  Tensor<T> in = x;
  if (training && adapter->dropout > 0.0) {
    if (!rng) throw ConfigError("lora: training-mode dropout needs a generator");
    in = dropout(x, adapter->dropout, *rng);
  }
  Tensor<T> low = matmul_nt(matmul_nt(in, adapter->a), adapter->b);
  return add(y, scale(low, static_cast<T>(adapter->scaling())));
}

// Adapters for every (layer, target) pair that has one.
template <typename T>
class LoraSet {
 public:
  LoraSet() = default;

  // Standard init (A ~ N(0, 0.02), B = 0) on every target of every layer.
  static LoraSet create(const ModelConfig& config, std::size_t rank, double lora_alpha, double dropout, Rng& rng) {
    LoraSet set(config.n_layers, rank, lora_alpha, dropout);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (std::size_t t = 0; t < kLoraTargetCount; ++t) {
        const auto [in, out] = target_dims(config, static_cast<LoraTarget>(t));
        set.slots_[l][t] = LoraAdapter<T>::create(in, out, rank, lora_alpha, dropout, rng);
      }
    }
    return set;
  }

  LoraSet(std::size_t n_layers, std::size_t rank, double lora_alpha, double dropout)
      : rank_(rank), lora_alpha_(lora_alpha), dropout_(dropout), slots_(n_layers) {}

  std::size_t n_layers() const { return slots_.size(); }
  std::size_t rank() const { return rank_; }
  double lora_alpha() const { return lora_alpha_; }
  double dropout() const { return dropout_; }
  bool consumed() const { return consumed_; }
  void mark_consumed() { consumed_ = true; }

  const LoraAdapter<T>* get(std::size_t layer, LoraTarget t) const {
    if (consumed_ || layer >= slots_.size()) return nullptr;
    const auto& s = slots_[layer][static_cast<std::size_t>(t)];
    return s ? &*s : nullptr;
  }
  void put(std::size_t layer, LoraTarget t, LoraAdapter<T> adapter) {
    slots_.at(layer)[static_cast<std::size_t>(t)] = std::move(adapter);
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& layer : slots_)
      for (const auto& s : layer)
        if (s) {
          out.push_back(s->a);
          out.push_back(s->b);
        }
    return out;
  }

  void set_trainable(bool flag) {
    for (auto& p : parameters()) p.set_requires_grad(flag);
  }

  LoraSet clone() const {
    LoraSet copy(*this);
    for (auto& layer : copy.slots_)
      for (auto& s : layer)
        if (s) {
          s->a = s->a.clone();
          s->b = s->b.clone();
        }
    return copy;
  }

 private:
  std::size_t rank_ = 0;
  double lora_alpha_ = 0.0;
  double dropout_ = 0.0;
  bool consumed_ = false;
  std::vector<std::array<std::optional<LoraAdapter<T>>, kLoraTargetCount>> slots_;
};

}  // namespace first
