#pragma once

#include "first/errors.hpp"
#include "first/gemm.hpp"
#include "first/lora.hpp"
#include "first/model.hpp"

namespace first {

// Folds every adapter into a copy of the base weights:
//   W[in, out] += scaling * (B A)^T.
// The set is marked consumed so the same deltas cannot be folded twice.
template <typename T>
ModelWeights<T> merge(const ModelWeights<T>& weights, LoraSet<T>& adapters) {
  if (adapters.consumed()) throw ConfigError("lora merge: adapter set was already merged");
  if (adapters.n_layers() != weights.config.n_layers) {
    throw DimensionError("lora merge: adapters cover " + std::to_string(adapters.n_layers()) + " layers, model has " +
                         std::to_string(weights.config.n_layers));
  }
  ModelWeights<T> out = weights.clone();
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    for (std::size_t t = 0; t < kLoraTargetCount; ++t) {
      const auto target = static_cast<LoraTarget>(t);
      const LoraAdapter<T>* ad = adapters.get(l, target);
      if (!ad) continue;
      Tensor<T>& w = out.layers[l].projection(target);
      const std::size_t in = w.dim(0), outd = w.dim(1), r = ad->rank;
      if (ad->a.dim(1) != in || ad->b.dim(0) != outd || ad->a.dim(0) != r || ad->b.dim(1) != r) {
        throw DimensionError("lora merge: adapter shapes A" + to_string(ad->a.shape()) + " B" +
                             to_string(ad->b.shape()) + " vs weight " + to_string(w.shape()));
      }
      // delta^T[in, out] = A^T[in, r] * B^T[r, out]
      std::vector<T> delta(in * outd);
      kernels::gemm<T>(true, true, in, outd, r, ad->a.data().data(), ad->b.data().data(), delta.data(), false);
      const T s = static_cast<T>(ad->scaling());
      auto dst = w.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * delta[i];
    }
  }
  adapters.mark_consumed();
  return out;
}

}  // namespace first
