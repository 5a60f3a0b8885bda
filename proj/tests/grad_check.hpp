#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "first/ops.hpp"
#include "first/rng.hpp"
#include "first/tensor.hpp"

namespace first::testing {

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor<double>(std::move(shape), std::move(v));
}

// Worst relative error, over all inputs, between the reverse-mode gradient
// of f and central differences. Per input: ||g - g_fd|| / max(||g||, ||g_fd||).
inline double gradient_error(const Fn& f, std::vector<Tensor<double>> inputs, double step = 1e-4) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  const Tensor<double> y = f(inputs);
  y.backward();
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& x = inputs[k];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<double> numeric(x.numel());
    {
      NoGradGuard guard;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data()[i];
        x.mutable_data()[i] = orig + step;
        const double up = f(inputs).item();
        x.mutable_data()[i] = orig - step;
        const double down = f(inputs).item();
        x.mutable_data()[i] = orig;
        numeric[i] = (up - down) / (2 * step);
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-12);
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  for (auto& t : inputs) t.set_requires_grad(false);
  return worst;
}

// Reduces a tensor-valued op to a scalar with a fixed random projection so
// that every output entry contributes a distinct weight.
inline Fn projected(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op, std::uint64_t seed = 7) {
  return [op = std::move(op), seed](const std::vector<Tensor<double>>& in) {
    const Tensor<double> out = op(in);
    Rng rng(seed);
    const Tensor<double> w = random_tensor(out.shape(), rng, -1.0, 1.0);
    return sum_all(mul(out, w));
  };
}

}  // namespace first::testing
