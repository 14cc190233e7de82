#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "spikegpt/ops.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

// Arctangent-shaped surrogate derivative used in place of the Heaviside step's
// true (zero a.e.) derivative: alpha / (2 * (1 + (pi/2 * alpha * x)^2)).
template <class T>
T arctan_surrogate(T x, T alpha) {
  T z = std::numbers::pi_v<T> / T(2) * alpha * x;
  return alpha / (T(2) * (T(1) + z * z));
}

// Heaviside with theta(0) = 1: a membrane exactly at threshold fires.
template <class T>
T heaviside(T x) {
  return x >= T(0) ? T(1) : T(0);
}

// Binarization node: Heaviside forward, arctangent surrogate backward.
template <class T>
Tensor<T> heaviside_spike(Tensor<T> x, T alpha) {
  return custom_unary<T>(
      x, [](T v) { return heaviside(v); },
      [alpha](T v) { return arctan_surrogate(v, alpha); });
}

struct LifConfig {
  double beta = 0.5;
  double threshold = 1.0;
  double reset = 0.0;
  double alpha = 2.0;  // surrogate width
};

// Membrane state after reset (H). Zero means fully reset.
template <class T>
struct LifState {
  Tensor<T> h;  // {1, width}

  static LifState zeros(int64_t width) { return {Tensor<T>::zeros({1, width})}; }
  void detach() { h = h.detach(); }
};

// One LIF update on a {1, width} drive row:
//   U = H_prev + beta * (y - (H_prev - reset))
//   S = theta(U - threshold)      (surrogate gradient on the backward pass)
//   H = U * (1 - S)               (reset-to-zero after a spike)
// Returns spikes, the new state, and the membrane potential U (for rasters).
template <class T>
struct LifStepOut {
  Tensor<T> spikes;
  LifState<T> state;
  Tensor<T> membrane;
};

template <class T>
LifStepOut<T> lif_step(Tensor<T> y, LifState<T> state, const LifConfig& cfg) {
  if (y.shape() != state.h.shape())
    throw ShapeError("lif_step: drive " + shape_str(y.shape()) + " does not match state " +
                     shape_str(state.h.shape()));
  T beta = static_cast<T>(cfg.beta);
  Tensor<T> u = add(scale(state.h, T(1) - beta), scale(y, beta));
  if (cfg.reset != 0.0) u = add_scalar(u, beta * static_cast<T>(cfg.reset));
  Tensor<T> s = heaviside_spike(add_scalar(u, -static_cast<T>(cfg.threshold)),
                                static_cast<T>(cfg.alpha));
  Tensor<T> h = mul(u, add_scalar(neg(s), T(1)));
  return {s, {h}, u};
}

// Row lookup followed by binarization; gradients reach the table through the
// surrogate, and only for looked-up rows.
template <class T>
Tensor<T> binary_embed(const std::vector<int32_t>& tokens, Tensor<T> table, T alpha) {
  return heaviside_spike(embedding_rows(table, tokens), alpha);
}

}  // namespace spikegpt
