#pragma once

#include "spikegpt/ops.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

// Gated feed-forward channel mixer, hidden width 4E. All projections bias-free.
template <class T>
struct SrffnLayer {
  Tensor<T> m_p;  // {E, E}   gate projection
  Tensor<T> m_g;  // {E, 4E}  hidden projection
  Tensor<T> m_s;  // {4E, E}  output projection
};

// sigmoid(x M_P) (.) (relu(x M_G)^2 M_S) on an already normalized and
// token-shifted input. Spiking and dropout are applied by the caller.
template <class T>
Tensor<T> srffn_core(Tensor<T> x, const SrffnLayer<T>& layer) {
  Tensor<T> gate = sigmoid(matmul(x, layer.m_p));
  Tensor<T> hidden = square(relu(matmul(x, layer.m_g)));
  return mul(gate, matmul(hidden, layer.m_s));
}

}  // namespace spikegpt
