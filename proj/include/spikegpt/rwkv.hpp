#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spikegpt/ops.hpp"
#include "spikegpt/spiking.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

// exp() overflow guard applied to K in both WKV forms. Oracle tests use small
// K where the clamp is inactive.
template <class T>
constexpr T wkv_clamp();
template <>
constexpr float wkv_clamp<float>() { return 30.0f; }
template <>
constexpr double wkv_clamp<double>() { return 60.0; }

// Fixed per-channel blend mask, entries (i/E)^(n/N) for i = 1..E with n the
// 1-based block index. Strictly increasing across channels, all in (0, 1].
template <class T>
Tensor<T> shift_mask(int64_t embed, int block_1based, int n_blocks) {
  std::vector<T> w(static_cast<size_t>(embed));
  double p = static_cast<double>(block_1based) / static_cast<double>(n_blocks);
  for (int64_t i = 0; i < embed; ++i)
    w[static_cast<size_t>(i)] =
        static_cast<T>(std::pow(static_cast<double>(i + 1) / static_cast<double>(embed), p));
  return Tensor<T>::from({1, embed}, std::move(w));
}

// Blend each row with its predecessor: W (.) X + (1 - W) (.) X_shifted, where
// the shifted matrix is X moved down one row. The row entering at the top is
// `prev` (zeros for a fresh sequence), which is what makes chunked evaluation
// bit-identical to whole-sequence evaluation.
template <class T>
Tensor<T> token_shift(Tensor<T> x, Tensor<T> mask, Tensor<T> prev) {
  detail::check_row_vec(x, mask, "token_shift");
  detail::check_row_vec(x, prev, "token_shift");
  int64_t t = x.rows();
  Tensor<T> shifted = t > 1 ? concat_rows<T>({prev, slice_rows(x, 0, t - 1)}) : prev;
  Tensor<T> inv_mask = add_scalar(neg(mask), T(1));
  return add(row_mul(x, mask), row_mul(shifted, inv_mask));
}

// Per-channel positional decay parameters. w_d holds log per-step decays
// (strictly negative at init), w_f the log bonus applied to the current token.
template <class T>
struct DecayParams {
  Tensor<T> w_d;  // {1, E}
  Tensor<T> w_f;  // {1, E}
};

// Serial-recurrence accumulators, one pair of length-E vectors per layer.
template <class T>
struct WkvState {
  Tensor<T> a;
  Tensor<T> b;

  static WkvState zeros(int64_t embed) {
    return {Tensor<T>::zeros({1, embed}), Tensor<T>::zeros({1, embed})};
  }
  void detach() {
    a = a.detach();
    b = b.detach();
  }
};

// Convolution kernel {E x T}: slot j < T-1 holds exp((T-1-j) * w_d) (oldest to
// nearest), slot T-1 holds exp(w_f) for the current token. Built from graph ops
// so gradients reach w_d and w_f.
template <class T>
Tensor<T> decay_kernel(const DecayParams<T>& p, int64_t t_len) {
  if (t_len < 1) throw ShapeError("decay_kernel: sequence length must be >= 1");
  Tensor<T> wf_col = transpose(p.w_f);  // {E, 1}
  if (t_len == 1) return vexp(wf_col);
  std::vector<T> dist(static_cast<size_t>(t_len - 1));
  for (int64_t j = 0; j < t_len - 1; ++j) dist[static_cast<size_t>(j)] = static_cast<T>(t_len - 1 - j);
  Tensor<T> distances = Tensor<T>::from({1, t_len - 1}, std::move(dist));
  Tensor<T> past = matmul(transpose(p.w_d), distances);  // {E, T-1}
  return vexp(concat_cols(past, wf_col));
}

// Per-channel causal correlation: out[t,e] = sum_{d=0..t} kernel[e, T-1-d] * x[t-d, e].
// Kernel columns must match the sequence length. O(E*T^2) reference path.
template <class T>
Tensor<T> causal_conv(Tensor<T> x, Tensor<T> kernel) {
  detail::check_rank2(x, "causal_conv");
  detail::check_rank2(kernel, "causal_conv");
  int64_t t_len = x.rows(), e = x.cols();
  if (kernel.rows() != e || kernel.cols() != t_len)
    throw ShapeError("causal_conv: kernel " + shape_str(kernel.shape()) + " does not match input " +
                     shape_str(x.shape()));
  // Transposed kernel scratch {T x E} keeps the channel loop contiguous.
  std::vector<T> kt(static_cast<size_t>(t_len * e));
  for (int64_t c = 0; c < e; ++c)
    for (int64_t j = 0; j < t_len; ++j)
      kt[static_cast<size_t>(j * e + c)] = kernel.value()[static_cast<size_t>(c * t_len + j)];
  std::vector<T> out(static_cast<size_t>(t_len * e), T(0));
  for (int64_t t = 0; t < t_len; ++t) {
    T* orow = out.data() + t * e;
    for (int64_t d = 0; d <= t; ++d) {
      const T* krow = kt.data() + (t_len - 1 - d) * e;
      const T* xrow = x.value().data() + (t - d) * e;
      for (int64_t c = 0; c < e; ++c) orow[c] += krow[c] * xrow[c];
    }
  }
  Node<T>* px = x.node();
  Node<T>* pk = kernel.node();
  return make_op<T>(x.shape(), std::move(out), {x, kernel}, [px, pk, t_len, e](Node<T>& nd) {
    if (px->requires_grad) {
      for (int64_t t = 0; t < t_len; ++t) {
        const T* grow = nd.grad.data() + t * e;
        for (int64_t d = 0; d <= t; ++d) {
          T* xg = px->grad.data() + (t - d) * e;
          const T* kv = pk->value.data();
          for (int64_t c = 0; c < e; ++c)
            xg[c] += grow[c] * kv[c * t_len + (t_len - 1 - d)];
        }
      }
    }
    if (pk->requires_grad) {
      for (int64_t t = 0; t < t_len; ++t) {
        const T* grow = nd.grad.data() + t * e;
        for (int64_t d = 0; d <= t; ++d) {
          const T* xrow = px->value.data() + (t - d) * e;
          T* kg = pk->grad.data();
          for (int64_t c = 0; c < e; ++c)
            kg[c * t_len + (t_len - 1 - d)] += grow[c] * xrow[c];
        }
      }
    }
  });
}

// Serial recurrent WKV. For each step t:
//   y[t] = sigmoid(r[t]) (.) (exp(w_f + k[t]) (.) v[t] + A) / (exp(w_f + k[t]) + B)
//   A <- exp(w_d) (.) (A + exp(k[t]) (.) v[t])
//   B <- exp(w_d) (.) (B + exp(k[t]))
// The returned state supports streaming continuation.
template <class T>
std::pair<Tensor<T>, WkvState<T>> wkv_serial(Tensor<T> r, Tensor<T> k, Tensor<T> v,
                                             const DecayParams<T>& p, WkvState<T> state) {
  detail::check_same_shape(r, k, "wkv_serial");
  detail::check_same_shape(k, v, "wkv_serial");
  detail::check_row_vec(r, p.w_d, "wkv_serial");
  if (state.a.cols() != r.cols())
    throw ShapeError("wkv_serial: state has " + std::to_string(state.a.cols()) +
                     " channels, input has " + std::to_string(r.cols()));
  int64_t t_len = r.rows();
  Tensor<T> kc = clamp_max(k, wkv_clamp<T>());
  Tensor<T> decay = vexp(p.w_d);
  Tensor<T> a = state.a;
  Tensor<T> b = state.b;
  std::vector<Tensor<T>> rows;
  rows.reserve(static_cast<size_t>(t_len));
  for (int64_t t = 0; t < t_len; ++t) {
    Tensor<T> kt = slice_rows(kc, t, 1);
    Tensor<T> vt = slice_rows(v, t, 1);
    Tensor<T> rt = slice_rows(r, t, 1);
    Tensor<T> ekf = vexp(add(kt, p.w_f));
    Tensor<T> num = add(mul(ekf, vt), a);
    Tensor<T> den = add(ekf, b);
    rows.push_back(mul(sigmoid(rt), divide(num, den)));
    Tensor<T> ek = vexp(kt);
    a = mul(decay, add(a, mul(ek, vt)));
    b = mul(decay, add(b, ek));
  }
  Tensor<T> y = t_len == 1 ? rows[0] : concat_rows(rows);
  return {y, {a, b}};
}

// Parallel 1-D-convolution WKV, assuming zero initial state:
//   y = sigmoid(r) (.) conv(exp(k) (.) v) / conv(exp(k))
// with the kernel from decay_kernel. Cross-checked against wkv_serial.
template <class T>
Tensor<T> wkv_parallel(Tensor<T> r, Tensor<T> k, Tensor<T> v, const DecayParams<T>& p) {
  detail::check_same_shape(r, k, "wkv_parallel");
  detail::check_same_shape(k, v, "wkv_parallel");
  detail::check_row_vec(r, p.w_d, "wkv_parallel");
  Tensor<T> kernel = decay_kernel(p, r.rows());
  Tensor<T> ek = vexp(clamp_max(k, wkv_clamp<T>()));
  Tensor<T> num = causal_conv(mul(ek, v), kernel);
  Tensor<T> den = causal_conv(ek, kernel);
  return mul(sigmoid(r), divide(num, den));
}

}  // namespace spikegpt
