#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "spikegpt/rng.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < m; ++p) {
    const T* arow = a + p * k;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < k; ++i) {
      T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
void check_rank2(const Tensor<T>& a, const char* op) {
  if (a.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

// Row vector of length matching a's columns.
template <class T>
void check_row_vec(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  check_rank2(x, op);
  check_rank2(v, op);
  if (v.rows() != 1 || v.cols() != x.cols())
    throw ShapeError(std::string(op) + ": expected {1," + std::to_string(x.cols()) +
                     "} vector, got " + shape_str(v.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node<T>& nd) {
    if (pa->requires_grad)
      detail::gemm_nt(nd.grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
    if (pb->requires_grad)
      detail::gemm_tn(pa->value.data(), nd.grad.data(), pb->grad.data(), m, k, n);
  });
}

// a[m x k] * b[n x k]^T, avoiding an explicit transpose of b.
template <class T>
Tensor<T> matmul_nt(Tensor<T> a, Tensor<T> b) {
  detail::check_rank2(a, "matmul_nt");
  detail::check_rank2(b, "matmul_nt");
  int64_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  detail::gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node<T>& nd) {
    if (pa->requires_grad)
      detail::gemm_nn(nd.grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
    if (pb->requires_grad)
      detail::gemm_tn(nd.grad.data(), pa->value.data(), pb->grad.data(), m, n, k);
  });
}

template <class T>
Tensor<T> transpose(Tensor<T> a) {
  detail::check_rank2(a, "transpose");
  int64_t r = a.rows(), c = a.cols();
  std::vector<T> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = a.value()[static_cast<size_t>(i * c + j)];
  Node<T>* pa = a.node();
  return make_op<T>({c, r}, std::move(out), {a}, [pa, r, c](Node<T>& nd) {
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        pa->grad[static_cast<size_t>(i * c + j)] += nd.grad[static_cast<size_t>(j * r + i)];
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& nd) {
    if (pa->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i];
    if (pb->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pb->grad[i] += nd.grad[i];
  });
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& nd) {
    if (pa->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i];
    if (pb->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pb->grad[i] -= nd.grad[i];
  });
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& nd) {
    if (pa->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i] * pb->value[i];
    if (pb->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pb->grad[i] += nd.grad[i] * pa->value[i];
  });
}

template <class T>
Tensor<T> divide(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "divide");
  std::vector<T> out(a.value());
  for (size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& nd) {
    if (pa->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i] / pb->value[i];
    if (pb->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i)
        pb->grad[i] -= nd.grad[i] * nd.value[i] / pb->value[i];
  });
}

template <class T>
Tensor<T> scale(Tensor<T> a, T k) {
  std::vector<T> out(a.value());
  for (auto& v : out) v *= k;
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa, k](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i] * k;
  });
}

template <class T>
Tensor<T> add_scalar(Tensor<T> a, T k) {
  std::vector<T> out(a.value());
  for (auto& v : out) v += k;
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i];
  });
}

template <class T>
Tensor<T> neg(Tensor<T> a) {
  return scale(a, T(-1));
}

template <class T>
Tensor<T> vexp(Tensor<T> a) {
  std::vector<T> out(a.value());
  for (auto& v : out) v = std::exp(v);
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i] * nd.value[i];
  });
}

template <class T>
Tensor<T> sigmoid(Tensor<T> a) {
  std::vector<T> out(a.value());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) {
      T s = nd.value[i];
      pa->grad[i] += nd.grad[i] * s * (T(1) - s);
    }
  });
}

template <class T>
Tensor<T> relu(Tensor<T> a) {
  std::vector<T> out(a.value());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i)
      if (pa->value[i] > T(0)) pa->grad[i] += nd.grad[i];
  });
}

template <class T>
Tensor<T> square(Tensor<T> a) {
  std::vector<T> out(a.value());
  for (auto& v : out) v *= v;
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i)
      pa->grad[i] += nd.grad[i] * T(2) * pa->value[i];
  });
}

// min(x, cap): overflow guard before exp. Gradient passes where x <= cap.
template <class T>
Tensor<T> clamp_max(Tensor<T> a, T cap) {
  std::vector<T> out(a.value());
  for (auto& v : out) v = v < cap ? v : cap;
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa, cap](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i)
      if (pa->value[i] <= cap) pa->grad[i] += nd.grad[i];
  });
}

// Custom-gradient elementwise node: forward applies `fwd`, backward multiplies
// the incoming gradient by `bwd(x)` regardless of the true derivative.
template <class T>
Tensor<T> custom_unary(Tensor<T> a, std::function<T(T)> fwd, std::function<T(T)> bwd) {
  std::vector<T> out(a.value());
  for (auto& v : out) v = fwd(v);
  Node<T>* pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa, bwd = std::move(bwd)](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i)
      pa->grad[i] += nd.grad[i] * bwd(pa->value[i]);
  });
}

// ---------------------------------------------------------------------------
// Broadcast over the leading (row) dimension
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> row_mul(Tensor<T> x, Tensor<T> v) {
  detail::check_row_vec(x, v, "row_mul");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(x.value());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] *= v.value()[static_cast<size_t>(j)];
  Node<T>* px = x.node();
  Node<T>* pv = v.node();
  return make_op<T>(x.shape(), std::move(out), {x, v}, [px, pv, r, c](Node<T>& nd) {
    if (px->requires_grad)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          px->grad[static_cast<size_t>(i * c + j)] +=
              nd.grad[static_cast<size_t>(i * c + j)] * pv->value[static_cast<size_t>(j)];
    if (pv->requires_grad)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          pv->grad[static_cast<size_t>(j)] +=
              nd.grad[static_cast<size_t>(i * c + j)] * px->value[static_cast<size_t>(i * c + j)];
  });
}

template <class T>
Tensor<T> row_add(Tensor<T> x, Tensor<T> v) {
  detail::check_row_vec(x, v, "row_add");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(x.value());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] += v.value()[static_cast<size_t>(j)];
  Node<T>* px = x.node();
  Node<T>* pv = v.node();
  return make_op<T>(x.shape(), std::move(out), {x, v}, [px, pv, r, c](Node<T>& nd) {
    if (px->requires_grad)
      for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[i] += nd.grad[i];
    if (pv->requires_grad)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          pv->grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i * c + j)];
  });
}

// ---------------------------------------------------------------------------
// Shape surgery: slicing, padding, concatenation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> slice_rows(Tensor<T> x, int64_t start, int64_t len) {
  detail::check_rank2(x, "slice_rows");
  if (start < 0 || len < 0 || start + len > x.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + std::to_string(x.rows()) + " rows");
  int64_t c = x.cols();
  std::vector<T> out(x.value().begin() + start * c, x.value().begin() + (start + len) * c);
  Node<T>* px = x.node();
  return make_op<T>({len, c}, std::move(out), {x}, [px, start, c](Node<T>& nd) {
    size_t off = static_cast<size_t>(start * c);
    for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[off + i] += nd.grad[i];
  });
}

// Zero-pad rows above and below.
template <class T>
Tensor<T> pad_rows(Tensor<T> x, int64_t top, int64_t bottom) {
  detail::check_rank2(x, "pad_rows");
  if (top < 0 || bottom < 0) throw ShapeError("pad_rows: negative padding");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(static_cast<size_t>((r + top + bottom) * c), T(0));
  std::copy(x.value().begin(), x.value().end(), out.begin() + top * c);
  Node<T>* px = x.node();
  return make_op<T>({r + top + bottom, c}, std::move(out), {x}, [px, top, c](Node<T>& nd) {
    size_t off = static_cast<size_t>(top * c);
    for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += nd.grad[off + i];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  int64_t c = parts[0].cols();
  int64_t r = 0;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(r * c));
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  std::vector<Node<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(p.node());
  return make_op<T>({r, c}, std::move(out), parts, [ptrs](Node<T>& nd) {
    size_t off = 0;
    for (Node<T>* p : ptrs) {
      size_t n = p->value.size();
      if (p->requires_grad)
        for (size_t i = 0; i < n; ++i) p->grad[i] += nd.grad[off + i];
      off += n;
    }
  });
}

template <class T>
Tensor<T> concat_cols(Tensor<T> a, Tensor<T> b) {
  detail::check_rank2(a, "concat_cols");
  detail::check_rank2(b, "concat_cols");
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  int64_t r = a.rows(), ca = a.cols(), cb = b.cols();
  std::vector<T> out(static_cast<size_t>(r * (ca + cb)));
  for (int64_t i = 0; i < r; ++i) {
    std::copy_n(a.value().begin() + i * ca, ca, out.begin() + i * (ca + cb));
    std::copy_n(b.value().begin() + i * cb, cb, out.begin() + i * (ca + cb) + ca);
  }
  Node<T>* pa = a.node();
  Node<T>* pb = b.node();
  return make_op<T>({r, ca + cb}, std::move(out), {a, b}, [pa, pb, r, ca, cb](Node<T>& nd) {
    for (int64_t i = 0; i < r; ++i) {
      if (pa->requires_grad)
        for (int64_t j = 0; j < ca; ++j)
          pa->grad[static_cast<size_t>(i * ca + j)] += nd.grad[static_cast<size_t>(i * (ca + cb) + j)];
      if (pb->requires_grad)
        for (int64_t j = 0; j < cb; ++j)
          pb->grad[static_cast<size_t>(i * cb + j)] += nd.grad[static_cast<size_t>(i * (ca + cb) + ca + j)];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> mean_rows(Tensor<T> x) {
  detail::check_rank2(x, "mean_rows");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(static_cast<size_t>(c), T(0));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j)] += x.value()[static_cast<size_t>(i * c + j)];
  for (auto& v : out) v /= static_cast<T>(r);
  Node<T>* px = x.node();
  return make_op<T>({1, c}, std::move(out), {x}, [px, r, c](Node<T>& nd) {
    T inv = T(1) / static_cast<T>(r);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        px->grad[static_cast<size_t>(i * c + j)] += nd.grad[static_cast<size_t>(j)] * inv;
  });
}

template <class T>
Tensor<T> sum_all(Tensor<T> x) {
  T s = T(0);
  for (T v : x.value()) s += v;
  Node<T>* px = x.node();
  return make_op<T>({1, 1}, {s}, {x}, [px](Node<T>& nd) {
    for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += nd.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> layernorm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps = T(1e-5)) {
  detail::check_row_vec(x, gain, "layernorm");
  detail::check_row_vec(x, bias, "layernorm");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(static_cast<size_t>(r * c));
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(r * c));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const T* row = x.value().data() + i * c;
    T mean = T(0);
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = istd;
    for (int64_t j = 0; j < c; ++j) {
      T h = (row[j] - mean) * istd;
      (*xhat)[static_cast<size_t>(i * c + j)] = h;
      out[static_cast<size_t>(i * c + j)] = h * gain.value()[static_cast<size_t>(j)] + bias.value()[static_cast<size_t>(j)];
    }
  }
  Node<T>* px = x.node();
  Node<T>* pg = gain.node();
  Node<T>* pb = bias.node();
  return make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                    [px, pg, pb, xhat, inv_std, r, c](Node<T>& nd) {
    for (int64_t i = 0; i < r; ++i) {
      const T* g = nd.grad.data() + i * c;
      const T* h = xhat->data() + i * c;
      if (pg->requires_grad)
        for (int64_t j = 0; j < c; ++j) pg->grad[static_cast<size_t>(j)] += g[j] * h[j];
      if (pb->requires_grad)
        for (int64_t j = 0; j < c; ++j) pb->grad[static_cast<size_t>(j)] += g[j];
      if (px->requires_grad) {
        T istd = (*inv_std)[static_cast<size_t>(i)];
        T sum_dh = T(0), sum_dh_h = T(0);
        for (int64_t j = 0; j < c; ++j) {
          T dh = g[j] * pg->value[static_cast<size_t>(j)];
          sum_dh += dh;
          sum_dh_h += dh * h[j];
        }
        T invc = T(1) / static_cast<T>(c);
        for (int64_t j = 0; j < c; ++j) {
          T dh = g[j] * pg->value[static_cast<size_t>(j)];
          px->grad[static_cast<size_t>(i * c + j)] +=
              istd * (dh - sum_dh * invc - h[j] * sum_dh_h * invc);
        }
      }
    }
  });
}

template <class T>
Tensor<T> softmax(Tensor<T> x) {
  detail::check_rank2(x, "softmax");
  int64_t r = x.rows(), c = x.cols();
  std::vector<T> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i) {
    const T* row = x.value().data() + i * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T e = std::exp(row[j] - mx);
      out[static_cast<size_t>(i * c + j)] = e;
      sum += e;
    }
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] /= sum;
  }
  Node<T>* px = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [px, r, c](Node<T>& nd) {
    for (int64_t i = 0; i < r; ++i) {
      const T* p = nd.value.data() + i * c;
      const T* g = nd.grad.data() + i * c;
      T dot = T(0);
      for (int64_t j = 0; j < c; ++j) dot += g[j] * p[j];
      for (int64_t j = 0; j < c; ++j)
        px->grad[static_cast<size_t>(i * c + j)] += p[j] * (g[j] - dot);
    }
  });
}

// Fused mean cross-entropy over rows of logits against integer targets.
template <class T>
Tensor<T> softmax_xent(Tensor<T> logits, const std::vector<int32_t>& targets) {
  detail::check_rank2(logits, "softmax_xent");
  int64_t r = logits.rows(), c = logits.cols();
  if (static_cast<int64_t>(targets.size()) != r)
    throw ShapeError("softmax_xent: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(r) + " rows");
  for (int32_t t : targets)
    if (t < 0 || t >= c) throw VocabError("softmax_xent: target id " + std::to_string(t) +
                                          " outside [0," + std::to_string(c) + ")");
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(r * c));
  T loss = T(0);
  for (int64_t i = 0; i < r; ++i) {
    const T* row = logits.value().data() + i * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < c; ++j) {
      T e = std::exp(row[j] - mx);
      (*probs)[static_cast<size_t>(i * c + j)] = e;
      sum += e;
    }
    for (int64_t j = 0; j < c; ++j) (*probs)[static_cast<size_t>(i * c + j)] /= sum;
    loss += std::log(sum) + mx - row[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<T>(r);
  Node<T>* pl = logits.node();
  auto tgts = std::make_shared<std::vector<int32_t>>(targets);
  return make_op<T>({1, 1}, {loss}, {logits}, [pl, probs, tgts, r, c](Node<T>& nd) {
    T g = nd.grad[0] / static_cast<T>(r);
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j)
        pl->grad[static_cast<size_t>(i * c + j)] += g * (*probs)[static_cast<size_t>(i * c + j)];
      pl->grad[static_cast<size_t>(i * c + (*tgts)[static_cast<size_t>(i)])] -= g;
    }
  });
}

// ---------------------------------------------------------------------------
// Dropout, embedding lookup
// ---------------------------------------------------------------------------

// Inverted dropout: retained activations scaled by 1/(1-p) at train time.
// Eval mode is an exact pass-through (the input tensor itself).
template <class T>
Tensor<T> dropout(Tensor<T> x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: p must be < 1");
  T keep = static_cast<T>(1.0 - p);
  T inv = T(1) / keep;
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  std::vector<T> out(x.value());
  for (size_t i = 0; i < out.size(); ++i) {
    T m = rng.uniform() < p ? T(0) : inv;
    (*mask)[i] = m;
    out[i] *= m;
  }
  Node<T>* px = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [px, mask](Node<T>& nd) {
    for (size_t i = 0; i < nd.grad.size(); ++i) px->grad[i] += nd.grad[i] * (*mask)[i];
  });
}

template <class T>
Tensor<T> embedding_rows(Tensor<T> table, const std::vector<int32_t>& ids) {
  detail::check_rank2(table, "embedding_rows");
  int64_t v = table.rows(), e = table.cols();
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw VocabError("embedding_rows: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(v));
  int64_t t = static_cast<int64_t>(ids.size());
  std::vector<T> out(static_cast<size_t>(t * e));
  for (int64_t i = 0; i < t; ++i)
    std::copy_n(table.value().begin() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * e, e,
                out.begin() + i * e);
  Node<T>* pt = table.node();
  auto idv = std::make_shared<std::vector<int32_t>>(ids);
  return make_op<T>({t, e}, std::move(out), {table}, [pt, idv, e](Node<T>& nd) {
    for (size_t i = 0; i < idv->size(); ++i) {
      size_t dst = static_cast<size_t>((*idv)[i]) * static_cast<size_t>(e);
      size_t src = i * static_cast<size_t>(e);
      for (int64_t j = 0; j < e; ++j) pt->grad[dst + j] += nd.grad[src + j];
    }
  });
}

// Convenience operators.
template <class T> Tensor<T> operator+(Tensor<T> a, Tensor<T> b) { return add(a, b); }
template <class T> Tensor<T> operator-(Tensor<T> a, Tensor<T> b) { return sub(a, b); }
template <class T> Tensor<T> operator*(Tensor<T> a, Tensor<T> b) { return mul(a, b); }
template <class T> Tensor<T> operator/(Tensor<T> a, Tensor<T> b) { return divide(a, b); }

}  // namespace spikegpt
