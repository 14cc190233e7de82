#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "spikegpt/ops.hpp"
#include "spikegpt/spiking.hpp"
#include "spikegpt/srffn.hpp"

#include "grad_check.hpp"

using namespace spikegpt;
using testutil::max_fd_rel_err;
using testutil::rand_vec;
using D = Tensor<double>;

namespace {

SrffnLayer<double> random_layer(Rng& rng, int64_t e, double scale = 0.5) {
  return {D::from({e, e}, rand_vec(rng, static_cast<size_t>(e * e), -scale, scale)),
          D::from({e, 4 * e}, rand_vec(rng, static_cast<size_t>(4 * e * e), -scale, scale)),
          D::from({4 * e, e}, rand_vec(rng, static_cast<size_t>(4 * e * e), -scale, scale))};
}

}  // namespace

TEST_CASE("zero input: half-open gate, zero hidden, zero output, no spikes") {
  Rng rng(6);
  const int64_t t = 3, e = 4;
  auto layer = random_layer(rng, e);
  D x = D::zeros({t, e});
  D gate = sigmoid(matmul(x, layer.m_p));
  for (double g : gate.value()) CHECK(g == doctest::Approx(0.5));
  D out = srffn_core(x, layer);
  for (double v : out.value()) CHECK(v == 0.0);

  LifConfig lif;
  auto st = LifState<double>::zeros(e);
  for (int64_t i = 0; i < t; ++i) {
    auto o = lif_step(slice_rows(out, i, 1), st, lif);
    st = o.state;
    for (double s : o.spikes.value()) CHECK(s == 0.0);
  }
}

TEST_CASE("gate-open limit with identity-like projections recovers relu squared") {
  const int64_t e = 3;
  // Large positive gate projection saturates sigmoid toward 1; M_G embeds the
  // identity into the first E hidden channels and M_S reads it back.
  SrffnLayer<double> layer{D::full({e, e}, 50.0), D::zeros({e, 4 * e}), D::zeros({4 * e, e})};
  for (int64_t i = 0; i < e; ++i) {
    layer.m_g.raw_value()[static_cast<size_t>(i * 4 * e + i)] = 1.0;
    layer.m_s.raw_value()[static_cast<size_t>(i * e + i)] = 1.0;
  }
  // Row sums stay positive so the all-ones gate projection saturates open.
  D x = D::from({2, e}, {0.7, -0.3, 1.2, -1.0, 0.4, 0.9});
  D out = srffn_core(x, layer);
  for (size_t i = 0; i < out.value().size(); ++i) {
    double xi = x.value()[i];
    double expect = xi > 0 ? xi * xi : 0.0;
    CHECK(out.value()[i] == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("gate strictly in (0,1), hidden activations nonnegative") {
  Rng rng(13);
  const int64_t t = 8, e = 5;
  auto layer = random_layer(rng, e);
  D x = D::from({t, e}, rand_vec(rng, static_cast<size_t>(t * e), -2, 2));
  D gate = sigmoid(matmul(x, layer.m_p));
  for (double g : gate.value()) {
    CHECK(g > 0.0);
    CHECK(g < 1.0);
  }
  D hidden = square(relu(matmul(x, layer.m_g)));
  for (double h : hidden.value()) CHECK(h >= 0.0);
}

TEST_CASE("un-spiked srffn gradient vs finite differences") {
  Rng rng(40);
  const int64_t t = 3, e = 3;
  SrffnLayer<double> layer{
      D::param("m_p", {e, e}, rand_vec(rng, static_cast<size_t>(e * e), -0.5, 0.5)),
      D::param("m_g", {e, 4 * e}, rand_vec(rng, static_cast<size_t>(4 * e * e), -0.5, 0.5)),
      D::param("m_s", {4 * e, e}, rand_vec(rng, static_cast<size_t>(4 * e * e), -0.5, 0.5))};
  D x = D::param("x", {t, e}, rand_vec(rng, static_cast<size_t>(t * e)));
  double err = max_fd_rel_err({x, layer.m_p, layer.m_g, layer.m_s},
                              [&] { return sum_all(square(srffn_core(x, layer))); });
  CHECK(err <= 1e-4);
}

TEST_CASE("spiked srffn output is exactly binary") {
  Rng rng(52);
  const int64_t t = 6, e = 4;
  auto layer = random_layer(rng, e, 1.5);
  D x = D::from({t, e}, rand_vec(rng, static_cast<size_t>(t * e), -2, 2));
  D out = srffn_core(x, layer);
  LifConfig lif;
  auto st = LifState<double>::zeros(e);
  bool any_spike = false;
  for (int64_t i = 0; i < t; ++i) {
    auto o = lif_step(slice_rows(out, i, 1), st, lif);
    st = o.state;
    for (double s : o.spikes.value()) {
      CHECK((s == 0.0 || s == 1.0));
      any_spike = any_spike || s == 1.0;
    }
  }
  CHECK(any_spike);
}
