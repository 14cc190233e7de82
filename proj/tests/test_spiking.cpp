#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "spikegpt/ops.hpp"
#include "spikegpt/spiking.hpp"

#include "grad_check.hpp"

using namespace spikegpt;
using testutil::rand_vec;
using D = Tensor<double>;

namespace {

// Independent evaluation of the arctangent surrogate for oracle checks.
double surrogate_oracle(double x, double alpha) {
  double z = std::numbers::pi / 2.0 * alpha * x;
  return alpha / (2.0 * (1.0 + z * z));
}

}  // namespace

TEST_CASE("heaviside_spike forward sign cases with theta(0)=1") {
  D x = D::from({1, 3}, {-1.0, 0.0, 2.0});
  D s = heaviside_spike(x, 2.0);
  CHECK(s.value()[0] == 0.0);
  CHECK(s.value()[1] == 1.0);
  CHECK(s.value()[2] == 1.0);
}

TEST_CASE("surrogate values at fixed points") {
  CHECK(arctan_surrogate(0.0, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
  // 2 / (2 * (1 + pi^2))
  CHECK(arctan_surrogate(1.0, 2.0) ==
        doctest::Approx(2.0 / (2.0 * (1.0 + std::numbers::pi * std::numbers::pi))).epsilon(1e-15));
  CHECK(arctan_surrogate(1.0, 2.0) == doctest::Approx(0.0920).epsilon(1e-3));
}

TEST_CASE("heaviside_spike backward equals the analytic surrogate to 1e-12") {
  Rng rng(8);
  std::vector<double> xs = rand_vec(rng, 64, -3.0, 3.0);
  for (double alpha : {1.0, 2.0, 5.0}) {
    D x = D::param("x", {1, 64}, xs);
    sum_all(heaviside_spike(x, alpha)).backward();
    for (size_t i = 0; i < xs.size(); ++i) {
      double expect = surrogate_oracle(xs[i], alpha);
      CHECK(std::fabs(x.grad()[i] - expect) <= 1e-12 * std::max(1.0, std::fabs(expect)));
    }
  }
}

TEST_CASE("lif_step hand-evaluated cases") {
  LifConfig cfg;  // beta 0.5, threshold 1, reset 0, alpha 2

  SUBCASE("drive 2.0 from rest: spikes and resets") {
    auto st = LifState<double>::zeros(1);
    auto out = lif_step(D::from({1, 1}, {2.0}), st, cfg);
    CHECK(out.membrane.item() == doctest::Approx(1.0));
    CHECK(out.spikes.item() == 1.0);  // theta(0) = 1: at threshold fires
    CHECK(out.state.h.item() == 0.0);
  }
  SUBCASE("quiescent neuron stays quiet") {
    auto st = LifState<double>::zeros(1);
    auto out = lif_step(D::from({1, 1}, {0.0}), st, cfg);
    CHECK(out.membrane.item() == 0.0);
    CHECK(out.spikes.item() == 0.0);
    CHECK(out.state.h.item() == 0.0);
  }
  SUBCASE("subthreshold integration keeps the membrane") {
    LifState<double> st{D::from({1, 1}, {0.5})};
    auto out = lif_step(D::from({1, 1}, {1.0}), st, cfg);
    CHECK(out.membrane.item() == doctest::Approx(0.75));
    CHECK(out.spikes.item() == 0.0);
    CHECK(out.state.h.item() == doctest::Approx(0.75));
  }
}

TEST_CASE("lif: beta=1 constant subthreshold drive never spikes, membrane tracks input") {
  LifConfig cfg;
  cfg.beta = 1.0;
  const double c = 0.8;
  auto st = LifState<double>::zeros(4);
  for (int t = 0; t < 50; ++t) {
    auto out = lif_step(D::full({1, 4}, c), st, cfg);
    st = out.state;
    for (double s : out.spikes.value()) CHECK(s == 0.0);
    for (double u : out.membrane.value()) CHECK(u == doctest::Approx(c).epsilon(1e-12));
  }
}

TEST_CASE("lif reset and threshold semantics on randomized streams") {
  // 10^5 neuron-steps: H equals U where no spike, 0 where spike; H always
  // below threshold; spikes exactly binary.
  LifConfig cfg;
  Rng rng(21);
  const int64_t width = 100, steps = 1000;
  auto st = LifState<double>::zeros(width);
  for (int64_t t = 0; t < steps; ++t) {
    D y = D::from({1, width}, rand_vec(rng, static_cast<size_t>(width), -2.0, 4.0));
    auto out = lif_step(y, st, cfg);
    for (int64_t j = 0; j < width; ++j) {
      double s = out.spikes.value()[static_cast<size_t>(j)];
      double u = out.membrane.value()[static_cast<size_t>(j)];
      double h = out.state.h.value()[static_cast<size_t>(j)];
      CHECK((s == 0.0 || s == 1.0));
      if (s == 1.0) {
        CHECK(u >= cfg.threshold);
        CHECK(h == 0.0);
      } else {
        CHECK(u < cfg.threshold);
        CHECK(h == u);
      }
      CHECK(h < cfg.threshold);
      CHECK(std::isfinite(h));
    }
    st = out.state;
  }
}

TEST_CASE("lif_step rejects mismatched state shape") {
  LifConfig cfg;
  auto st = LifState<double>::zeros(3);
  CHECK_THROWS_AS(lif_step(D::zeros({1, 4}), st, cfg), ShapeError);
}

TEST_CASE("binary_embed: sign pattern and all-negative rows") {
  D table = D::from({3, 3}, {0.3, -0.2, 1.5, -1.0, -0.5, -0.1, 0.0, 0.2, -0.3}, true);
  D s = binary_embed({0}, table, 2.0);
  CHECK(s.value()[0] == 1.0);
  CHECK(s.value()[1] == 0.0);
  CHECK(s.value()[2] == 1.0);

  D s2 = binary_embed({1}, table, 2.0);
  for (double v : s2.value()) CHECK(v == 0.0);
}

TEST_CASE("binary_embed: gradient reaches only looked-up rows, via the surrogate") {
  // Loss is linear in the spikes, so AD through the surrogate must match
  // finite differences of the smooth proxy whose true derivative is the
  // surrogate: f(x) = (1/pi) * atan(pi/2 * alpha * x) + 1/2.
  const double alpha = 2.0;
  Rng rng(4);
  std::vector<double> w = rand_vec(rng, 12, -1.0, 1.0);
  std::vector<double> c = rand_vec(rng, 8, -1.0, 1.0);
  std::vector<int32_t> toks{2, 0};

  D table = D::param("w", {3, 4}, w);
  D coeff = D::from({2, 4}, c);
  sum_all(mul(binary_embed(toks, table, alpha), coeff)).backward();

  auto proxy = [&](const std::vector<double>& tw) {
    double total = 0.0;
    for (size_t i = 0; i < toks.size(); ++i)
      for (size_t j = 0; j < 4; ++j) {
        double x = tw[static_cast<size_t>(toks[i]) * 4 + j];
        double f = std::atan(std::numbers::pi / 2.0 * alpha * x) / std::numbers::pi + 0.5;
        total += f * c[i * 4 + j];
      }
    return total;
  };
  const double h = 1e-6;
  for (size_t j = 0; j < w.size(); ++j) {
    std::vector<double> wp = w, wm = w;
    wp[j] += h;
    wm[j] -= h;
    double fd = (proxy(wp) - proxy(wm)) / (2.0 * h);
    CHECK(table.grad()[j] == doctest::Approx(fd).epsilon(1e-4));
  }
  // rows never looked up stay at zero gradient
  for (size_t j = 0; j < 4; ++j) CHECK(table.grad()[4 + j] == 0.0);
}

TEST_CASE("binary_embed rejects out-of-vocabulary ids") {
  D table = D::zeros({3, 4});
  CHECK_THROWS_AS(binary_embed({3}, table, 2.0), VocabError);
}

TEST_CASE("spike outputs are exactly binary for random inputs") {
  Rng rng(55);
  D x = D::from({16, 8}, rand_vec(rng, 128, -5.0, 5.0));
  D s = heaviside_spike(x, 2.0);
  for (double v : s.value()) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("lif gradient flows through time via the surrogate") {
  // Two steps of LIF on a learnable drive; the loss depends on the second
  // spike output, so the first drive receives gradient through the carried
  // membrane. Nothing here should be NaN or zero everywhere.
  LifConfig cfg;
  D y1 = D::param("y1", {1, 4}, {0.4, 0.9, -0.3, 1.4});
  D y2 = D::param("y2", {1, 4}, {0.5, 0.2, 0.8, -0.2});
  auto st = LifState<double>::zeros(4);
  auto o1 = lif_step(y1, st, cfg);
  auto o2 = lif_step(y2, o1.state, cfg);
  sum_all(add(o1.spikes, o2.spikes)).backward();
  bool any = false;
  for (double g : y1.grad()) {
    CHECK(std::isfinite(g));
    any = any || g != 0.0;
  }
  CHECK(any);
}
