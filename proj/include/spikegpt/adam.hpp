#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spikegpt/errors.hpp"
#include "spikegpt/tensor.hpp"

namespace spikegpt {

struct AdamConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Gradients are read from each parameter's grad
// buffer; the caller is responsible for zeroing grads between steps.
template <class T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].second.value().size(), T(0));
      v_[i].assign(params_[i].second.value().size(), T(0));
    }
  }

  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      auto& g = p.raw_grad();
      if (!g.empty()) std::fill(g.begin(), g.end(), T(0));
    }
  }

  void step(double lr) {
    ++step_;
    T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(step_)));
    T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(step_)));
    T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    T eps = static_cast<T>(cfg_.eps);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto& g = p.raw_grad();
      if (g.empty()) g.assign(p.value().size(), T(0));
      for (T gv : g)
        if (!std::isfinite(static_cast<double>(gv)))
          throw NumericError("adam: non-finite gradient in parameter '" + params_[i].first + "'");
      auto& val = p.raw_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        T mhat = m[j] / bc1;
        T vhat = v[j] / bc2;
        val[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  void step() { step(cfg_.lr); }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace spikegpt
