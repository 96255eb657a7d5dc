#pragma once

#include <cmath>
#include <vector>

#include "priorseg/segnet.hpp"

namespace priorseg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moments, one moment pair per parameter tensor.
template <class T>
class Adam {
 public:
  Adam(const NetworkState<T>& state, AdamConfig config) : config_(config) {
    m_.reserve(state.params.size());
    for (const auto& p : state.params) {
      m_.emplace_back(p.values.size(), T(0));
      v_.emplace_back(p.values.size(), T(0));
    }
  }

  void step(NetworkState<T>& state, const Gradients<T>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T lr = static_cast<T>(config_.learning_rate);
    const T eps = static_cast<T>(config_.epsilon);
    const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
    for (std::size_t p = 0; p < state.params.size(); ++p) {
      auto& w = state.params[p].values;
      const auto& g = grads.values[p];
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] * inv_c1;
        const T vhat = v[i] * inv_c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
};

}  // namespace priorseg
