#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mcompat/nn/layers.hpp"

namespace mcompat::optim {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::size_t t = 0;
  std::vector<std::vector<T>> m, v;
};

/// One Adam update of every trainable parameter:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// Frozen parameters (requires_grad off) are left untouched. Moments are
/// kept in double regardless of T.
template <class T>
void adam_step(std::vector<nn::Parameter<T>>& params, AdamState<double>& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  } else if (state.m.size() != params.size()) {
    throw UsageError("adam_step: parameter list differs from optimizer state");
  }
  ++state.t;
  const auto& c = state.config;
  const double bc1 = 1 - std::pow(c.beta1, double(state.t));
  const double bc2 = 1 - std::pow(c.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable()) continue;
    auto value = p.value.mutable_data();
    auto grad = p.value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) {
      m.assign(value.size(), 0.0);
      v.assign(value.size(), 0.0);
    } else if (m.size() != value.size()) {
      throw UsageError("adam_step: state dims differ for " + p.name);
    }
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = c.beta1 * m[j] + (1 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1 - c.beta2) * g * g;
      const double step = c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
      value[j] = T(double(value[j]) - step);
    }
  }
}

template <class T>
class Adam {
 public:
  Adam(std::vector<nn::Parameter<T>> params, AdamConfig config = {}) : params_(std::move(params)) {
    state_.config = config;
  }

  void step() { adam_step(params_, state_); }
  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  const AdamState<double>& state() const { return state_; }
  const std::vector<nn::Parameter<T>>& params() const { return params_; }

 private:
  std::vector<nn::Parameter<T>> params_;
  AdamState<double> state_;
};

}  // namespace mcompat::optim
