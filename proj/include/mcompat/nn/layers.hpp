#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mcompat/tensor/ops.hpp"

namespace mcompat::nn {

using Rng = std::mt19937_64;

/// A named, persistable tensor. For trainable parameters the gradient lives
/// in value.grad(); requires_grad doubles as the trainable flag.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;

  std::span<const T> grad() const { return value.grad(); }
  bool trainable() const { return value.requires_grad(); }
};

// Kaiming-uniform with ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
template <class T>
Tensor<T> kaiming_uniform(Dims dims, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(dims));
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (auto& v : t.mutable_data()) v = T((2.0 * detail::uniform01(rng) - 1.0) * bound);
  return t;
}

template <class T>
struct Conv2d {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the conv has no bias
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::string n, std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p,
         bool with_bias, Rng& rng)
      : name(std::move(n)), stride(s), padding(p) {
    weight = kaiming_uniform<T>({out, in, k, k}, in * k * k, rng).set_requires_grad();
    if (with_bias) bias = Tensor<T>::zeros({out}).set_requires_grad();
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(std::vector<Parameter<T>>& out) const {
    out.push_back({name + ".weight", weight});
    if (bias.defined()) out.push_back({name + ".bias", bias});
  }
};

template <class T>
struct Linear {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::string n, std::size_t in, std::size_t out, Rng& rng) : name(std::move(n)) {
    weight = kaiming_uniform<T>({out, in}, in, rng).set_requires_grad();
    bias = Tensor<T>::zeros({out}).set_requires_grad();
  }

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(std::vector<Parameter<T>>& out) const {
    out.push_back({name + ".weight", weight});
    out.push_back({name + ".bias", bias});
  }
};

template <class T>
struct BatchNorm2d {
  std::string name;
  Tensor<T> gamma;
  Tensor<T> beta;
  mutable Tensor<T> running_mean;
  mutable Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(std::string n, std::size_t channels) : name(std::move(n)) {
    gamma = Tensor<T>::ones({channels}).set_requires_grad();
    beta = Tensor<T>::zeros({channels}).set_requires_grad();
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::ones({channels});
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
  }

  void collect(std::vector<Parameter<T>>& out) const {
    out.push_back({name + ".weight", gamma});
    out.push_back({name + ".bias", beta});
  }
  void collect_buffers(std::vector<Parameter<T>>& out) const {
    out.push_back({name + ".running_mean", running_mean});
    out.push_back({name + ".running_var", running_var});
  }
};

}  // namespace mcompat::nn
