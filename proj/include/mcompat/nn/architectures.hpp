#pragma once

#include <cstdint>
#include <memory>

#include "mcompat/nn/densenet.hpp"
#include "mcompat/nn/resnet.hpp"
#include "mcompat/nn/vgg.hpp"

namespace mcompat::nn {

template <class T = float>
std::unique_ptr<Vgg16<T>> build_vgg16(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::vgg16) throw ConfigError("build_vgg16: spec.family is not vgg16");
  Rng rng(seed);
  return std::make_unique<Vgg16<T>>(spec, rng);
}

template <class T = float>
std::unique_ptr<ResNet18<T>> build_resnet18(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::resnet18) throw ConfigError("build_resnet18: spec.family is not resnet18");
  Rng rng(seed);
  return std::make_unique<ResNet18<T>>(spec, rng);
}

template <class T = float>
std::unique_ptr<DenseNet121<T>> build_densenet121(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::densenet121) throw ConfigError("build_densenet121: spec.family is not densenet121");
  Rng rng(seed);
  return std::make_unique<DenseNet121<T>>(spec, rng);
}

template <class T = float>
std::unique_ptr<Model<T>> build_model(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.family) {
    case Family::vgg16: return build_vgg16<T>(spec, seed);
    case Family::resnet18: return build_resnet18<T>(spec, seed);
    case Family::densenet121: return build_densenet121<T>(spec, seed);
  }
  throw ConfigError("unknown model family");
}

// Swap the final classifier for a freshly initialized one of `num_classes`
// outputs; every other parameter is left untouched.
template <class T>
void replace_head(Model<T>& model, std::size_t num_classes, std::uint64_t seed) {
  Rng rng(seed);
  model.replace_head(num_classes, rng);
}

}  // namespace mcompat::nn
