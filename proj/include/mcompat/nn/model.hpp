#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mcompat/nn/layers.hpp"

namespace mcompat::nn {

enum class Family { vgg16, resnet18, densenet121 };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::vgg16: return "vgg16";
    case Family::resnet18: return "resnet18";
    case Family::densenet121: return "densenet121";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  if (s == "vgg16") return Family::vgg16;
  if (s == "resnet18") return Family::resnet18;
  if (s == "densenet121") return Family::densenet121;
  throw ConfigError("unknown model family '" + std::string(s) + "' (vgg16|resnet18|densenet121)");
}

// Width multiplier as an exact fraction num/den in (0, 1].
struct Ratio {
  std::uint32_t num = 1;
  std::uint32_t den = 1;

  // round half-up, at least 1
  std::size_t scale(std::size_t channels) const {
    const std::uint64_t v = (2ULL * channels * num + den) / (2ULL * den);
    return std::max<std::size_t>(1, std::size_t(v));
  }
  double value() const { return double(num) / double(den); }
};

inline Ratio parse_ratio(std::string_view s) {
  Ratio r;
  try {
    const auto slash = s.find('/');
    if (slash == std::string_view::npos) {
      const double v = std::stod(std::string(s));
      if (v == 1.0) return r;
      // decimal forms like 0.25 -> 1/4 when exact
      for (std::uint32_t den = 2; den <= 1024; ++den) {
        const double num = v * den;
        if (std::abs(num - std::round(num)) < 1e-9) return {std::uint32_t(std::round(num)), den};
      }
      throw ConfigError("width multiplier '" + std::string(s) + "' is not a simple fraction");
    }
    r.num = std::uint32_t(std::stoul(std::string(s.substr(0, slash))));
    r.den = std::uint32_t(std::stoul(std::string(s.substr(slash + 1))));
  } catch (const std::invalid_argument&) {
    throw ConfigError("cannot parse width multiplier '" + std::string(s) + "'");
  }
  if (r.den == 0 || r.num == 0 || r.num > r.den)
    throw ConfigError("width multiplier must lie in (0, 1], got '" + std::string(s) + "'");
  return r;
}

struct ModelSpec {
  Family family = Family::vgg16;
  std::size_t num_classes = 2;
  Ratio width{1, 1};
  std::size_t input_channels = 3;

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (width.den == 0 || width.num == 0 || width.num > width.den)
      throw ConfigError("width multiplier must lie in (0, 1]");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
  }
};

struct LayerCensus {
  std::size_t conv = 0;
  std::size_t fc = 0;
  std::size_t batchnorm = 0;
};

/// Common surface of every trainable network: a forward pass plus the
/// named parameter and buffer registry used by optimizers and weight IO.
template <class T>
class Model {
 public:
  virtual ~Model() = default;

  // `rng` drives dropout masks in train mode; may be null for models without dropout.
  virtual Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng* rng) = 0;

  virtual std::vector<Parameter<T>> parameters() const = 0;
  virtual std::vector<Parameter<T>> buffers() const { return {}; }

  // Names of the final classification layer's parameters.
  virtual std::vector<std::string> head_names() const { return {}; }
  virtual void replace_head(std::size_t num_classes, Rng& rng) {
    (void)num_classes;
    (void)rng;
    throw UsageError("this model has no replaceable head");
  }
  virtual LayerCensus census() const { return {}; }
  virtual std::string name() const { return "model"; }

  // Parameters followed by buffers, the unit of weight persistence.
  std::vector<Parameter<T>> state() const {
    auto s = parameters();
    auto b = buffers();
    s.insert(s.end(), b.begin(), b.end());
    return s;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.value.zero_grad();
  }
};

template <class T>
std::size_t count_params(const Model<T>& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.value.numel();
  return n;
}

enum class TrainPolicy { all, head_only };

inline TrainPolicy parse_policy(std::string_view s) {
  if (s == "all") return TrainPolicy::all;
  if (s == "head_only" || s == "head-only") return TrainPolicy::head_only;
  throw ConfigError("unknown finetune policy '" + std::string(s) + "' (all|head_only)");
}

inline std::string_view policy_name(TrainPolicy p) { return p == TrainPolicy::all ? "all" : "head_only"; }

/// Marks parameters trainable or frozen. Frozen parameters record no
/// gradient and the optimizer skips them.
template <class T>
void set_trainable(Model<T>& model, TrainPolicy policy) {
  const auto head = model.head_names();
  for (auto& p : model.parameters()) {
    const bool is_head = std::find(head.begin(), head.end(), p.name) != head.end();
    p.value.set_requires_grad(policy == TrainPolicy::all || is_head);
  }
}

}  // namespace mcompat::nn
