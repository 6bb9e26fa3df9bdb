#pragma once

#include <array>
#include <string>
#include <vector>

#include "mcompat/nn/model.hpp"

namespace mcompat::nn {

struct DenseBlockSpec {
  std::size_t in_channels = 0;
  std::size_t num_layers = 0;
  std::size_t growth_rate = 32;
  std::size_t bottleneck_factor = 4;

  // Layer j (1-based) consumes the block input plus j-1 earlier outputs.
  std::size_t connection_count() const { return num_layers * (num_layers + 1) / 2; }
  std::size_t out_channels() const { return in_channels + num_layers * growth_rate; }
};

// BN-ReLU-1x1(bottleneck*k)-BN-ReLU-3x3(k)
template <class T>
struct DenseLayer {
  BatchNorm2d<T> norm1, norm2;
  Conv2d<T> conv1, conv2;

  DenseLayer(const std::string& name, std::size_t in, std::size_t growth, std::size_t bottleneck, Rng& rng)
      : norm1(name + ".norm1", in),
        norm2(name + ".norm2", bottleneck * growth),
        conv1(name + ".conv1", in, bottleneck * growth, 1, 1, 0, false, rng),
        conv2(name + ".conv2", bottleneck * growth, growth, 3, 1, 1, false, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return conv2(relu(norm2(conv1(relu(norm1(x, mode))), mode)));
  }
  void collect(std::vector<Parameter<T>>& out) const {
    norm1.collect(out);
    conv1.collect(out);
    norm2.collect(out);
    conv2.collect(out);
  }
  void collect_buffers(std::vector<Parameter<T>>& out) const {
    norm1.collect_buffers(out);
    norm2.collect_buffers(out);
  }
};

template <class T>
struct DenseBlock {
  DenseBlockSpec spec;
  std::vector<DenseLayer<T>> layers;
  // Number of concatenated inputs each layer received in the last forward.
  mutable std::vector<std::size_t> last_input_counts;

  DenseBlock(const std::string& name, DenseBlockSpec s, Rng& rng) : spec(s) {
    for (std::size_t j = 0; j < s.num_layers; ++j)
      layers.emplace_back(name + ".denselayer" + std::to_string(j + 1), s.in_channels + j * s.growth_rate,
                          s.growth_rate, s.bottleneck_factor, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    std::vector<Tensor<T>> features{x};
    last_input_counts.clear();
    for (const auto& layer : layers) {
      last_input_counts.push_back(features.size());
      const Tensor<T> in = features.size() == 1 ? features[0] : concat_channels(features);
      features.push_back(layer(in, mode));
    }
    return concat_channels(features);
  }
};

// BN-ReLU-1x1 conv halving channels, then 2x2/2 average pooling.
template <class T>
struct Transition {
  BatchNorm2d<T> norm;
  Conv2d<T> conv;

  Transition(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : norm(name + ".norm", in), conv(name + ".conv", in, out, 1, 1, 0, false, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return avgpool2d(conv(relu(norm(x, mode))), 2, 2);
  }
};

// DenseNet121: 7x7/2 stem with max pool, dense blocks of (6, 12, 24, 16)
// layers separated by transitions, final BN-ReLU, global pooling, linear head.
template <class T>
class DenseNet121 final : public Model<T> {
 public:
  static constexpr std::array<std::size_t, 4> kBlockLayers{6, 12, 24, 16};
  static constexpr std::size_t kGrowth = 32;
  static constexpr std::size_t kBottleneck = 4;

  DenseNet121(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    spec.validate();
    if (spec.family != Family::densenet121) throw ConfigError("DenseNet121 built from a non-densenet121 spec");
    const std::size_t growth = spec.width.scale(kGrowth);
    std::size_t channels = spec.width.scale(64);
    conv0_ = Conv2d<T>("features.conv0", spec.input_channels, channels, 7, 2, 3, false, rng);
    norm0_ = BatchNorm2d<T>("features.norm0", channels);
    for (std::size_t b = 0; b < kBlockLayers.size(); ++b) {
      DenseBlockSpec bs{channels, kBlockLayers[b], growth, kBottleneck};
      blocks_.emplace_back("features.denseblock" + std::to_string(b + 1), bs, rng);
      channels = bs.out_channels();
      if (b + 1 < kBlockLayers.size()) {
        const std::size_t out = std::max<std::size_t>(1, channels / 2);
        transitions_.emplace_back("features.transition" + std::to_string(b + 1), channels, out, rng);
        channels = out;
      }
    }
    norm5_ = BatchNorm2d<T>("features.norm5", channels);
    classifier_ = Linear<T>("classifier", channels, spec.num_classes, rng);
  }

  Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng*) override {
    Tensor<T> h = maxpool2d(relu(norm0_(conv0_(input), mode)), 3, 2, 1);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = blocks_[b](h, mode);
      if (b < transitions_.size()) h = transitions_[b](h, mode);
    }
    h = relu(norm5_(h, mode));
    return classifier_(flatten(global_avgpool(h)));
  }

  std::vector<Parameter<T>> parameters() const override {
    std::vector<Parameter<T>> out;
    conv0_.collect(out);
    norm0_.collect(out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (const auto& l : blocks_[b].layers) l.collect(out);
      if (b < transitions_.size()) {
        transitions_[b].norm.collect(out);
        transitions_[b].conv.collect(out);
      }
    }
    norm5_.collect(out);
    classifier_.collect(out);
    return out;
  }
  std::vector<Parameter<T>> buffers() const override {
    std::vector<Parameter<T>> out;
    norm0_.collect_buffers(out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (const auto& l : blocks_[b].layers) l.collect_buffers(out);
      if (b < transitions_.size()) transitions_[b].norm.collect_buffers(out);
    }
    norm5_.collect_buffers(out);
    return out;
  }

  std::vector<std::string> head_names() const override { return {"classifier.weight", "classifier.bias"}; }

  void replace_head(std::size_t num_classes, Rng& rng) override {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    classifier_ = Linear<T>("classifier", classifier_.in_features(), num_classes, rng);
    spec_.num_classes = num_classes;
  }

  LayerCensus census() const override {
    LayerCensus c{1, 1, 2};
    for (const auto& b : blocks_) {
      c.conv += 2 * b.layers.size();
      c.batchnorm += 2 * b.layers.size();
    }
    c.conv += transitions_.size();
    c.batchnorm += transitions_.size();
    return c;
  }
  std::string name() const override { return "densenet121"; }

  const std::vector<DenseBlock<T>>& blocks() const { return blocks_; }
  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
  Conv2d<T> conv0_;
  BatchNorm2d<T> norm0_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<Transition<T>> transitions_;
  BatchNorm2d<T> norm5_;
  Linear<T> classifier_;
};

}  // namespace mcompat::nn
