#pragma once

#include <array>
#include <string>
#include <vector>

#include "mcompat/nn/model.hpp"

namespace mcompat::nn {

// VGG16: five 3x3 conv stacks (64x2, 128x2, 256x3, 512x3, 512x3), each
// followed by 2x2/2 max pooling, adaptive average pooling to 7x7 and a
// three-layer classifier. Parameter names follow the torchvision layout so
// ImageNet-shaped checkpoints map one-to-one.
template <class T>
class Vgg16 final : public Model<T> {
 public:
  static constexpr std::array<std::array<int, 3>, 5> kStages{{{64, 64, 0}, {128, 128, 0}, {256, 256, 256},
                                                              {512, 512, 512}, {512, 512, 512}}};
  static constexpr std::size_t kPoolOut = 7;
  static constexpr double kDropout = 0.5;

  Vgg16(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    spec.validate();
    if (spec.family != Family::vgg16) throw ConfigError("Vgg16 built from a non-vgg16 spec");
    std::size_t in = spec.input_channels;
    std::size_t index = 0;
    for (const auto& stage : kStages) {
      std::vector<std::size_t> conv_ids;
      for (int c : stage) {
        if (c == 0) continue;
        const std::size_t out = spec.width.scale(std::size_t(c));
        convs_.emplace_back("features." + std::to_string(index), in, out, 3, 1, 1, true, rng);
        conv_ids.push_back(convs_.size() - 1);
        index += 2;  // conv + relu
        in = out;
      }
      stages_.push_back(std::move(conv_ids));
      ++index;  // pool
    }
    const std::size_t hidden = spec.width.scale(4096);
    fc_[0] = Linear<T>("classifier.0", in * kPoolOut * kPoolOut, hidden, rng);
    fc_[1] = Linear<T>("classifier.3", hidden, hidden, rng);
    fc_[2] = Linear<T>("classifier.6", hidden, spec.num_classes, rng);
  }

  Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng* rng) override {
    Tensor<T> h = input;
    for (const auto& stage : stages_) {
      for (auto id : stage) h = relu(convs_[id](h));
      h = maxpool2d(h, 2, 2);
    }
    h = flatten(adaptive_avgpool(h, kPoolOut, kPoolOut));
    for (int i = 0; i < 2; ++i) {
      h = relu(fc_[i](h));
      if (mode == Mode::train) {
        if (!rng) throw UsageError("vgg16: train-mode forward needs a dropout generator");
        h = dropout(h, kDropout, mode, *rng);
      }
    }
    return fc_[2](h);
  }

  std::vector<Parameter<T>> parameters() const override {
    std::vector<Parameter<T>> out;
    for (const auto& c : convs_) c.collect(out);
    for (const auto& f : fc_) f.collect(out);
    return out;
  }

  std::vector<std::string> head_names() const override {
    return {fc_[2].name + ".weight", fc_[2].name + ".bias"};
  }

  void replace_head(std::size_t num_classes, Rng& rng) override {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    fc_[2] = Linear<T>(fc_[2].name, fc_[2].in_features(), num_classes, rng);
    spec_.num_classes = num_classes;
  }

  LayerCensus census() const override { return {convs_.size(), fc_.size(), 0}; }
  std::string name() const override { return "vgg16"; }
  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
  std::vector<Conv2d<T>> convs_;
  std::vector<std::vector<std::size_t>> stages_;
  std::array<Linear<T>, 3> fc_;
};

}  // namespace mcompat::nn
