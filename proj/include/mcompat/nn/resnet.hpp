#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mcompat/nn/model.hpp"

namespace mcompat::nn {

struct ResidualBlockSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;

  bool has_projection_shortcut() const { return stride != 1 || in_channels != out_channels; }
};

// conv-BN-ReLU-conv-BN on the residual branch, added to the (optionally
// projected) input, then ReLU: relu(F(x) + shortcut(x)).
template <class T>
struct BasicBlock {
  ResidualBlockSpec spec;
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> proj;
  std::optional<BatchNorm2d<T>> proj_bn;

  BasicBlock(const std::string& name, ResidualBlockSpec s, Rng& rng)
      : spec(s),
        conv1(name + ".conv1", s.in_channels, s.out_channels, 3, s.stride, 1, false, rng),
        conv2(name + ".conv2", s.out_channels, s.out_channels, 3, 1, 1, false, rng),
        bn1(name + ".bn1", s.out_channels),
        bn2(name + ".bn2", s.out_channels) {
    if (s.has_projection_shortcut()) {
      proj.emplace(name + ".downsample.0", s.in_channels, s.out_channels, 1, s.stride, 0, false, rng);
      proj_bn.emplace(name + ".downsample.1", s.out_channels);
    }
  }

  Tensor<T> residual(const Tensor<T>& x, Mode mode) const {
    return bn2(conv2(relu(bn1(conv1(x), mode))), mode);
  }
  Tensor<T> shortcut(const Tensor<T>& x, Mode mode) const {
    return proj ? (*proj_bn)((*proj)(x), mode) : x;
  }
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return relu(add(residual(x, mode), shortcut(x, mode)));
  }

  // Parameters of F(x) only (branch, not shortcut).
  void collect_branch(std::vector<Parameter<T>>& out) const {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
  }
  void collect(std::vector<Parameter<T>>& out) const {
    collect_branch(out);
    if (proj) {
      proj->collect(out);
      proj_bn->collect(out);
    }
  }
  void collect_buffers(std::vector<Parameter<T>>& out) const {
    bn1.collect_buffers(out);
    bn2.collect_buffers(out);
    if (proj_bn) proj_bn->collect_buffers(out);
  }
};

// ResNet18: 7x7/2 stem, 3x3/2 max pool, four stages of two basic blocks,
// global average pooling and a linear head.
template <class T>
class ResNet18 final : public Model<T> {
 public:
  static constexpr std::array<std::size_t, 4> kStageChannels{64, 128, 256, 512};

  ResNet18(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    spec.validate();
    if (spec.family != Family::resnet18) throw ConfigError("ResNet18 built from a non-resnet18 spec");
    const std::size_t stem = spec.width.scale(64);
    conv1_ = Conv2d<T>("conv1", spec.input_channels, stem, 7, 2, 3, false, rng);
    bn1_ = BatchNorm2d<T>("bn1", stem);
    std::size_t in = stem;
    for (std::size_t s = 0; s < kStageChannels.size(); ++s) {
      const std::size_t out = spec.width.scale(kStageChannels[s]);
      for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back("layer" + std::to_string(s + 1) + "." + std::to_string(b),
                             ResidualBlockSpec{in, out, stride}, rng);
        in = out;
      }
    }
    fc_ = Linear<T>("fc", in, spec.num_classes, rng);
  }

  Tensor<T> stem(const Tensor<T>& x, Mode mode) const {
    return maxpool2d(relu(bn1_(conv1_(x), mode)), 3, 2, 1);
  }
  Tensor<T> head(const Tensor<T>& features) const { return fc_(flatten(global_avgpool(features))); }

  Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng*) override {
    Tensor<T> h = stem(input, mode);
    for (const auto& b : blocks_) h = b(h, mode);
    return head(h);
  }

  std::vector<Parameter<T>> parameters() const override {
    std::vector<Parameter<T>> out;
    conv1_.collect(out);
    bn1_.collect(out);
    for (const auto& b : blocks_) b.collect(out);
    fc_.collect(out);
    return out;
  }
  std::vector<Parameter<T>> buffers() const override {
    std::vector<Parameter<T>> out;
    bn1_.collect_buffers(out);
    for (const auto& b : blocks_) b.collect_buffers(out);
    return out;
  }

  std::vector<std::string> head_names() const override { return {"fc.weight", "fc.bias"}; }

  void replace_head(std::size_t num_classes, Rng& rng) override {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    fc_ = Linear<T>("fc", fc_.in_features(), num_classes, rng);
    spec_.num_classes = num_classes;
  }

  LayerCensus census() const override {
    LayerCensus c{1, 1, 1};
    for (const auto& b : blocks_) {
      c.conv += b.proj ? 3 : 2;
      c.batchnorm += b.proj ? 3 : 2;
    }
    return c;
  }
  std::string name() const override { return "resnet18"; }

  const std::vector<BasicBlock<T>>& blocks() const { return blocks_; }
  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  std::vector<BasicBlock<T>> blocks_;
  Linear<T> fc_;
};

}  // namespace mcompat::nn
