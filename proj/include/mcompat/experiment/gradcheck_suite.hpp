#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mcompat/nn/architectures.hpp"
#include "mcompat/tensor/gradcheck.hpp"

namespace mcompat {

namespace detail {

inline Tensor<double> gc_random(Dims dims, std::uint64_t seed, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(dims));
  std::mt19937_64 rng(seed);
  for (auto& v : t.mutable_data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Probe loss sum(out * w) with a fixed random w matched to out's dims.
inline Tensor<double> gc_probe(const Tensor<double>& out, std::uint64_t seed) {
  return weighted_sum(out, gc_random(out.dims(), seed ^ 0x5eedULL));
}

}  // namespace detail

struct GradcheckCase {
  std::string name;
  std::function<GradcheckResult(const GradcheckOptions&)> run;
};

/// One case per differentiable op (and per distinct kernel path).
inline std::vector<GradcheckCase> op_gradcheck_cases() {
  using detail::gc_probe;
  using detail::gc_random;
  std::vector<GradcheckCase> cases;
  auto simple = [&](std::string name, std::vector<Tensor<double>> ins,
                    std::function<Tensor<double>(const std::vector<Tensor<double>>&)> fn) {
    cases.push_back({name, [name, ins, fn](const GradcheckOptions& opt) {
                       return gradcheck(name, ins, [&] { return gc_probe(fn(ins), 77); }, opt);
                     }});
  };

  struct ConvCase {
    const char* tag;
    std::size_t c, h, o, k, s, p;
  };
  for (const ConvCase& cc : {ConvCase{"3x3 s1 p1", 2, 4, 2, 3, 1, 1}, ConvCase{"3x3 s1 p0", 2, 5, 2, 3, 1, 0},
                             ConvCase{"7x7 s2 p3", 1, 6, 2, 7, 2, 3}, ConvCase{"1x1 s1", 3, 3, 2, 1, 1, 0},
                             ConvCase{"1x1 s2", 3, 4, 2, 1, 2, 0}, ConvCase{"3x3 s2 p1", 2, 5, 2, 3, 2, 1}}) {
    simple(std::string("conv2d ") + cc.tag,
           {gc_random({1, cc.c, cc.h, cc.h}, 1), gc_random({cc.o, cc.c, cc.k, cc.k}, 2), gc_random({cc.o}, 3)},
           [cc](const auto& t) { return conv2d(t[0], t[1], t[2], cc.s, cc.p); });
  }
  simple("maxpool2d 2/2", {gc_random({1, 2, 4, 4}, 4)}, [](const auto& t) { return maxpool2d(t[0], 2, 2); });
  simple("maxpool2d 3/2 pad 1", {gc_random({1, 2, 5, 5}, 5)},
         [](const auto& t) { return maxpool2d(t[0], 3, 2, 1); });
  simple("avgpool2d 2/2", {gc_random({1, 2, 4, 4}, 6)}, [](const auto& t) { return avgpool2d(t[0], 2, 2); });
  simple("adaptive_avgpool 5x5->3x2", {gc_random({1, 2, 5, 5}, 7)},
         [](const auto& t) { return adaptive_avgpool(t[0], 3, 2); });
  simple("adaptive_avgpool 2x2->7x7", {gc_random({1, 2, 2, 2}, 8)},
         [](const auto& t) { return adaptive_avgpool(t[0], 7, 7); });
  simple("global_avgpool", {gc_random({2, 3, 3, 3}, 9)}, [](const auto& t) { return global_avgpool(t[0]); });
  simple("relu", {gc_random({4, 16}, 10)}, [](const auto& t) { return relu(t[0]); });
  simple("add", {gc_random({2, 3, 4}, 11), gc_random({2, 3, 4}, 12)},
         [](const auto& t) { return add(t[0], t[1]); });
  simple("linear", {gc_random({3, 5}, 13), gc_random({4, 5}, 14), gc_random({4}, 15)},
         [](const auto& t) { return linear(t[0], t[1], t[2]); });
  simple("concat_channels", {gc_random({1, 2, 2, 2}, 16), gc_random({1, 3, 2, 2}, 17), gc_random({1, 1, 2, 2}, 18)},
         [](const auto& t) { return concat_channels(t); });
  simple("flatten", {gc_random({2, 2, 2, 3}, 19)}, [](const auto& t) { return flatten(t[0]); });
  simple("sum", {gc_random({3, 4}, 20)}, [](const auto& t) { return sum(t[0]); });
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto rm = std::make_shared<Tensor<double>>(gc_random({3}, 21));
    auto rv = std::make_shared<Tensor<double>>(gc_random({3}, 22, 0.5, 2.0));
    simple(mode == Mode::train ? "batchnorm2d train" : "batchnorm2d eval",
           {gc_random({2, 3, 2, 3}, 23), gc_random({3}, 24, 0.5, 1.5), gc_random({3}, 25)},
           [rm, rv, mode](const auto& t) { return batchnorm2d(t[0], t[1], t[2], *rm, *rv, mode, 0.1, 1e-5); });
  }
  simple("dropout train", {gc_random({4, 8}, 26)}, [](const auto& t) {
    std::mt19937_64 rng(99);
    return dropout(t[0], 0.5, Mode::train, rng);
  });
  simple("log_softmax", {gc_random({3, 4}, 27, -3, 3)}, [](const auto& t) { return log_softmax(t[0]); });
  simple("nll_loss", {gc_random({4, 2}, 28, -3, 3)}, [](const auto& t) {
    const int targets[] = {1, 0, 0, 1};
    return nll_loss(log_softmax(t[0]), std::span<const int>(targets));
  });
  return cases;
}

/// Full-network check: every parameter tensor and the input are sampled,
/// train mode (batch statistics, fixed dropout mask).
inline GradcheckResult architecture_gradcheck(nn::Family family, nn::Ratio width, std::size_t spatial,
                                              std::size_t samples_per_tensor, const GradcheckOptions& base) {
  nn::ModelSpec spec;
  spec.family = family;
  spec.width = width;
  auto model = nn::build_model<double>(spec, 1234);
  auto x = detail::gc_random({1, 3, spatial, spatial}, 4321, 0, 1);
  std::vector<Tensor<double>> inputs{x};
  for (const auto& p : model->parameters()) inputs.push_back(p.value);
  auto w = detail::gc_random({1, spec.num_classes}, 555);
  GradcheckOptions opt = base;
  opt.samples_per_tensor = samples_per_tensor;
  return gradcheck(std::string(nn::family_name(family)), inputs,
                   [&] {
                     nn::Rng rng(2024);
                     return weighted_sum(model->forward(x, Mode::train, &rng), w);
                   },
                   opt);
}

}  // namespace mcompat
