#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "mcompat/data/image.hpp"
#include "mcompat/nn/architectures.hpp"
#include "mcompat/nn/weights.hpp"
#include "mcompat/optim/adam.hpp"
#include "support/layer_table.hpp"

using namespace mcompat;
using namespace mcompat::nn;
using namespace layer_table;

namespace {

ModelSpec spec_of(Family f, Ratio width = {1, 1}, std::size_t classes = 2) {
  ModelSpec s;
  s.family = f;
  s.width = width;
  s.num_classes = classes;
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mcompat_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

template <class T>
std::vector<std::vector<T>> state_values(const Model<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.state()) out.push_back(p.value.values());
  return out;
}

}  // namespace

TEST(LayerTable, PublishedFullWidthCounts) {
  // torchvision ImageNet counts, and the same tables with a 2-way head
  EXPECT_EQ(vgg16_table(1, 1, 1000), 138357544u);
  EXPECT_EQ(resnet18_table(1, 1, 1000), 11689512u);
  EXPECT_EQ(densenet121_table(1, 1, 1000), 7978856u);
  EXPECT_EQ(vgg16_table(1, 1, 2), 134268738u);
  EXPECT_EQ(resnet18_table(1, 1, 2), 11177538u);
  EXPECT_EQ(densenet121_table(1, 1, 2), 6955906u);
}

TEST(ParamCount, MatchesLayerTableAtSeveralWidths) {
  for (Ratio r : {Ratio{1, 1}, Ratio{1, 4}, Ratio{1, 8}}) {
    EXPECT_EQ(count_params(*build_vgg16(spec_of(Family::vgg16, r), 1)), vgg16_table(r.num, r.den, 2));
    EXPECT_EQ(count_params(*build_resnet18(spec_of(Family::resnet18, r), 1)), resnet18_table(r.num, r.den, 2));
    EXPECT_EQ(count_params(*build_densenet121(spec_of(Family::densenet121, r), 1)),
              densenet121_table(r.num, r.den, 2));
  }
}

TEST(ParamCount, DenseNetSmallerThanResNetAndDeterministic) {
  auto d = build_model(spec_of(Family::densenet121), 1);
  auto r = build_model(spec_of(Family::resnet18), 1);
  EXPECT_LT(count_params(*d), count_params(*r));
  EXPECT_EQ(count_params(*d), count_params(*build_model(spec_of(Family::densenet121), 2)));
}

TEST(Vgg16, CensusAndShape) {
  auto m = build_vgg16(spec_of(Family::vgg16, {1, 8}), 3);
  const auto c = m->census();
  EXPECT_EQ(c.conv, 13u);
  EXPECT_EQ(c.fc, 3u);
  Rng rng(1);
  NoGradGuard g;
  EXPECT_EQ(m->forward(Tensor<float>::ones({1, 3, 256, 256}), Mode::eval, nullptr).dims(), (Dims{1, 2}));
  EXPECT_EQ(m->forward(Tensor<float>::ones({2, 3, 64, 64}), Mode::train, &rng).dims(), (Dims{2, 2}));
  EXPECT_THROW(m->forward(Tensor<float>::ones({1, 3, 64, 64}), Mode::train, nullptr), UsageError);
}

TEST(Builders, RejectWrongFamilyAndBadSpec) {
  EXPECT_THROW(build_vgg16(spec_of(Family::resnet18), 0), ConfigError);
  EXPECT_THROW(build_resnet18(spec_of(Family::densenet121), 0), ConfigError);
  EXPECT_THROW(build_densenet121(spec_of(Family::vgg16), 0), ConfigError);
  EXPECT_THROW(build_model(spec_of(Family::vgg16, {1, 1}, 1), 0), ConfigError);
  EXPECT_THROW(parse_ratio("3/2"), ConfigError);
  EXPECT_EQ(parse_ratio("0.25").den, 4u);
  EXPECT_EQ(parse_ratio("1/8").den, 8u);
}

TEST(ResNet18, ShapeAndProjectionLayout) {
  auto m = build_resnet18(spec_of(Family::resnet18, {1, 8}), 4);
  NoGradGuard g;
  EXPECT_EQ(m->forward(Tensor<float>::ones({1, 3, 256, 256}), Mode::eval, nullptr).dims(), (Dims{1, 2}));
  std::vector<bool> proj;
  for (const auto& b : m->blocks()) {
    proj.push_back(b.spec.has_projection_shortcut());
    EXPECT_EQ(b.proj.has_value(), b.spec.has_projection_shortcut());
  }
  EXPECT_EQ(proj, (std::vector<bool>{false, false, true, false, true, false, true, false}));
  EXPECT_TRUE((ResidualBlockSpec{8, 16, 1}.has_projection_shortcut()));
  EXPECT_FALSE((ResidualBlockSpec{8, 8, 1}.has_projection_shortcut()));
}

TEST(ResNet18, ZeroBranchIsShortcutOnly) {
  auto md = build_resnet18<double>(spec_of(Family::resnet18, {1, 8}), 5);
  for (const auto& b : md->blocks()) {
    std::vector<Parameter<double>> branch;
    b.collect_branch(branch);
    for (auto& p : branch) std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.0);
  }
  std::mt19937_64 rng(6);
  Tensor<double> x({2, 3, 64, 64});
  for (auto& v : x.mutable_data()) v = mcompat::detail::uniform01(rng);
  NoGradGuard g;
  for (Mode mode : {Mode::eval, Mode::train}) {
    const auto full = md->forward(x, mode, nullptr);
    Tensor<double> h = md->stem(x, mode);
    for (const auto& b : md->blocks()) h = relu(b.shortcut(h, mode));
    const auto shortcut_only = md->head(h);
    EXPECT_EQ(full.values(), shortcut_only.values());
  }
  // identity blocks pass non-negative input through unchanged
  const auto& identity_block = md->blocks()[1];
  Tensor<double> nonneg({1, identity_block.spec.in_channels, 8, 8});
  for (auto& v : nonneg.mutable_data()) v = mcompat::detail::uniform01(rng);
  EXPECT_EQ(identity_block(nonneg, Mode::eval).values(), nonneg.values());
}

TEST(DenseNet121, ChannelArithmeticAndConnectivity) {
  auto m = build_densenet121(spec_of(Family::densenet121), 7);
  ASSERT_EQ(m->blocks().size(), 4u);
  EXPECT_EQ(m->blocks()[0].spec.in_channels, 64u);
  EXPECT_EQ(m->blocks()[0].spec.out_channels(), 64u + 6 * 32);
  EXPECT_EQ(m->blocks()[0].spec.out_channels(), 256u);
  EXPECT_EQ(m->blocks()[3].spec.out_channels(), 1024u);
  for (std::size_t L : {6u, 12u, 24u, 16u}) EXPECT_EQ((DenseBlockSpec{64, L, 32, 4}.connection_count()), L * (L + 1) / 2);

  auto small = build_densenet121(spec_of(Family::densenet121, {1, 8}), 7);
  NoGradGuard g;
  EXPECT_EQ(small->forward(Tensor<float>::ones({1, 3, 256, 256}), Mode::eval, nullptr).dims(), (Dims{1, 2}));
  for (const auto& block : small->blocks()) {
    const auto& counts = block.last_input_counts;
    ASSERT_EQ(counts.size(), block.spec.num_layers);
    std::size_t total = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      EXPECT_EQ(counts[j], j + 1);
      total += counts[j];
    }
    EXPECT_EQ(total, block.spec.connection_count());
  }
  const auto c = small->census();
  EXPECT_EQ(c.conv, 120u);
  EXPECT_EQ(c.fc, 1u);
}

TEST(ReplaceHead, ThousandToTwoOnVgg16) {
  auto m = build_vgg16(spec_of(Family::vgg16, {1, 1}, 1000), 8);
  const auto before = count_params(*m);
  EXPECT_EQ(before, 138357544u);
  std::vector<std::vector<float>> body;
  for (const auto& p : m->parameters())
    if (p.name.rfind("classifier.6", 0) != 0) body.push_back(p.value.values());
  replace_head(*m, 2, 9);
  const long delta = long(count_params(*m)) - long(before);
  EXPECT_EQ(delta, -(4096L * 1000 + 1000) + (4096L * 2 + 2));
  std::size_t i = 0;
  for (const auto& p : m->parameters())
    if (p.name.rfind("classifier.6", 0) != 0) {
      EXPECT_EQ(p.value.values(), body[i++]) << p.name;
    }
}

TEST(ReplaceHead, SameWidthKeepsCountAndBody) {
  for (Family f : {Family::vgg16, Family::resnet18, Family::densenet121}) {
    auto m = build_model(spec_of(f, {1, 8}), 10);
    const auto before = state_values(*m);
    const auto head = m->head_names();
    const auto n = count_params(*m);
    replace_head(*m, 2, 11);
    EXPECT_EQ(count_params(*m), n);
    const auto after = state_values(*m);
    const auto names = m->state();
    for (std::size_t i = 0; i < names.size(); ++i)
      if (std::find(head.begin(), head.end(), names[i].name) == head.end()) {
        EXPECT_EQ(after[i], before[i]);
      }
  }
}

TEST(Names, UniqueAcrossState) {
  for (Family f : {Family::vgg16, Family::resnet18, Family::densenet121}) {
    auto m = build_model(spec_of(f, {1, 8}), 12);
    std::set<std::string> seen;
    for (const auto& p : m->state()) EXPECT_TRUE(seen.insert(p.name).second) << p.name;
  }
}

TEST(Trainable, PoliciesAndFrozenAfterStep) {
  auto m = build_model(spec_of(Family::resnet18, {1, 8}), 13);
  set_trainable(*m, TrainPolicy::head_only);
  std::vector<std::string> trainable;
  for (const auto& p : m->parameters())
    if (p.trainable()) trainable.push_back(p.name);
  EXPECT_EQ(trainable, m->head_names());

  const auto before = state_values(*m);
  auto params = m->parameters();
  optim::AdamState<double> st;
  std::mt19937_64 rng(14);
  Tensor<float> x({2, 3, 64, 64});
  for (auto& v : x.mutable_data()) v = float(mcompat::detail::uniform01(rng));
  const int labels[] = {0, 1};
  backward(nll_loss(log_softmax(m->forward(x, Mode::train, nullptr)), std::span<const int>(labels)));
  adam_step(params, st);
  const auto after = state_values(*m);
  const auto names = m->state();
  const auto head = m->head_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const bool is_head = std::find(head.begin(), head.end(), names[i].name) != head.end();
    if (is_head) {
      EXPECT_NE(after[i], before[i]) << names[i].name;
    } else if (names[i].name.find("running_") == std::string::npos) {
      EXPECT_EQ(after[i], before[i]) << names[i].name;
    }
  }

  set_trainable(*m, TrainPolicy::all);
  for (const auto& p : m->parameters()) EXPECT_TRUE(p.trainable());
}

TEST(Weights, RoundTripBitExactAndByName) {
  auto a = build_model(spec_of(Family::densenet121, {1, 8}), 15);
  const auto path = temp_path("dense.mcwt");
  save_weights(*a, path);
  auto b = build_model(spec_of(Family::densenet121, {1, 8}), 16);
  EXPECT_NE(state_values(*a), state_values(*b));
  const auto report = load_weights(*b, path, true);
  EXPECT_TRUE(report.missing.empty());
  EXPECT_TRUE(report.mismatched.empty());
  EXPECT_TRUE(report.unexpected.empty());
  EXPECT_EQ(state_values(*a), state_values(*b));

  // file order does not matter
  auto store = read_weight_file(path);
  std::reverse(store.entries.begin(), store.entries.end());
  auto c = build_model(spec_of(Family::densenet121, {1, 8}), 17);
  apply_weights(*c, store, true);
  EXPECT_EQ(state_values(*a), state_values(*c));

  // save -> load -> save is byte-identical
  const auto path2 = temp_path("dense2.mcwt");
  save_weights(*b, path2);
  EXPECT_EQ(mcompat::data::detail::read_bytes(path), mcompat::data::detail::read_bytes(path2));
}

TEST(Weights, ExactByteLayout) {
  WeightStore s;
  s.add("ab", Tensor<float>({2}, {1.0f, -2.0f}));
  const auto bytes = encode_weights(s);
  const std::vector<std::uint8_t> head{'M', 'C', 'W', 'T', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b', 1, 2, 0, 0, 0, 0,
                                       0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  ASSERT_EQ(bytes.size(), head.size() + 4);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), bytes.begin()));
  const auto crc = crc32_of(bytes.data(), head.size());
  for (int i = 0; i < 4; ++i) EXPECT_EQ(bytes[head.size() + std::size_t(i)], std::uint8_t(crc >> (8 * i)));
}

TEST(Weights, CrcCatchesEverySingleByteCorruption) {
  WeightStore s;
  s.add("w", Tensor<float>({3, 2}, {1, 2, 3, 4, 5, 6}));
  s.add("layer.bias", Tensor<float>({2}, {0.5f, -0.25f}));
  const auto bytes = encode_weights(s);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    for (int delta : {1, 0x80, 0xff}) {
      auto bad = bytes;
      bad[i] = std::uint8_t(bad[i] + delta);
      EXPECT_THROW(decode_weights(bad), FormatError) << "byte " << i << " delta " << delta;
    }
}

TEST(Weights, HeadChangeReportsExactlyTheHead) {
  auto big = build_model(spec_of(Family::vgg16, {1, 8}, 1000), 18);
  const auto path = temp_path("vgg1000.mcwt");
  save_weights(*big, path);
  auto small = build_model(spec_of(Family::vgg16, {1, 8}, 2), 19);
  const auto before = state_values(*small);
  EXPECT_THROW(load_weights(*small, path, true), LoadError);
  EXPECT_EQ(state_values(*small), before);

  const auto report = load_weights(*small, path, false);
  auto skipped = report.skipped();
  std::sort(skipped.begin(), skipped.end());
  auto head = small->head_names();
  std::sort(head.begin(), head.end());
  EXPECT_EQ(skipped, head);
  EXPECT_TRUE(report.unexpected.empty());
  EXPECT_EQ(report.loaded.size(), small->state().size() - head.size());
}

TEST(Weights, FormatErrorsLeaveModelUnchanged) {
  auto m = build_model(spec_of(Family::resnet18, {1, 8}), 20);
  const auto path = temp_path("res.mcwt");
  save_weights(*m, path);
  auto bytes = mcompat::data::detail::read_bytes(path);
  auto target = build_model(spec_of(Family::resnet18, {1, 8}), 21);
  const auto before = state_values(*target);

  const auto truncated = temp_path("res_trunc.mcwt");
  std::ofstream(truncated, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 1000);
  EXPECT_THROW(load_weights(*target, truncated, false), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_weights(magic), FormatError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(decode_weights(version), FormatError);

  std::mt19937_64 rng(22);
  for (int k = 0; k < 50; ++k) {
    auto bad = bytes;
    bad[std::size_t(mcompat::detail::uniform01(rng) * double(bad.size()))] ^= 0x10;
    EXPECT_THROW(decode_weights(bad), FormatError);
  }
  EXPECT_EQ(state_values(*target), before);
}
