#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mcompat/optim/train.hpp"
#include "mcompat/tensor/gradcheck.hpp"

using namespace mcompat;
using namespace mcompat::optim;

namespace {

// Flattens the whole input into one linear layer: logistic regression on pixels.
template <class T>
class PixelLogit final : public nn::Model<T> {
 public:
  PixelLogit(std::size_t features, std::uint64_t seed) {
    nn::Rng rng(seed);
    fc_ = nn::Linear<T>("fc", features, 2, rng);
  }
  Tensor<T> forward(const Tensor<T>& x, Mode, nn::Rng*) override { return fc_(flatten(x)); }
  std::vector<nn::Parameter<T>> parameters() const override {
    std::vector<nn::Parameter<T>> out;
    fc_.collect(out);
    return out;
  }
  std::vector<std::string> head_names() const override { return {"fc.weight", "fc.bias"}; }

 private:
  nn::Linear<T> fc_;
};

nn::Parameter<double> scalar_param(double v) {
  nn::Parameter<double> p{"p", Tensor<double>({1}, {v})};
  p.value.set_requires_grad();
  return p;
}

void set_grad(nn::Parameter<double>& p, double g) {
  p.value.zero_grad();
  backward(weighted_sum(p.value, Tensor<double>({1}, {g})));
}

// Two pixels per image; compatible iff x1 + x2 > 255.
data::Dataset toy_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  data::Dataset ds;
  while (ds.size() < n) {
    const int a = px(rng), b = px(rng);
    if (std::abs(a + b - 255) < 20) continue;
    data::ImageBuffer img(2, 1);
    img.at(0, 0) = std::uint8_t(a);
    img.at(1, 0) = std::uint8_t(b);
    ds.add(img, a + b > 255 ? metrics::Label::compatible : metrics::Label::incompatible);
  }
  return ds;
}

}  // namespace

TEST(CrossEntropy, ProbabilityForm) {
  const int one[] = {1};
  const double near_one[] = {1 - 1e-12};
  EXPECT_NEAR(cross_entropy(one, near_one), 0.0, 1e-11);
  const double half[] = {0.5};
  EXPECT_NEAR(cross_entropy(one, half), std::log(2.0), 1e-15);
  const int ys[] = {1, 0};
  const double ps[] = {0.9, 0.2};
  EXPECT_NEAR(cross_entropy(ys, ps), 0.164252033486018, 1e-14);
  const double exact[] = {1.0};
  EXPECT_GT(cross_entropy(one, exact), 0.0);
  EXPECT_THROW(cross_entropy(std::span<const int>{}, std::span<const double>{}), UsageError);
  const int bad[] = {2};
  EXPECT_THROW(cross_entropy(bad, half), UsageError);
}

TEST(CrossEntropy, LogitFormAgreesWithProbabilityForm) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> z(-4, 4);
  Tensor<double> logits({6, 2});
  for (auto& v : logits.mutable_data()) v = z(rng);
  const int ys[] = {1, 0, 0, 1, 1, 0};
  std::vector<double> p;
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = logits.data()[2 * i], b = logits.data()[2 * i + 1];
    p.push_back(std::exp(b) / (std::exp(a) + std::exp(b)));
  }
  const double from_logits = cross_entropy(logits, std::span<const int>(ys)).item();
  EXPECT_NEAR(from_logits, cross_entropy(ys, p), 1e-12);
  EXPECT_GE(from_logits, 0.0);

  const auto res = gradcheck("cross_entropy", {logits}, [&] { return cross_entropy(logits, std::span<const int>(ys)); });
  EXPECT_TRUE(res.passed) << res.max_rel_error;
  EXPECT_THROW(cross_entropy(logits, std::span<const int>{}), UsageError);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  std::vector<nn::Parameter<double>> ps{scalar_param(3.25)};
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) {
    set_grad(ps[0], 0.0);
    adam_step(ps, st);
  }
  EXPECT_EQ(ps[0].value.item(), 3.25);
  EXPECT_EQ(st.t, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> g(-5, 5);
  Tensor<double> theta({50});
  Tensor<double> grads({50});
  for (auto& v : grads.mutable_data()) v = g(rng);
  theta.set_requires_grad();
  std::vector<nn::Parameter<double>> ps{{"w", theta}};
  const auto start = theta.values();
  backward(weighted_sum(theta, grads));
  AdamState<double> st;
  st.config.lr = 1e-3;
  adam_step(ps, st);
  for (std::size_t i = 0; i < 50; ++i) {
    const double delta = theta.data()[i] - start[i];
    EXPECT_NEAR(std::abs(delta), 1e-3, 1e-3 * 1e-6);
    EXPECT_EQ(delta < 0, grads.data()[i] > 0);
  }
}

TEST(Adam, GradientThenNegatedGradient) {
  std::vector<nn::Parameter<double>> ps{scalar_param(1.0)};
  AdamState<double> st;
  st.config.lr = 1e-3;
  set_grad(ps[0], 0.5);
  adam_step(ps, st);
  EXPECT_NEAR(ps[0].value.item(), 0.99900000002, 1e-14);
  set_grad(ps[0], -0.5);
  adam_step(ps, st);
  EXPECT_NEAR(ps[0].value.item(), 0.9990526315978947, 1e-14);
  EXPECT_LT(ps[0].value.item(), 1.0);
}

TEST(Adam, FrozenParametersUntouchedAndMismatchRejected) {
  std::vector<nn::Parameter<double>> ps{scalar_param(1.0), scalar_param(2.0)};
  set_grad(ps[0], 1.0);
  set_grad(ps[1], 1.0);
  ps[1].value.set_requires_grad(false);
  AdamState<double> st;
  for (int i = 0; i < 10; ++i) adam_step(ps, st);
  EXPECT_EQ(ps[1].value.item(), 2.0);
  EXPECT_NE(ps[0].value.item(), 1.0);
  std::vector<nn::Parameter<double>> fewer{ps[0]};
  EXPECT_THROW(adam_step(fewer, st), UsageError);
}

TEST(TrainingLoop, SeparableToyReachesFullTrainAccuracy) {
  const auto train = toy_dataset(64, 3);
  const auto test = toy_dataset(32, 4);
  PixelLogit<float> model(6, 5);
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.batch_size = 8;
  cfg.adam.lr = 3e-2;
  cfg.seed = 6;
  const auto out = training_loop(model, train, test, cfg);
  ASSERT_EQ(out.log.epochs.size(), 100u);
  bool reached = false;
  for (const auto& r : out.log.epochs) reached = reached || r.train_acc == 1.0;
  EXPECT_TRUE(reached);
  double best = 0;
  for (const auto& r : out.log.epochs) best = std::max(best, r.test_acc);
  EXPECT_EQ(out.log.best_test_acc, best);
  EXPECT_GE(out.log.best_epoch, 1u);
}

TEST(TrainingLoop, ZeroLearningRateChangesNothing) {
  const auto train = toy_dataset(20, 7);
  const auto test = toy_dataset(10, 8);
  PixelLogit<float> model(6, 9);
  const auto before = model.parameters()[0].value.values();
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 6;
  cfg.adam.lr = 0;
  const auto out = training_loop(model, train, test, cfg);
  EXPECT_EQ(model.parameters()[0].value.values(), before);
  for (const auto& r : out.log.epochs) {
    EXPECT_EQ(r.train_acc, out.log.epochs[0].train_acc);
    EXPECT_EQ(r.test_acc, out.log.epochs[0].test_acc);
  }
}

TEST(TrainingLoop, DeterministicAndBestSnapshotMatches) {
  const auto train = toy_dataset(30, 10);
  const auto test = toy_dataset(12, 11);
  auto run = [&](PixelLogit<float>& m) {
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 4;
    cfg.adam.lr = 1e-2;
    cfg.seed = 12;
    return training_loop(m, train, test, cfg);
  };
  PixelLogit<float> a(6, 13), b(6, 13);
  const auto ra = run(a), rb = run(b);
  ASSERT_EQ(ra.log.epochs.size(), rb.log.epochs.size());
  for (std::size_t i = 0; i < ra.log.epochs.size(); ++i) {
    EXPECT_EQ(ra.log.epochs[i].train_loss, rb.log.epochs[i].train_loss);
    EXPECT_EQ(ra.log.epochs[i].test_acc, rb.log.epochs[i].test_acc);
  }
  EXPECT_EQ(nn::encode_weights(nn::snapshot(a)), nn::encode_weights(nn::snapshot(b)));

  PixelLogit<float> c(6, 99);
  nn::apply_weights(c, ra.best_weights, true);
  EXPECT_EQ(evaluate(c, test, {}).accuracy(), ra.log.best_test_acc);
}

TEST(TrainingLoop, RejectsEmptyDataAndNaN) {
  const auto some = toy_dataset(4, 14);
  PixelLogit<float> model(6, 15);
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(training_loop(model, data::Dataset{}, some, cfg), UsageError);
  EXPECT_THROW(training_loop(model, some, data::Dataset{}, cfg), UsageError);
  cfg.epochs = 0;
  EXPECT_THROW(training_loop(model, some, some, cfg), ConfigError);

  cfg.epochs = 1;
  cfg.batch_size = 2;
  auto params = model.parameters();
  params[1].value.mutable_data()[0] = NAN;
  try {
    training_loop(model, some, some, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
  }
}
