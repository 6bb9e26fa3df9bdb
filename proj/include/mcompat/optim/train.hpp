#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mcompat/data/dataset.hpp"
#include "mcompat/metrics/metrics.hpp"
#include "mcompat/nn/weights.hpp"
#include "mcompat/optim/adam.hpp"
#include "mcompat/optim/loss.hpp"

namespace mcompat::optim {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_acc = 0;  // running, train mode
  double test_acc = 0;
  std::size_t train_correct = 0, train_seen = 0;
  metrics::ConfusionMatrix test_confusion;
  double wall_ms = 0;
};

struct RunLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double best_test_acc = 0;
  std::size_t best_epoch = 0;
  metrics::ConfusionMatrix final_confusion;
  metrics::ConfusionMatrix best_confusion;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  AdamConfig adam;
  std::uint64_t seed = 0;
  data::Normalization norm;
  std::size_t eval_batch = 32;
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) throw ConfigError("learning_rate must be finite and >= 0");
    if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
  }
};

struct Evaluation {
  std::vector<std::array<double, 2>> logits;
  metrics::ConfusionMatrix confusion;

  double accuracy() const {
    const auto t = confusion.total();
    return t ? double(confusion.tp + confusion.tn) / double(t) : 0.0;
  }
};

inline metrics::Label argmax_label(double z_inc, double z_comp) {
  return metrics::compat_criterion(z_inc, z_comp).decision;
}

/// Eval-mode pass without graph recording.
template <class T>
Evaluation evaluate(nn::Model<T>& model, const data::Dataset& ds, const data::Normalization& norm,
                    std::size_t batch = 32) {
  NoGradGuard no_grad;
  Evaluation ev;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& idx : data::batch_iter(order, batch)) {
    const auto out = model.forward(data::to_tensor<T>(ds, idx, norm), Mode::eval, nullptr);
    if (out.rank() != 2 || out.dim(1) != 2) throw ShapeError("evaluate: model must emit N x 2 logits");
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double z0 = out.data()[2 * b], z1 = out.data()[2 * b + 1];
      if (!std::isfinite(z0) || !std::isfinite(z1))
        throw NumericalError("evaluate: non-finite logits for item " + std::to_string(idx[b]));
      ev.logits.push_back({z0, z1});
      ev.confusion.add(ds.label(idx[b]), argmax_label(z0, z1));
    }
  }
  return ev;
}

struct TrainOutcome {
  RunLog log;
  nn::WeightStore best_weights;
};

/// Mini-batch Adam on the cross-entropy of the compatible-class softmax.
/// Batches follow data::batch_iter(seed, epoch); dropout masks come from a
/// generator seeded from the same run seed, so a run is a pure function of
/// (model init, data, config).
template <class T>
TrainOutcome training_loop(nn::Model<T>& model, const data::Dataset& train, const data::Dataset& test,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw UsageError("training_loop: empty training set");
  if (test.empty()) throw UsageError("training_loop: empty test set");
  TrainOutcome out;
  out.log.seed = cfg.seed;
  auto params = model.parameters();
  AdamState<double> state;
  state.config = cfg.adam;
  nn::Rng dropout_rng(mcompat::detail::mix64(cfg.seed ^ 0x64726f70ULL));
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = data::batch_iter(train.size(), cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      const auto labels = data::class_indices(train, idx);
      for (auto& p : params) p.value.zero_grad();
      const auto logits = model.forward(data::to_tensor<T>(train, idx, cfg.norm), Mode::train, &dropout_rng);
      const auto loss = cross_entropy(logits, std::span<const int>(labels));
      const double lv = double(loss.item());
      if (!std::isfinite(lv))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi));
      backward(loss);
      adam_step(params, state);
      loss_sum += lv * double(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const bool pred_comp = logits.data()[2 * b + 1] > logits.data()[2 * b];
        correct += pred_comp == (labels[b] == kCompatible);
      }
      seen += idx.size();
    }
    const auto ev = evaluate(model, test, cfg.norm, cfg.eval_batch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(seen);
    rec.train_acc = double(correct) / double(seen);
    rec.test_acc = ev.accuracy();
    rec.train_correct = correct;
    rec.train_seen = seen;
    rec.test_confusion = ev.confusion;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out.log.epochs.push_back(rec);
    if (!have_best || rec.test_acc > out.log.best_test_acc) {
      have_best = true;
      out.log.best_test_acc = rec.test_acc;
      out.log.best_epoch = epoch;
      out.log.best_confusion = ev.confusion;
      out.best_weights = nn::snapshot(model);
    }
    out.log.final_confusion = ev.confusion;
    if (cfg.on_epoch) cfg.on_epoch(rec);
  }
  return out;
}

}  // namespace mcompat::optim
