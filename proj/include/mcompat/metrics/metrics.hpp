#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcompat/error.hpp"

namespace mcompat::metrics {

enum class Label { incompatible = 0, compatible = 1 };

inline std::string label_name(Label l) { return l == Label::compatible ? "compatible" : "incompatible"; }

/// Exact non-negative fraction, kept reduced.
struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Rational of(std::uint64_t n, std::uint64_t d) {
    if (d == 0) throw UsageError("Rational: zero denominator");
    const auto g = std::gcd(n, d);
    return g ? Rational{n / g, d / g} : Rational{0, 1};
  }
  double value() const { return double(num) / double(den); }

  // 100 * value in hundredths, rounded half-up.
  std::uint64_t percent_hundredths() const {
    const unsigned __int128 scaled = static_cast<unsigned __int128>(num) * 20000u + den;
    return std::uint64_t(scaled / (static_cast<unsigned __int128>(den) * 2u));
  }
  // "94.02" style rendering of the percentage.
  std::string percent_str() const {
    const auto h = percent_hundredths();
    std::string frac = std::to_string(h % 100);
    if (frac.size() < 2) frac.insert(0, 1, '0');
    return std::to_string(h / 100) + "." + frac;
  }
  friend bool operator==(const Rational& a, const Rational& b) { return a.num == b.num && a.den == b.den; }
};

// Positive class = compatible.
struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t positives() const { return tp + fn; }
  std::uint64_t negatives() const { return tn + fp; }
  std::uint64_t total() const { return positives() + negatives(); }

  void add(Label truth, Label decision) {
    if (truth == Label::compatible)
      (decision == Label::compatible ? tp : fn) += 1;
    else
      (decision == Label::compatible ? fp : tn) += 1;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_from_predictions(std::span<const Label> labels, std::span<const Label> decisions) {
  if (labels.size() != decisions.size())
    throw UsageError("confusion_from_predictions: " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(decisions.size()) + " decisions");
  if (labels.empty()) throw UsageError("confusion_from_predictions: no predictions");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], decisions[i]);
  return cm;
}

/// Each metric is empty when its denominator is zero.
struct MetricsReport {
  std::optional<Rational> accuracy, precision, recall, specificity, f1;

  static std::string render(const std::optional<Rational>& r) { return r ? r->percent_str() : "undefined"; }
};

inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UsageError("compute_metrics: empty confusion matrix");
  MetricsReport r;
  auto frac = [](std::uint64_t n, std::uint64_t d) -> std::optional<Rational> {
    if (d == 0) return std::nullopt;
    return Rational::of(n, d);
  };
  r.accuracy = frac(cm.tp + cm.tn, cm.total());
  r.precision = frac(cm.tp, cm.tp + cm.fp);
  r.recall = frac(cm.tp, cm.tp + cm.fn);
  r.specificity = frac(cm.tn, cm.tn + cm.fp);
  // 2PR/(P+R) = 2TP / (2TP + FP + FN), defined when both P and R are
  if (r.precision && r.recall) r.f1 = frac(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
  if (r.f1 && r.f1->num == 0 && r.precision->num == 0 && r.recall->num == 0) r.f1.reset();
  return r;
}

/// Softmax two-class reading of a logit pair (index 0 incompatible, 1 compatible).
struct CompatPrediction {
  double logit_incompatible = 0;
  double logit_compatible = 0;
  double p_incompatible = 0.5;
  Label decision = Label::incompatible;
};

inline CompatPrediction compat_criterion(double z_inc, double z_comp) {
  if (!std::isfinite(z_inc) || !std::isfinite(z_comp))
    throw UsageError("compat_criterion: non-finite logit");
  CompatPrediction p;
  p.logit_incompatible = z_inc;
  p.logit_compatible = z_comp;
  // e^a / (e^a + e^b) = 1 / (1 + e^(b - a)), evaluated on the side that cannot overflow
  const double d = z_comp - z_inc;
  if (d <= 0) {
    p.p_incompatible = 1.0 / (1.0 + std::exp(d));
  } else {
    const double e = std::exp(-d);
    p.p_incompatible = e / (1.0 + e);
  }
  p.decision = z_inc >= z_comp ? Label::incompatible : Label::compatible;
  return p;
}

// ln(p_incompatible / (1 - p_incompatible)), exact where p itself saturates.
inline double incompatibility_log_odds(const CompatPrediction& p) {
  return p.logit_incompatible - p.logit_compatible;
}

}  // namespace mcompat::metrics
