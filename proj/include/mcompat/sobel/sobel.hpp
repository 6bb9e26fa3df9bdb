#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mcompat/data/image.hpp"
#include "mcompat/metrics/metrics.hpp"

namespace mcompat::sobel {

inline constexpr int kGx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
inline constexpr int kGy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
inline constexpr double kDefaultBoundary = 18.0;

// Planes cover the valid interior: (width - 2) x (height - 2).
template <class V>
struct SobelPlanes {
  std::size_t width = 0, height = 0;
  std::vector<V> gx, gy;
  std::vector<double> magnitude;
  double score = 0;  // mean of magnitude
};

using SobelResult = SobelPlanes<int>;

namespace detail {

template <class V, class Px>
SobelPlanes<V> filter(const Px* px, std::size_t w, std::size_t h) {
  if (w < 3 || h < 3)
    throw ShapeError("sobel_filter: image " + std::to_string(w) + "x" + std::to_string(h) + " is smaller than 3x3");
  SobelPlanes<V> r;
  r.width = w - 2;
  r.height = h - 2;
  const std::size_t n = r.width * r.height;
  r.gx.resize(n);
  r.gy.resize(n);
  r.magnitude.resize(n);
  double total = 0;
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x) {
      V sx = 0, sy = 0;
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
          const V v = V(px[(y + std::size_t(dy)) * w + x + std::size_t(dx)]);
          sx += V(kGx[dy][dx]) * v;
          sy += V(kGy[dy][dx]) * v;
        }
      const std::size_t i = y * r.width + x;
      r.gx[i] = sx;
      r.gy[i] = sy;
      r.magnitude[i] = std::sqrt(double(sx) * double(sx) + double(sy) * double(sy));
      total += r.magnitude[i];
    }
  r.score = total / double(n);
  return r;
}

}  // namespace detail

/// Valid-region Sobel response on 0-255 pixel values, integer arithmetic.
inline SobelResult sobel_filter(const data::ImageBuffer& img) {
  return detail::filter<int>(img.pixels.data(), img.width, img.height);
}

// Same filter on a real-valued plane.
inline SobelPlanes<double> sobel_filter(const std::vector<double>& plane, std::size_t width, std::size_t height) {
  if (plane.size() != width * height) throw ShapeError("sobel_filter: plane size differs from width x height");
  return detail::filter<double>(plane.data(), width, height);
}

inline double sobel_score(const data::ImageBuffer& img) { return sobel_filter(img).score; }

struct SobelDecision {
  metrics::Label decision;
  double score;
  double boundary;
};

// Strong edges mean phase separation: score >= boundary is incompatible.
inline SobelDecision classify_score(double score, double boundary) {
  return {score >= boundary ? metrics::Label::incompatible : metrics::Label::compatible, score, boundary};
}

inline SobelDecision sobel_classify(const data::ImageBuffer& img, double boundary = kDefaultBoundary) {
  return classify_score(sobel_score(img), boundary);
}

struct SweepRow {
  double boundary;
  metrics::ConfusionMatrix cm;
  metrics::MetricsReport report;
  bool best = false;
};

/// One row per boundary; the first boundary reaching the highest accuracy
/// is flagged.
inline std::vector<SweepRow> threshold_sweep(const std::vector<double>& scores,
                                             const std::vector<metrics::Label>& labels,
                                             const std::vector<double>& boundaries) {
  if (scores.empty()) throw UsageError("threshold_sweep: empty dataset");
  if (scores.size() != labels.size()) throw UsageError("threshold_sweep: score and label counts differ");
  std::vector<SweepRow> rows;
  std::optional<std::size_t> best;
  for (double b : boundaries) {
    metrics::ConfusionMatrix cm;
    for (std::size_t i = 0; i < scores.size(); ++i) cm.add(labels[i], classify_score(scores[i], b).decision);
    rows.push_back({b, cm, metrics::compute_metrics(cm)});
    const auto& acc = *rows.back().report.accuracy;
    if (!best || acc.num * rows[*best].report.accuracy->den > rows[*best].report.accuracy->num * acc.den)
      best = rows.size() - 1;
  }
  if (best) rows[*best].best = true;
  return rows;
}

// Every midpoint between sorted distinct scores, plus both extremes.
inline std::vector<double> candidate_boundaries(std::vector<double> scores) {
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> b{0.0};
  for (std::size_t i = 1; i < scores.size(); ++i) b.push_back(0.5 * (scores[i - 1] + scores[i]));
  b.push_back(std::numeric_limits<double>::infinity());
  return b;
}

}  // namespace mcompat::sobel
