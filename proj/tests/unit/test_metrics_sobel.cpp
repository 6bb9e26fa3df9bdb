#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mcompat/data/augment.hpp"
#include "mcompat/metrics/metrics.hpp"
#include "mcompat/sobel/sobel.hpp"

using namespace mcompat;
using namespace mcompat::metrics;
using mcompat::data::ImageBuffer;

namespace {

constexpr Label C = Label::compatible;
constexpr Label I = Label::incompatible;

ConfusionMatrix cm_of(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
  ConfusionMatrix cm;
  cm.tp = tp;
  cm.fp = fp;
  cm.fn = fn;
  cm.tn = tn;
  return cm;
}

ImageBuffer random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  ImageBuffer img(w, h);
  for (auto& p : img.pixels) p = std::uint8_t(px(rng));
  return img;
}

ImageBuffer flip_h(const ImageBuffer& img) {
  ImageBuffer out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.width - 1 - x, y) = img.at(x, y);
  return out;
}

ImageBuffer flip_v(const ImageBuffer& img) {
  ImageBuffer out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(x, img.height - 1 - y) = img.at(x, y);
  return out;
}

ImageBuffer transpose(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, x) = img.at(x, y);
  return out;
}

}  // namespace

TEST(Confusion, HandTally) {
  const Label labels[] = {C, C, I, I, I};
  const Label decisions[] = {C, I, I, I, C};
  const auto cm = confusion_from_predictions(labels, decisions);
  EXPECT_EQ(cm, cm_of(1, 1, 1, 2));
}

TEST(Confusion, AllCorrectAndInverted) {
  const std::vector<Label> labels{C, I, C, C, I, I, I};
  std::vector<Label> flipped;
  for (auto l : labels) flipped.push_back(l == C ? I : C);
  const auto good = confusion_from_predictions(labels, labels);
  EXPECT_EQ(good.fp, 0u);
  EXPECT_EQ(good.fn, 0u);
  const auto bad = confusion_from_predictions(labels, flipped);
  EXPECT_EQ(bad.tp, 0u);
  EXPECT_EQ(bad.fn, good.tp);
  EXPECT_EQ(bad.fp, good.tn);
  EXPECT_EQ(bad.tn, 0u);
}

TEST(Confusion, LengthMismatchAndEmpty) {
  const Label a[] = {C, I};
  const Label b[] = {C};
  EXPECT_THROW(confusion_from_predictions(a, b), UsageError);
  EXPECT_THROW(confusion_from_predictions({}, {}), UsageError);
  EXPECT_THROW(compute_metrics(ConfusionMatrix{}), UsageError);
}

TEST(Metrics, TableRowRendering) {
  const auto r = compute_metrics(cm_of(13, 3, 4, 97));
  EXPECT_EQ(r.accuracy->percent_str(), "94.02");
  EXPECT_EQ(r.precision->percent_str(), "81.25");
  EXPECT_EQ(r.recall->percent_str(), "76.47");
  EXPECT_EQ(r.specificity->percent_str(), "97.00");
  // 2*13 / (2*13 + 3 + 4) = 26/33 = 78.7878...%
  EXPECT_EQ(*r.f1, Rational::of(26, 33));
  EXPECT_EQ(r.f1->percent_str(), "78.79");
}

TEST(Metrics, PerfectAndUndefined) {
  const auto r = compute_metrics(cm_of(5, 0, 0, 7));
  for (const auto& m : {r.accuracy, r.precision, r.recall, r.specificity, r.f1}) EXPECT_EQ(*m, Rational::of(1, 1));
  const auto none = compute_metrics(cm_of(0, 0, 3, 9));
  EXPECT_FALSE(none.precision.has_value());
  EXPECT_FALSE(none.f1.has_value());
  EXPECT_EQ(*none.accuracy, Rational::of(9, 12));
  EXPECT_EQ(MetricsReport::render(none.precision), "undefined");
}

TEST(Metrics, RenderingRoundsHalfUp) {
  EXPECT_EQ(Rational::of(1, 8).percent_str(), "12.50");
  EXPECT_EQ(Rational::of(1, 3).percent_str(), "33.33");
  EXPECT_EQ(Rational::of(2, 3).percent_str(), "66.67");
  EXPECT_EQ(Rational::of(1, 80000).percent_str(), "0.00");
  EXPECT_EQ(Rational::of(1, 20000).percent_str(), "0.01");
  EXPECT_EQ(Rational::of(1, 20001).percent_str(), "0.00");
  EXPECT_EQ(Rational::of(0, 5).percent_str(), "0.00");
}

TEST(Metrics, PropertiesOverSmallMatrices) {
  for (std::uint64_t tp = 0; tp <= 6; ++tp)
    for (std::uint64_t fp = 0; fp <= 6; ++fp)
      for (std::uint64_t fn = 0; fn <= 6; ++fn)
        for (std::uint64_t tn = 0; tn <= 6; ++tn) {
          const auto cm = cm_of(tp, fp, fn, tn);
          if (cm.total() == 0) continue;
          const auto r = compute_metrics(cm);
          for (const auto& m : {r.accuracy, r.precision, r.recall, r.specificity, r.f1})
            if (m) {
              EXPECT_LE(m->num, m->den);
            }
          if (r.precision && r.recall && r.f1) {
            const double p = r.precision->value(), q = r.recall->value(), f = r.f1->value();
            EXPECT_NEAR(f, 2 * p * q / (p + q), 1e-12);
            EXPECT_LE(f, 2 * std::min(p, q) + 1e-12);
            EXPECT_GE(f, std::min(p, q) - 1e-12);
          }
          // accuracy = (precision (TP+FP) + specificity (TN+FP)) / total, exactly:
          // precision (TP+FP) = TP, specificity (TN+FP) = TN
          const std::uint64_t lhs_tp = r.precision ? r.precision->num * (tp + fp) / r.precision->den : 0;
          const std::uint64_t lhs_tn = r.specificity ? r.specificity->num * (tn + fp) / r.specificity->den : 0;
          EXPECT_EQ(Rational::of(lhs_tp + lhs_tn, cm.total()), *r.accuracy);
        }
}

TEST(Criterion, CaseStudyRows) {
  struct Row {
    double inc, comp;
    Label label;
  };
  const Row rows[] = {{0.08, -30, I}, {0.22, -47, I}, {0.48, -47, I}, {-0.29, -124, I},
                      {0.23, -67, I}, {0.16, -89, I}, {-41, 10, C},   {-32, 8, C}};
  double prev = 0, prev_odds = -INFINITY;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& r = rows[i];
    const auto p = compat_criterion(r.inc, r.comp);
    const long double ea = std::exp((long double)r.inc), eb = std::exp((long double)r.comp);
    const long double direct = ea / (ea + eb);
    EXPECT_NEAR(p.p_incompatible, double(direct), 1e-15) << i;
    EXPECT_EQ(p.decision, r.label) << i;
    if (i < 4) {
      EXPECT_GE(p.p_incompatible, prev);
      EXPECT_GT(incompatibility_log_odds(p), prev_odds);
      prev = p.p_incompatible;
      prev_odds = incompatibility_log_odds(p);
    }
  }
  const auto a1 = compat_criterion(0.08, -30);
  EXPECT_LT(1.0 - a1.p_incompatible, 1e-12);
  EXPECT_GT(1.0 - a1.p_incompatible, 0.0);
  const auto b4 = compat_criterion(-32, 8);
  EXPECT_LT(b4.p_incompatible, 1e-17);
  EXPECT_GT(b4.p_incompatible, 0.0);
  EXPECT_NEAR(b4.p_incompatible, std::exp(-40.0), 1e-30);
}

TEST(Criterion, SymmetryShiftAndComplement) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> z(-200, 200);
  for (double c : {-1e3, -2.5, 0.0, 7.0, 1e3}) EXPECT_EQ(compat_criterion(c, c).p_incompatible, 0.5);
  for (int k = 0; k < 1000; ++k) {
    const double a = z(rng), b = z(rng);
    const auto p = compat_criterion(a, b), q = compat_criterion(b, a);
    EXPECT_NEAR(p.p_incompatible + q.p_incompatible, 1.0, 1e-12);
    EXPECT_EQ(p.decision, a >= b ? I : C);
    EXPECT_EQ(p.decision == I, p.p_incompatible >= 0.5);
    const double shift = z(rng);
    EXPECT_NEAR(compat_criterion(a + shift, b + shift).p_incompatible, p.p_incompatible, 1e-12);
  }
  EXPECT_THROW(compat_criterion(NAN, 0), UsageError);
  EXPECT_THROW(compat_criterion(0, INFINITY), UsageError);
}

TEST(Sobel, MatchesDirectConvolution) {
  const int gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const int gy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t w = 3 + seed % 17, h = 3 + (seed * 7) % 13;
    const auto img = random_image(w, h, seed);
    const auto res = sobel::sobel_filter(img);
    ASSERT_EQ(res.width, w - 2);
    ASSERT_EQ(res.height, h - 2);
    double total = 0;
    for (std::size_t y = 0; y + 2 < h; ++y)
      for (std::size_t x = 0; x + 2 < w; ++x) {
        long sx = 0, sy = 0;
        for (int j = 0; j < 3; ++j)
          for (int i = 0; i < 3; ++i) {
            sx += gx[j][i] * img.at(x + std::size_t(i), y + std::size_t(j));
            sy += gy[j][i] * img.at(x + std::size_t(i), y + std::size_t(j));
          }
        const std::size_t k = y * (w - 2) + x;
        ASSERT_EQ(res.gx[k], sx);
        ASSERT_EQ(res.gy[k], sy);
        const double mag = std::sqrt(double(sx * sx + sy * sy));
        ASSERT_NEAR(res.magnitude[k], mag, 1e-9);
        total += mag;
      }
    EXPECT_NEAR(res.score, total / double((w - 2) * (h - 2)), 1e-9);
  }
}

TEST(Sobel, ConstantAndStepEdges) {
  const auto flat = sobel::sobel_filter(ImageBuffer(9, 7, 131));
  for (int v : flat.gx) EXPECT_EQ(v, 0);
  for (int v : flat.gy) EXPECT_EQ(v, 0);
  EXPECT_EQ(flat.score, 0.0);
  EXPECT_EQ(sobel::sobel_classify(ImageBuffer(9, 7, 131)).decision, C);

  const int h = 37;
  ImageBuffer step(8, 5);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 4; x < 8; ++x) step.at(x, y) = h;
  const auto res = sobel::sobel_filter(step);
  for (std::size_t y = 0; y < res.height; ++y)
    for (std::size_t x = 0; x < res.width; ++x) {
      // output column x is centred on input column x + 1; the edge lies between 3 and 4
      const bool adjacent = x + 1 == 3 || x + 1 == 4;
      EXPECT_EQ(res.gx[y * res.width + x], adjacent ? 4 * h : 0);
      EXPECT_EQ(res.gy[y * res.width + x], 0);
    }
  const auto t = sobel::sobel_filter(transpose(step));
  for (std::size_t y = 0; y < t.height; ++y)
    for (std::size_t x = 0; x < t.width; ++x) {
      EXPECT_EQ(t.gy[y * t.width + x], res.gx[x * res.width + y]);
      EXPECT_EQ(t.gx[y * t.width + x], 0);
    }
  EXPECT_THROW(sobel::sobel_filter(ImageBuffer(2, 5)), ShapeError);
}

TEST(Sobel, ScoreInvariantUnderLatticeSymmetries) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto img = random_image(11 + seed, 9 + seed / 2, 100 + seed);
    const double s = sobel::sobel_score(img);
    auto r = img;
    for (int q = 0; q < 4; ++q) {
      r = data::rotate90(r);
      EXPECT_NEAR(sobel::sobel_score(r), s, 1e-9 * s);
    }
    EXPECT_NEAR(sobel::sobel_score(flip_h(img)), s, 1e-9 * s);
    EXPECT_NEAR(sobel::sobel_score(flip_v(img)), s, 1e-9 * s);
  }
}

TEST(Sobel, ScoreLinearInContrast) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 255);
  std::vector<double> plane(20 * 14);
  for (auto& v : plane) v = u(rng);
  double mean = 0;
  for (double v : plane) mean += v;
  mean /= double(plane.size());
  const double base = sobel::sobel_filter(plane, 20, 14).score;
  for (double c : {0.25, 0.5, 2.0, 3.5}) {
    auto scaled = plane;
    for (auto& v : scaled) v = mean + c * (v - mean);
    EXPECT_NEAR(sobel::sobel_filter(scaled, 20, 14).score, c * base, 1e-9 * c * base);
  }
}

TEST(Sobel, BoundaryDirection) {
  EXPECT_EQ(sobel::classify_score(18.0, 18.0).decision, I);
  EXPECT_EQ(sobel::classify_score(17.99, 18.0).decision, C);
  EXPECT_EQ(sobel::classify_score(0.0, 0.0).decision, I);
  EXPECT_EQ(sobel::classify_score(1e-9, 0.0).decision, I);
  const auto d = sobel::classify_score(5.0, 4.0);
  EXPECT_EQ(d.score, 5.0);
  EXPECT_EQ(d.boundary, 4.0);
}

TEST(Sweep, MonotoneAndBestBeatsExtremes) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> lo(12, 3), hi(22, 4);
  std::vector<double> scores;
  std::vector<Label> labels;
  for (int i = 0; i < 50; ++i) {
    scores.push_back(std::max(0.0, lo(rng)));
    labels.push_back(C);
    scores.push_back(std::max(0.0, hi(rng)));
    labels.push_back(I);
  }
  auto bounds = sobel::candidate_boundaries(scores);
  const auto rows = sobel::threshold_sweep(scores, labels, bounds);
  ASSERT_EQ(rows.size(), bounds.size());
  int flagged = 0;
  // a higher boundary only moves images from predicted-incompatible to predicted-compatible
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_LE(rows[i].cm.tn + rows[i].cm.fn, rows[i - 1].cm.tn + rows[i - 1].cm.fn);
    EXPECT_LE(rows[i].cm.tn, rows[i - 1].cm.tn);
    EXPECT_GE(rows[i].cm.tp, rows[i - 1].cm.tp);
    EXPECT_GE(rows[i].cm.fp, rows[i - 1].cm.fp);
  }
  for (std::size_t k = 0; k < 200; ++k) {
    const double b1 = double(k) * 0.2, b2 = b1 + 0.7;
    for (double s : scores)
      if (sobel::classify_score(s, b2).decision == I) {
        EXPECT_EQ(sobel::classify_score(s, b1).decision, I);
      }
  }
  const sobel::SweepRow* best = nullptr;
  for (const auto& r : rows)
    if (r.best) {
      ++flagged;
      best = &r;
    }
  ASSERT_EQ(flagged, 1);
  EXPECT_GE(best->report.accuracy->value(), rows.front().report.accuracy->value());
  EXPECT_GE(best->report.accuracy->value(), rows.back().report.accuracy->value());
  for (const auto& r : rows) EXPECT_LE(r.report.accuracy->value(), best->report.accuracy->value());
}

TEST(Sweep, SingleImageAndEmpty) {
  const auto rows = sobel::threshold_sweep({7.5}, {C}, {0, 5, 7.5, 10, INFINITY});
  for (const auto& r : rows) EXPECT_TRUE(r.report.accuracy->num == 0 || r.report.accuracy->num == r.report.accuracy->den);
  EXPECT_THROW(sobel::threshold_sweep({}, {}, {1}), UsageError);
  EXPECT_THROW(sobel::threshold_sweep({1, 2}, {C}, {1}), UsageError);
}
