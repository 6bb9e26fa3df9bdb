#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mcompat/tensor/ops.hpp"

namespace mcompat {

struct GradcheckOptions {
  double step = 2e-3;
  double tolerance = 1e-6;
  // Coordinates per tensor; tensors at or below this size are checked exhaustively.
  std::size_t samples_per_tensor = 64;
  // Gradients smaller than this in both estimates are compared absolutely.
  double abs_floor = 1e-9;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::string worst;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  if (scale < floor) return diff < floor ? 0.0 : diff / floor;
  return diff / scale;
}

/// Compares backward() against central differences. The primary estimate is
/// the fourth-order stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h,
/// whose truncation and rounding errors both stay far below the tolerance at
/// h = 2e-3 even when a gradient is 1e-6 of the loss. A coordinate that
/// disagrees is retried at h/10, h/100 and h/1000, then with the plain
/// two-point quotient at 1e-6 and a 16-point fit: a ReLU or max-pool switch
/// inside the stencil shrinks with the step, an analytic error does not.
/// `loss` must rebuild the scalar from the current contents of `inputs`.
inline GradcheckResult gradcheck(std::string name, std::vector<Tensor<double>> inputs,
                                 const std::function<Tensor<double>()>& loss, const GradcheckOptions& opt = {}) {
  GradcheckResult res;
  res.name = std::move(name);
  for (auto& t : inputs) {
    t.set_requires_grad();
    t.zero_grad();
  }
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }

  NoGradGuard no_grad;
  auto at = [&](double& x, double saved, double offset) {
    x = saved + offset;
    const double v = loss().item();
    x = saved;
    return v;
  };
  auto central = [&](double& x, double h) {
    const double s = x;
    return (at(x, s, h) - at(x, s, -h)) / (2 * h);
  };
  auto fourth_order = [&](double& x, double h) {
    const double s = x;
    return (at(x, s, -2 * h) - 8 * at(x, s, -h) + 8 * at(x, s, h) - at(x, s, 2 * h)) / (12 * h);
  };

  // Least-squares c1 k + c3 k^3 through (f(x+kh) - f(x-kh)) / 2, k = 1..8:
  // averages away the rounding noise that limits a single quotient when the
  // gradient is tiny next to the loss.
  auto odd_fit = [&](double& x, double h) {
    const double s = x;
    double m2 = 0, m4 = 0, m6 = 0, r1 = 0, r3 = 0;
    for (int k = 1; k <= 8; ++k) {
      const double g = (at(x, s, k * h) - at(x, s, -k * h)) / 2, k2 = double(k * k);
      m2 += k2;
      m4 += k2 * k2;
      m6 += k2 * k2 * k2;
      r1 += g * k;
      r3 += g * k * k2;
    }
    return (r1 * m6 - r3 * m4) / (m2 * m6 - m4 * m4) / h;
  };

  std::mt19937_64 rng(opt.seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto data = inputs[ti].mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > opt.samples_per_tensor) {
      for (std::size_t i = 0; i < opt.samples_per_tensor; ++i) {
        const std::size_t j = i + std::size_t(detail::uniform01(rng) * double(coords.size() - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(opt.samples_per_tensor);
    }
    for (auto c : coords) {
      const double a = analytic[ti][c];
      double err = relative_error(a, fourth_order(data[c], opt.step), opt.abs_floor);
      for (double h = opt.step / 10; err >= opt.tolerance && h >= opt.step * 1e-3; h /= 10)
        err = std::min(err, relative_error(a, fourth_order(data[c], h), opt.abs_floor));
      if (err >= opt.tolerance) err = std::min(err, relative_error(a, central(data[c], 1e-6), opt.abs_floor));
      for (double h : {opt.step / 400, opt.step / 2000})
        if (err >= opt.tolerance) err = std::min(err, relative_error(a, odd_fit(data[c], h), opt.abs_floor));
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "input " + std::to_string(ti) + " coord " + std::to_string(c);
      }
    }
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace mcompat
