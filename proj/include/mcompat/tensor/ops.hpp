#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mcompat/random.hpp"
#include "mcompat/tensor/gemm.hpp"
#include "mcompat/tensor/tensor.hpp"

// Forward/backward kernels for the operations the three CNN families need.
// Every op records a GradNode when grad mode is on and an input needs grad.

namespace mcompat {

enum class Mode { train, eval };

namespace detail {

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& what, const Dims& a,
                                    const Dims& b) {
  throw ShapeError(op + ": " + what + " (" + dims_str(a) + " vs " + dims_str(b) + ")");
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got dims " +
                     dims_str(t.dims()));
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;
};

// Unfolds output rows [y0, y1) of one image into a (C*k*k) x ((y1-y0)*out_w)
// matrix with rows ordered (channel, dy, dx), matching OIkk weight layout.
template <class T>
void im2col_rows(const T* x, const ConvGeometry& g, std::size_t y0, std::size_t y1, T* col) {
  const std::size_t cols = (y1 - y0) * g.out_w;
  const auto k = std::ptrdiff_t(g.kernel), s = std::ptrdiff_t(g.stride), p = std::ptrdiff_t(g.padding);
  const auto H = std::ptrdiff_t(g.height), W = std::ptrdiff_t(g.width), Wo = std::ptrdiff_t(g.out_w);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.height * g.width;
    for (std::ptrdiff_t dy = 0; dy < k; ++dy) {
      for (std::ptrdiff_t dx = 0; dx < k; ++dx) {
        T* dst = col + ((c * g.kernel + std::size_t(dy)) * g.kernel + std::size_t(dx)) * cols;
        // Output columns whose input column lies inside the image.
        std::ptrdiff_t x_lo = p - dx > 0 ? (p - dx + s - 1) / s : 0;
        std::ptrdiff_t x_hi = (W - 1 + p - dx) >= 0 ? (W - 1 + p - dx) / s + 1 : 0;
        x_lo = std::min(x_lo, Wo);
        x_hi = std::clamp(x_hi, x_lo, Wo);
        for (std::size_t y = y0; y < y1; ++y, dst += Wo) {
          const std::ptrdiff_t iy = std::ptrdiff_t(y) * s - p + dy;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = plane + iy * W - p + dx;
          std::fill(dst, dst + x_lo, T(0));
          if (s == 1) {
            std::copy(src + x_lo, src + x_hi, dst + x_lo);
          } else {
            for (std::ptrdiff_t xo = x_lo; xo < x_hi; ++xo) dst[xo] = src[xo * s];
          }
          std::fill(dst + x_hi, dst + Wo, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col_rows: scatter-adds the column matrix into the image.
template <class T>
void col2im_rows(const T* col, const ConvGeometry& g, std::size_t y0, std::size_t y1, T* x) {
  const std::size_t cols = (y1 - y0) * g.out_w;
  const auto k = std::ptrdiff_t(g.kernel), s = std::ptrdiff_t(g.stride), p = std::ptrdiff_t(g.padding);
  const auto H = std::ptrdiff_t(g.height), W = std::ptrdiff_t(g.width), Wo = std::ptrdiff_t(g.out_w);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = x + c * g.height * g.width;
    for (std::ptrdiff_t dy = 0; dy < k; ++dy) {
      for (std::ptrdiff_t dx = 0; dx < k; ++dx) {
        const T* src = col + ((c * g.kernel + std::size_t(dy)) * g.kernel + std::size_t(dx)) * cols;
        std::ptrdiff_t x_lo = p - dx > 0 ? (p - dx + s - 1) / s : 0;
        std::ptrdiff_t x_hi = (W - 1 + p - dx) >= 0 ? (W - 1 + p - dx) / s + 1 : 0;
        x_lo = std::min(x_lo, Wo);
        x_hi = std::clamp(x_hi, x_lo, Wo);
        for (std::size_t y = y0; y < y1; ++y, src += Wo) {
          const std::ptrdiff_t iy = std::ptrdiff_t(y) * s - p + dy;
          if (iy < 0 || iy >= H) continue;
          T* dst = plane + iy * W - p + dx;
          for (std::ptrdiff_t xo = x_lo; xo < x_hi; ++xo) dst[xo * s] += src[xo];
        }
      }
    }
  }
}

// Output rows per im2col chunk; keeps the unfolded block cache-resident.
inline std::size_t conv_chunk_rows(std::size_t out_w, std::size_t kdim) {
  constexpr std::size_t kTargetElems = std::size_t{1} << 17;
  return std::max<std::size_t>(1, kTargetElems / std::max<std::size_t>(1, out_w * kdim));
}

// out (N x O x out_h x out_w) (+)= cross-correlation of x with w (O x C x k x k).
template <class T>
void conv_forward(const T* x, std::size_t N, const ConvGeometry& g, const T* w, std::size_t O, T* out,
                  bool accumulate) {
  const std::size_t K = g.channels * g.kernel * g.kernel, P = g.out_h * g.out_w;
  const std::size_t plane_in = g.channels * g.height * g.width;
  const bool pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
  const std::size_t rows_per_chunk = conv_chunk_rows(g.out_w, K);
  std::vector<T> col;
  for (std::size_t n = 0; n < N; ++n) {
    T* out_n = out + n * O * P;
    if (pointwise) {
      gemm(false, false, O, P, K, w, K, x + n * plane_in, P, out_n, P, accumulate);
      continue;
    }
    for (std::size_t y0 = 0; y0 < g.out_h; y0 += rows_per_chunk) {
      const std::size_t y1 = std::min(g.out_h, y0 + rows_per_chunk), cols = (y1 - y0) * g.out_w;
      col.resize(K * cols);
      im2col_rows(x + n * plane_in, g, y0, y1, col.data());
      gemm(false, false, O, cols, K, w, K, col.data(), cols, out_n + y0 * g.out_w, P, accumulate);
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k)
    detail::shape_fail("conv2d", "weight does not match input channels / square kernel",
                       input.dims(), weight.dims());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
    detail::shape_fail("conv2d", "bias extent must equal output channels", weight.dims(), bias.dims());
  if (k > H + 2 * padding || k > W + 2 * padding)
    detail::shape_fail("conv2d", "non-positive output extent", input.dims(), weight.dims());

  detail::ConvGeometry g{C, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                         (W + 2 * padding - k) / stride + 1};
  const std::size_t K = C * k * k, P = g.out_h * g.out_w, plane_in = C * H * W;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  const std::size_t rows_per_chunk = detail::conv_chunk_rows(g.out_w, K);

  std::vector<T> out(N * O * P);
  const T* x = input.data().data();
  const T* w = weight.data().data();
  detail::conv_forward(x, N, g, w, O, out.data(), false);
  for (std::size_t n = 0; n < N; ++n) {
    T* out_n = out.data() + n * O * P;
    if (bias.defined()) {
      const T* b = bias.data().data();
      for (std::size_t o = 0; o < O; ++o) {
        T* row = out_n + o * P;
        for (std::size_t i = 0; i < P; ++i) row[i] += b[o];
      }
    }
  }

  Tensor<T> result({N, O, g.out_h, g.out_w}, std::move(out));
  if (detail::should_record<T>({&input, &weight, &bias})) {
    auto* xi = input.impl().get();
    auto* wi = weight.impl().get();
    auto* bi = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins{input.impl(), weight.impl()};
    if (bi) ins.push_back(bias.impl());
    detail::attach(result, "conv2d", std::move(ins), [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      auto gw = detail::grad_sink(wi);
      auto gb = detail::grad_sink(bi);
      const T* xd = xi->data.data();
      const T* wd = wi->data.data();
      if (!gb.empty())
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) {
            const T* row = gy.data() + (n * O + o) * P;
            T acc = 0;
            for (std::size_t i = 0; i < P; ++i) acc += row[i];
            gb[o] += acc;
          }
      // Stride-1 input gradient is a correlation of gy with the flipped,
      // channel-transposed kernel at padding k-1-p.
      const bool transposed_route = !gx.empty() && !pointwise && stride == 1 && padding + 1 <= k;
      if (transposed_route) {
        std::vector<T> flipped(O * K);
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                flipped[((c * O + o) * k + (k - 1 - dy)) * k + (k - 1 - dx)] = wd[((o * C + c) * k + dy) * k + dx];
        detail::ConvGeometry back{O, g.out_h, g.out_w, k, 1, k - 1 - padding, H, W};
        detail::conv_forward(gy.data(), N, back, flipped.data(), C, gx.data(), true);
      }
      std::vector<T> col, dcol;
      for (std::size_t n = 0; n < N; ++n) {
        const T* gy_n = gy.data() + n * O * P;
        if (pointwise) {
          if (!gw.empty()) detail::gemm(false, true, O, K, P, gy_n, P, xd + n * plane_in, P, gw.data(), K, true);
          if (!gx.empty())
            detail::gemm(true, false, K, P, O, wd, K, gy_n, P, gx.data() + n * plane_in, P, true);
          continue;
        }
        const bool need_dcol = !gx.empty() && !transposed_route;
        if (gw.empty() && !need_dcol) continue;
        for (std::size_t y0 = 0; y0 < g.out_h; y0 += rows_per_chunk) {
          const std::size_t y1 = std::min(g.out_h, y0 + rows_per_chunk), cols = (y1 - y0) * g.out_w;
          const T* gy_chunk = gy_n + y0 * g.out_w;
          if (!gw.empty()) {
            col.resize(K * cols);
            detail::im2col_rows(xd + n * plane_in, g, y0, y1, col.data());
            detail::gemm(false, true, O, K, cols, gy_chunk, P, col.data(), cols, gw.data(), K, true);
          }
          if (need_dcol) {
            dcol.resize(K * cols);
            detail::gemm(true, false, K, cols, O, wd, K, gy_chunk, P, dcol.data(), cols, false);
            detail::col2im_rows(dcol.data(), g, y0, y1, gx.data() + n * plane_in);
          }
        }
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                 std::size_t padding) {
  return conv2d(input, weight, Tensor<T>{}, stride, padding);
}

/// Max pooling with implicit -inf padding. Backward routes each window's
/// gradient to its first maximal element in row-major scan order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride, std::size_t padding = 0) {
  detail::require_rank(input, 4, "maxpool2d");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (stride < 1 || k < 1) throw ShapeError("maxpool2d: window and stride must be >= 1");
  if (k > H + 2 * padding || k > W + 2 * padding)
    detail::shape_fail("maxpool2d", "window larger than input", input.dims(), Dims{k, k});
  if (padding * 2 > k) throw ShapeError("maxpool2d: padding must be at most half the window");
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1, Wo = (W + 2 * padding - k) / stride + 1;
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::uint32_t> argmax(out.size());
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t dy = 0; dy < k; ++dy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + dy) - std::ptrdiff_t(padding);
          if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + dx) - std::ptrdiff_t(padding);
            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
            const std::size_t idx = std::size_t(iy) * W + std::size_t(ix);
            if (!found || plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = best;
        argmax[o] = std::uint32_t(best_idx);
      }
  }
  Tensor<T> result({N, C, Ho, Wo}, std::move(out));
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "maxpool2d", {input.impl()},
                   [=, argmax = std::move(argmax)](std::span<const T> gy) {
                     auto gx = detail::grad_sink(xi);
                     const std::size_t per_out = Ho * Wo;
                     for (std::size_t o = 0; o < gy.size(); ++o)
                       gx[(o / per_out) * H * W + argmax[o]] += gy[o];
                   });
  }
  return result;
}

// Average pooling without padding (DenseNet transitions).
template <class T>
Tensor<T> avgpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride) {
  detail::require_rank(input, 4, "avgpool2d");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (stride < 1 || k < 1) throw ShapeError("avgpool2d: window and stride must be >= 1");
  if (k > H || k > W) detail::shape_fail("avgpool2d", "window larger than input", input.dims(), Dims{k, k});
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  const T scale = T(1) / T(k * k);
  std::vector<T> out(N * C * Ho * Wo, T(0));
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            acc += x[(nc * H + oy * stride + dy) * W + ox * stride + dx];
        out[(nc * Ho + oy) * Wo + ox] = acc * scale;
      }
  Tensor<T> result({N, C, Ho, Wo}, std::move(out));
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "avgpool2d", {input.impl()}, [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const T g = gy[(nc * Ho + oy) * Wo + ox] * scale;
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx) gx[(nc * H + oy * stride + dy) * W + ox * stride + dx] += g;
          }
    });
  }
  return result;
}

/// Averages input rows [floor(y*H/oh), ceil((y+1)*H/oh)) and the analogous
/// columns. Output extents larger than the input are allowed (windows repeat).
template <class T>
Tensor<T> adaptive_avgpool(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(input, 4, "adaptive_avgpool");
  if (out_h < 1 || out_w < 1) throw ShapeError("adaptive_avgpool: output extents must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<T> out(N * C * out_h * out_w);
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
        const std::size_t x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
        T acc = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(nc * H + y) * W + xx];
        out[(nc * out_h + oy) * out_w + ox] = acc / T((y1 - y0) * (x1 - x0));
      }
  Tensor<T> result({N, C, out_h, out_w}, std::move(out));
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "adaptive_avgpool", {input.impl()}, [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < out_h; ++oy)
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::size_t y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
            const std::size_t x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
            const T g = gy[(nc * out_h + oy) * out_w + ox] / T((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) gx[(nc * H + y) * W + xx] += g;
          }
    });
  }
  return result;
}

template <class T>
Tensor<T> global_avgpool(const Tensor<T>& input) {
  detail::require_rank(input, 4, "global_avgpool");
  return adaptive_avgpool(input, 1, 1);
}

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  Tensor<T> result(input.dims(), std::move(out));
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "relu", {input.impl()}, [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      const T* x = xi->data.data();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
    });
  }
  return result;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) detail::shape_fail("add", "dims differ", a.dims(), b.dims());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor<T> result(a.dims(), std::move(out));
  if (detail::should_record<T>({&a, &b})) {
    auto* ai = a.impl().get();
    auto* bi = b.impl().get();
    detail::attach(result, "add", {a.impl(), b.impl()}, [=](std::span<const T> gy) {
      for (auto* in : {ai, bi}) {
        auto g = detail::grad_sink(in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return result;
}

/// out = input * weight^T + bias for input N x F, weight G x F.
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(input, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  const std::size_t N = input.dim(0), F = input.dim(1), G = weight.dim(0);
  if (weight.dim(1) != F) detail::shape_fail("linear", "inner extents differ", input.dims(), weight.dims());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != G))
    detail::shape_fail("linear", "bias extent must equal output features", weight.dims(), bias.dims());
  std::vector<T> out(N * G);
  detail::gemm(false, true, N, G, F, input.data().data(), F, weight.data().data(), F, out.data(), G, false);
  if (bias.defined())
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < G; ++j) out[n * G + j] += bias.data()[j];
  Tensor<T> result({N, G}, std::move(out));
  if (detail::should_record<T>({&input, &weight, &bias})) {
    auto* xi = input.impl().get();
    auto* wi = weight.impl().get();
    auto* bi = bias.defined() ? bias.impl().get() : nullptr;
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins{input.impl(), weight.impl()};
    if (bi) ins.push_back(bias.impl());
    detail::attach(result, "linear", std::move(ins), [=](std::span<const T> gy) {
      if (auto gx = detail::grad_sink(xi); !gx.empty())
        detail::gemm(false, false, N, F, G, gy.data(), G, wi->data.data(), F, gx.data(), F, true);
      if (auto gw = detail::grad_sink(wi); !gw.empty())
        detail::gemm(true, false, G, F, N, gy.data(), G, xi->data.data(), F, gw.data(), F, true);
      if (auto gb = detail::grad_sink(bi); !gb.empty())
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t j = 0; j < G; ++j) gb[j] += gy[n * G + j];
    });
  }
  return result;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& input, Dims dims) {
  if (numel_of(dims) != input.numel()) detail::shape_fail("reshape", "element count differs", input.dims(), dims);
  Tensor<T> result(std::move(dims), input.values());
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "reshape", {input.impl()}, [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return result;
}

// N x C x H x W -> N x (C*H*W)
template <class T>
Tensor<T> flatten(const Tensor<T>& input) {
  return reshape(input, Dims{input.dim(0), input.numel() / input.dim(0)});
}

/// Channel-axis concatenation in argument order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank(t, 4, "concat_channels");
  const std::size_t N = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3);
  std::size_t C = 0;
  for (const auto& t : inputs) {
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      detail::shape_fail("concat_channels", "batch/spatial extents differ", inputs[0].dims(), t.dims());
    C += t.dim(1);
  }
  const std::size_t plane = H * W;
  std::vector<T> out(N * C * plane);
  for (std::size_t n = 0; n < N; ++n) {
    T* dst = out.data() + n * C * plane;
    for (const auto& t : inputs) {
      const std::size_t block = t.dim(1) * plane;
      const T* src = t.data().data() + n * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  Tensor<T> result({N, C, H, W}, std::move(out));
  if (detail::should_record(inputs)) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins;
    std::vector<detail::TensorImpl<T>*> raw;
    for (const auto& t : inputs) {
      ins.push_back(t.impl());
      raw.push_back(t.impl().get());
    }
    detail::attach(result, "concat_channels", std::move(ins), [=](std::span<const T> gy) {
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = gy.data() + n * C * plane;
        for (auto* in : raw) {
          const std::size_t block = in->dims[1] * plane;
          if (auto g = detail::grad_sink(in); !g.empty()) {
            T* dst = g.data() + n * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
          src += block;
        }
      }
    });
  }
  return result;
}

/// Per-channel batch normalization over N x H x W. In train mode the batch
/// statistics normalize and the running buffers follow an exponential
/// moving average (unbiased variance); eval mode uses the buffers.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, double momentum,
                      double eps) {
  detail::require_rank(input, 4, "batchnorm2d");
  const std::size_t N = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (p->rank() != 1 || p->dim(0) != C)
      detail::shape_fail("batchnorm2d", "per-channel parameter extent differs from C", input.dims(), p->dims());
  if (!(eps >= 0)) throw ConfigError("batchnorm2d: eps must be non-negative");
  const std::size_t M = N * plane;
  const T* x = input.data().data();
  std::vector<T> out(input.numel());
  std::vector<T> xhat(input.numel());
  std::vector<T> invstd(C);
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      double acc = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) acc += x[(n * C + c) * plane + i];
      mean = T(acc / double(M));
      double sq = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = double(x[(n * C + c) * plane + i]) - double(mean);
          sq += d * d;
        }
      var = T(sq / double(M));
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const double unbiased = M > 1 ? sq / double(M - 1) : sq;
      rm[c] = T((1 - momentum) * double(rm[c]) + momentum * double(mean));
      rv[c] = T((1 - momentum) * double(rv[c]) + momentum * unbiased);
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const T denom = var + T(eps);
    if (!(denom > T(0))) throw NumericalError("batchnorm2d: variance + eps is not positive");
    invstd[c] = T(1) / std::sqrt(denom);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (x[base + i] - mean) * invstd[c];
        xhat[base + i] = h;
        out[base + i] = gm[c] * h + bt[c];
      }
    }
  }
  Tensor<T> result(input.dims(), std::move(out));
  if (detail::should_record<T>({&input, &gamma, &beta})) {
    auto* xi = input.impl().get();
    auto* gi = gamma.impl().get();
    auto* bi = beta.impl().get();
    const bool train = mode == Mode::train;
    detail::attach(result, "batchnorm2d", {input.impl(), gamma.impl(), beta.impl()},
                   [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const T> gy) {
                     auto gx = detail::grad_sink(xi);
                     auto gg = detail::grad_sink(gi);
                     auto gb = detail::grad_sink(bi);
                     const T* gmv = gi->data.data();
                     for (std::size_t c = 0; c < C; ++c) {
                       T sum_g = 0, sum_gh = 0;
                       for (std::size_t n = 0; n < N; ++n) {
                         const std::size_t base = (n * C + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           sum_g += gy[base + i];
                           sum_gh += gy[base + i] * xhat[base + i];
                         }
                       }
                       if (!gg.empty()) gg[c] += sum_gh;
                       if (!gb.empty()) gb[c] += sum_g;
                       if (gx.empty()) continue;
                       const T scale = gmv[c] * invstd[c];
                       const T mean_g = sum_g / T(M), mean_gh = sum_gh / T(M);
                       for (std::size_t n = 0; n < N; ++n) {
                         const std::size_t base = (n * C + c) * plane;
                         for (std::size_t i = 0; i < plane; ++i) {
                           gx[base + i] += train ? scale * (gy[base + i] - mean_g - xhat[base + i] * mean_gh)
                                                 : scale * gy[base + i];
                         }
                       }
                     }
                   });
  }
  return result;
}

/// Inverted dropout. The mask is drawn from `rng`, so a fixed seed gives a
/// fixed mask.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) {
    Tensor<T> result = input.clone();
    if (detail::should_record<T>({&input})) {
      auto* xi = input.impl().get();
      detail::attach(result, "dropout", {input.impl()}, [=](std::span<const T> gy) {
        auto gx = detail::grad_sink(xi);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      });
    }
    return result;
  }
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(input.numel());
  for (auto& m : mask) m = detail::uniform01(rng) < rate ? T(0) : keep_scale;
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] * mask[i];
  Tensor<T> result(input.dims(), std::move(out));
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "dropout", {input.impl()}, [=, mask = std::move(mask)](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
    });
  }
  return result;
}

/// Row-wise z - max(z) - log(sum(exp(z - max(z)))) for N x K logits.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "log_softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ShapeError("log_softmax: need at least two classes, got dims " + dims_str(logits.dims()));
  std::vector<T> out(N * K);
  const T* z = logits.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z + n * K;
    const T mx = *std::max_element(row, row + K);
    T s = 0;
    for (std::size_t j = 0; j < K; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < K; ++j) out[n * K + j] = row[j] - lse;
  }
  Tensor<T> result({N, K}, out);
  if (detail::should_record<T>({&logits})) {
    auto* zi = logits.impl().get();
    detail::attach(result, "log_softmax", {logits.impl()}, [=, out = std::move(out)](std::span<const T> gy) {
      auto gz = detail::grad_sink(zi);
      for (std::size_t n = 0; n < N; ++n) {
        T s = 0;
        for (std::size_t j = 0; j < K; ++j) s += gy[n * K + j];
        for (std::size_t j = 0; j < K; ++j) gz[n * K + j] += gy[n * K + j] - std::exp(out[n * K + j]) * s;
      }
    });
  }
  return result;
}

template <class T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = 0;
  for (auto v : input.data()) acc += v;
  Tensor<T> result({1}, std::vector<T>{acc});
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    detail::attach(result, "sum", {input.impl()}, [=](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (auto& g : gx) g += gy[0];
    });
  }
  return result;
}

/// Scalar sum(input * weights) against a constant weight tensor; a generic
/// probe loss for gradient checks.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& input, const Tensor<T>& weights) {
  if (input.dims() != weights.dims()) detail::shape_fail("weighted_sum", "dims differ", input.dims(), weights.dims());
  T acc = 0;
  for (std::size_t i = 0; i < input.numel(); ++i) acc += input.data()[i] * weights.data()[i];
  Tensor<T> result({1}, std::vector<T>{acc});
  if (detail::should_record<T>({&input})) {
    auto* xi = input.impl().get();
    std::vector<T> w(weights.data().begin(), weights.data().end());
    detail::attach(result, "weighted_sum", {input.impl()}, [=, w = std::move(w)](std::span<const T> gy) {
      auto gx = detail::grad_sink(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0] * w[i];
    });
  }
  return result;
}

/// Mean negative log-likelihood of the target class per row.
template <class T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const int> targets) {
  detail::require_rank(log_probs, 2, "nll_loss");
  const std::size_t N = log_probs.dim(0), K = log_probs.dim(1);
  if (targets.size() != N) throw UsageError("nll_loss: target count differs from batch size");
  if (N == 0) throw UsageError("nll_loss: empty batch");
  std::vector<int> tg(targets.begin(), targets.end());
  T acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (tg[n] < 0 || std::size_t(tg[n]) >= K) throw UsageError("nll_loss: target class out of range");
    acc -= log_probs.data()[n * K + std::size_t(tg[n])];
  }
  Tensor<T> result({1}, std::vector<T>{acc / T(N)});
  if (detail::should_record<T>({&log_probs})) {
    auto* li = log_probs.impl().get();
    detail::attach(result, "nll_loss", {log_probs.impl()}, [=, tg = std::move(tg)](std::span<const T> gy) {
      auto gl = detail::grad_sink(li);
      for (std::size_t n = 0; n < N; ++n) gl[n * K + std::size_t(tg[n])] -= gy[0] / T(N);
    });
  }
  return result;
}

}  // namespace mcompat
