#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mcompat/data/dataset.hpp"

namespace mcompat::data {

/// Generator knobs. Compatible images are a smooth homogeneous texture;
/// incompatible ones add non-overlapping bright elliptical islands with hard
/// boundaries on the same kind of background.
struct SynthConfig {
  double background = 110;
  double wave_amplitude = 15;   // coarse long-wavelength variation, +-
  std::size_t wave_cells = 4;   // coarse grid cells per side
  double noise_sigma = 7;       // fine grain before the 3x3 blur
  std::size_t islands_min = 12, islands_max = 20;
  double radius_min = 8, radius_max = 20;  // semi-major axis, pixels
  double aspect_min = 0.6;                 // minor / major
  double contrast_min = 70, contrast_max = 100;
  std::size_t placement_tries = 400;
  double test_fraction = 0.2;
};

namespace detail {

inline double gaussian(std::mt19937_64& rng) {
  // Box-Muller on the portable uniform
  const double u1 = 1.0 - mcompat::detail::uniform01(rng), u2 = mcompat::detail::uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * mcompat::detail::uniform01(rng);
}

inline std::uint64_t image_seed(std::uint64_t seed, bool incompatible, std::size_t index) {
  return mcompat::detail::mix64(seed ^ mcompat::detail::mix64((std::uint64_t(index) << 1) | (incompatible ? 1 : 0)));
}

struct Island {
  double cx, cy, a, b, angle, contrast;
};

// Background: bilinear coarse field plus blurred grain.
inline std::vector<double> background_field(std::size_t size, const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t g = std::max<std::size_t>(1, cfg.wave_cells) + 1;
  std::vector<double> coarse(g * g);
  for (auto& v : coarse) v = uniform(rng, -cfg.wave_amplitude, cfg.wave_amplitude);
  std::vector<double> grain(size * size);
  for (auto& v : grain) v = cfg.noise_sigma * gaussian(rng);
  std::vector<double> field(size * size);
  const double cell = double(size - 1) / double(g - 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = double(x) / cell, fy = double(y) / cell;
      const std::size_t ix = std::min(g - 2, std::size_t(fx)), iy = std::min(g - 2, std::size_t(fy));
      const double tx = fx - double(ix), ty = fy - double(iy);
      const double top = coarse[iy * g + ix] * (1 - tx) + coarse[iy * g + ix + 1] * tx;
      const double bot = coarse[(iy + 1) * g + ix] * (1 - tx) + coarse[(iy + 1) * g + ix + 1] * tx;
      double blur = 0;
      int taps = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = long(y) + dy, xx = long(x) + dx;
          if (yy < 0 || xx < 0 || yy >= long(size) || xx >= long(size)) continue;
          blur += grain[std::size_t(yy) * size + std::size_t(xx)];
          ++taps;
        }
      field[y * size + x] = cfg.background + top * (1 - ty) + bot * ty + blur / taps;
    }
  return field;
}

inline ImageBuffer quantize(const std::vector<double>& field, std::size_t size) {
  ImageBuffer img(size, size);
  for (std::size_t i = 0; i < field.size(); ++i)
    img.pixels[i] = std::uint8_t(std::clamp(std::lround(field[i]), 0L, 255L));
  return img;
}

}  // namespace detail

struct SynthImage {
  ImageBuffer image;
  std::size_t islands = 0;  // placed (may fall short of the draw)
  std::size_t requested = 0;
};

/// Islands may be fixed by the caller (count > 0 overrides the draw;
/// radius > 0 fixes every semi-major axis).
struct IslandOverride {
  std::size_t count = 0;
  double radius = 0;
};

inline SynthImage synth_image(bool incompatible, std::size_t index, std::size_t size, std::uint64_t seed,
                              const SynthConfig& cfg = {}, IslandOverride over = {}) {
  std::mt19937_64 rng(detail::image_seed(seed, incompatible, index));
  auto field = detail::background_field(size, cfg, rng);
  SynthImage out;
  if (incompatible) {
    const std::size_t span = cfg.islands_max - cfg.islands_min + 1;
    out.requested = over.count ? over.count
                               : cfg.islands_min + std::min(span - 1, std::size_t(mcompat::detail::uniform01(rng) * double(span)));
    std::vector<detail::Island> placed;
    for (std::size_t k = 0; k < out.requested; ++k) {
      const double a = over.radius > 0 ? over.radius : detail::uniform(rng, cfg.radius_min, cfg.radius_max);
      const double b = a * detail::uniform(rng, cfg.aspect_min, 1.0);
      const double angle = detail::uniform(rng, 0, 3.141592653589793);
      const double contrast = detail::uniform(rng, cfg.contrast_min, cfg.contrast_max);
      for (std::size_t t = 0; t < cfg.placement_tries; ++t) {
        const double cx = detail::uniform(rng, a + 1, double(size) - a - 2);
        const double cy = detail::uniform(rng, a + 1, double(size) - a - 2);
        bool clear = cx >= a && cy >= a;
        for (const auto& p : placed)
          if (std::hypot(cx - p.cx, cy - p.cy) < a + p.a + 3) {
            clear = false;
            break;
          }
        if (clear) {
          placed.push_back({cx, cy, a, b, angle, contrast});
          break;
        }
      }
    }
    out.islands = placed.size();
    for (const auto& p : placed) {
      const double c = std::cos(p.angle), s = std::sin(p.angle);
      const long x0 = long(p.cx - p.a) - 1, x1 = long(p.cx + p.a) + 1;
      const long y0 = long(p.cy - p.a) - 1, y1 = long(p.cy + p.a) + 1;
      for (long y = std::max(0L, y0); y <= std::min(long(size) - 1, y1); ++y)
        for (long x = std::max(0L, x0); x <= std::min(long(size) - 1, x1); ++x) {
          const double dx = double(x) - p.cx, dy = double(y) - p.cy;
          const double u = (dx * c + dy * s) / p.a, v = (-dx * s + dy * c) / p.b;
          if (u * u + v * v <= 1.0) field[std::size_t(y) * size + std::size_t(x)] += p.contrast;
        }
    }
  }
  out.image = detail::quantize(field, size);
  return out;
}

struct SynthResult {
  std::vector<ManifestEntry> entries;
  DatasetStats stats;
  std::vector<std::string> warnings;
};

inline std::size_t test_count(std::size_t n, double fraction) {
  return std::min(n, std::size_t(std::floor(double(n) * fraction + 0.5)));
}

/// Writes images/<label>_<index>.pgm, manifest.jsonl and stats.json under
/// `out_dir`. The split is stratified: the last round(n * test_fraction)
/// images of each class are test.
inline SynthResult synth_generate(std::size_t n_compatible, std::size_t n_incompatible, std::size_t size,
                                  std::uint64_t seed, const std::filesystem::path& out_dir,
                                  const SynthConfig& cfg = {}) {
  if (size < kCropSize) throw ConfigError("synth_generate: size must be >= " + std::to_string(kCropSize));
  if (!(cfg.test_fraction >= 0 && cfg.test_fraction <= 1)) throw ConfigError("test_fraction must lie in [0, 1]");
  if (cfg.islands_min > cfg.islands_max || cfg.radius_min > cfg.radius_max || cfg.radius_min <= 0)
    throw ConfigError("synth_generate: invalid island ranges");
  std::filesystem::create_directories(out_dir / "images");
  SynthResult res;
  for (int cls = 0; cls < 2; ++cls) {
    const bool inc = cls == 1;
    const std::size_t n = inc ? n_incompatible : n_compatible;
    const std::size_t n_test = test_count(n, cfg.test_fraction);
    for (std::size_t i = 0; i < n; ++i) {
      auto img = synth_image(inc, i, size, seed, cfg);
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%04zu.pgm", inc ? "incompatible" : "compatible", i);
      save_image(img.image, out_dir / name);
      if (img.islands < img.requested)
        res.warnings.push_back(std::string(name) + ": placed " + std::to_string(img.islands) + " of " +
                               std::to_string(img.requested) + " islands");
      ManifestEntry e;
      e.path = name;
      e.label = inc ? CompatLabel::incompatible : CompatLabel::compatible;
      e.split = i + n_test >= n ? Split::test : Split::train;
      e.source = "synthetic seed " + std::to_string(seed);
      res.entries.push_back(std::move(e));
    }
  }
  write_manifest(res.entries, out_dir / "manifest.jsonl");
  res.stats = compute_stats(res.entries, AugmentFactors::ones());
  std::ofstream(out_dir / "stats.json") << to_json(res.stats).dump(2) << '\n';
  return res;
}

}  // namespace mcompat::data
