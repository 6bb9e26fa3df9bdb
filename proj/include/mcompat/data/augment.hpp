#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mcompat/data/image.hpp"
#include "mcompat/data/manifest.hpp"
#include "mcompat/random.hpp"

namespace mcompat::data {

inline constexpr std::size_t kCropSize = 256;

struct AugmentRecipe {
  std::size_t augment_index = 0;
  int rotation = 0;  // quarter turns counter-clockwise, 0..3
  bool flip_h = false;
  bool flip_v = false;
  long translate_dx = 0;
  long translate_dy = 0;
  std::size_t crop_x = 0;
  std::size_t crop_y = 0;
  std::size_t crop = kCropSize;

  friend bool operator==(const AugmentRecipe&, const AugmentRecipe&) = default;
};

// FNV-1a of the manifest path: the stable per-image id feeding recipe seeds.
inline std::uint64_t image_id(const std::string& path) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : path) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Recipe `index` for a width x height image. Index 0 is the identity with a
/// centred crop; the others draw rotation, flips, a shift within 10% of each
/// side and a crop origin from (id, index, seed) alone.
inline AugmentRecipe make_recipe(std::uint64_t id, std::size_t index, std::uint64_t seed, std::size_t width,
                                 std::size_t height, std::size_t crop = kCropSize) {
  if (width < crop || height < crop)
    throw ValidationError("make_recipe: image " + std::to_string(width) + "x" + std::to_string(height) +
                          " is smaller than the " + std::to_string(crop) + " crop");
  AugmentRecipe r;
  r.augment_index = index;
  r.crop = crop;
  if (index == 0) {
    r.crop_x = (width - crop) / 2;
    r.crop_y = (height - crop) / 2;
    return r;
  }
  std::mt19937_64 rng(mcompat::detail::mix64(id ^ mcompat::detail::mix64(seed ^ mcompat::detail::mix64(index))));
  auto pick = [&](std::size_t n) { return std::min(n - 1, std::size_t(mcompat::detail::uniform01(rng) * double(n))); };
  r.rotation = int(pick(4));
  r.flip_h = pick(2) == 1;
  r.flip_v = pick(2) == 1;
  const bool swapped = r.rotation % 2 == 1;
  const std::size_t w = swapped ? height : width, h = swapped ? width : height;
  const long max_dx = long(w / 10), max_dy = long(h / 10);
  r.translate_dx = long(pick(std::size_t(2 * max_dx + 1))) - max_dx;
  r.translate_dy = long(pick(std::size_t(2 * max_dy + 1))) - max_dy;
  r.crop_x = pick(w - crop + 1);
  r.crop_y = pick(h - crop + 1);
  return r;
}

// Quarter turn counter-clockwise: pixel (x, y) moves to (y, W-1-x).
inline ImageBuffer rotate90(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, img.width - 1 - x) = img.at(x, y);
  return out;
}

/// Rotation, flips, translation with edge replication, then the crop.
inline ImageBuffer apply_recipe(const ImageBuffer& img, const AugmentRecipe& r) {
  if (r.rotation < 0 || r.rotation > 3) throw ValidationError("apply_recipe: rotation must be 0..3 quarter turns");
  ImageBuffer cur = img;
  for (int i = 0; i < r.rotation; ++i) cur = rotate90(cur);
  const std::size_t W = cur.width, H = cur.height;
  if (r.crop_x + r.crop > W || r.crop_y + r.crop > H)
    throw ValidationError("apply_recipe: crop window (" + std::to_string(r.crop_x) + "," + std::to_string(r.crop_y) +
                          ")+" + std::to_string(r.crop) + " leaves the " + std::to_string(W) + "x" +
                          std::to_string(H) + " image");
  if (std::abs(r.translate_dx) > long(W / 10) || std::abs(r.translate_dy) > long(H / 10))
    throw ValidationError("apply_recipe: translation exceeds 10% of the image side");
  ImageBuffer out(r.crop, r.crop);
  for (std::size_t y = 0; y < r.crop; ++y) {
    // output row -> translated row -> flipped row of `cur`
    const long ty = std::clamp(long(r.crop_y + y) - r.translate_dy, 0L, long(H) - 1);
    const std::size_t sy = r.flip_v ? H - 1 - std::size_t(ty) : std::size_t(ty);
    for (std::size_t x = 0; x < r.crop; ++x) {
      const long tx = std::clamp(long(r.crop_x + x) - r.translate_dx, 0L, long(W) - 1);
      const std::size_t sx = r.flip_h ? W - 1 - std::size_t(tx) : std::size_t(tx);
      out.at(x, y) = cur.at(sx, sy);
    }
  }
  return out;
}

struct AugmentFactors {
  std::size_t compatible = 12;
  std::size_t incompatible = 3;
  std::size_t partially_compatible = 3;

  std::size_t of(CompatLabel l) const {
    switch (l) {
      case CompatLabel::compatible: return compatible;
      case CompatLabel::incompatible: return incompatible;
      case CompatLabel::partially_compatible: return partially_compatible;
    }
    return 0;
  }
  static AugmentFactors ones() { return {1, 1, 1}; }
};

struct AugmentedItem {
  ManifestEntry entry;
  AugmentRecipe recipe;
};

struct AugmentResult {
  std::vector<AugmentedItem> items;
  std::vector<std::string> skipped;  // paths smaller than the crop
  std::vector<std::string> warnings;
};

using SizeLookup = std::function<std::pair<std::size_t, std::size_t>(const ManifestEntry&)>;

/// Expands each training entry into factor(label) recipes; test entries are
/// never passed through here.
inline AugmentResult augment_expand(const std::vector<ManifestEntry>& entries, const AugmentFactors& factors,
                                    std::uint64_t seed, const SizeLookup& size_of, std::size_t crop = kCropSize) {
  for (auto l : {CompatLabel::compatible, CompatLabel::incompatible, CompatLabel::partially_compatible})
    if (factors.of(l) == 0) throw ConfigError("augment factor for " + label_str(l) + " must be positive");
  AugmentResult res;
  for (const auto& e : entries) {
    if (e.split != Split::train) throw UsageError("augment_expand: test entry '" + e.path + "' passed in");
    const auto [w, h] = size_of(e);
    if (w < crop || h < crop) {
      res.skipped.push_back(e.path);
      res.warnings.push_back("skipping " + e.path + ": " + std::to_string(w) + "x" + std::to_string(h) +
                             " is smaller than " + std::to_string(crop) + "x" + std::to_string(crop));
      continue;
    }
    const auto id = image_id(e.path);
    for (std::size_t i = 0; i < factors.of(e.label); ++i) res.items.push_back({e, make_recipe(id, i, seed, w, h, crop)});
  }
  return res;
}

// Identity recipe (centred crop) for evaluation items.
inline AugmentedItem identity_item(const ManifestEntry& e, std::size_t width, std::size_t height,
                                   std::size_t crop = kCropSize) {
  return {e, make_recipe(image_id(e.path), 0, 0, width, height, crop)};
}

}  // namespace mcompat::data
