#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcompat/data/augment.hpp"
#include "mcompat/tensor/tensor.hpp"
#include "mcompat/metrics/metrics.hpp"

namespace mcompat::data {

/// Normalization x = (pixel / 255 - mean) / std applied after replicating
/// the grey channel to three.
struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

/// Labelled 256x256 crops ready for batching.
class Dataset {
 public:
  void add(ImageBuffer image, metrics::Label label, std::string name = {}) {
    if (!images_.empty() && (image.width != images_[0].width || image.height != images_[0].height))
      throw ShapeError("Dataset: all images must share one size");
    images_.push_back(std::move(image));
    labels_.push_back(label);
    names_.push_back(std::move(name));
  }

  std::size_t size() const { return images_.size(); }
  bool empty() const { return images_.empty(); }
  const ImageBuffer& image(std::size_t i) const { return images_.at(i); }
  metrics::Label label(std::size_t i) const { return labels_.at(i); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<metrics::Label>& labels() const { return labels_; }

 private:
  std::vector<ImageBuffer> images_;
  std::vector<metrics::Label> labels_;
  std::vector<std::string> names_;
};

/// Decodes each source once and applies every recipe that refers to it.
inline Dataset materialize(const std::vector<AugmentedItem>& items, const std::filesystem::path& manifest_path) {
  Dataset ds;
  std::map<std::string, ImageBuffer> cache;
  for (const auto& it : items) {
    const auto file = resolve(manifest_path, it.entry).string();
    auto found = cache.find(file);
    if (found == cache.end()) found = cache.emplace(file, load_image(file)).first;
    ds.add(apply_recipe(found->second, it.recipe), binary_label(it.entry.label), it.entry.path);
  }
  return ds;
}

/// Seeded Fisher-Yates permutation of 0..n-1 for one epoch (seed xor epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::min(i - 1, std::size_t(mcompat::detail::uniform01(rng) * double(i)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

/// Consecutive slices of `order`; the last one may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(const std::vector<std::size_t>& order, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + std::ptrdiff_t(i),
                         order.begin() + std::ptrdiff_t(std::min(order.size(), i + batch_size)));
  return batches;
}

inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                        std::uint64_t epoch) {
  return batch_iter(epoch_permutation(n, seed, epoch), batch_size);
}

// B x 3 x H x W tensor of the selected items.
template <class T = float>
Tensor<T> to_tensor(const Dataset& ds, const std::vector<std::size_t>& idx, const Normalization& norm = {}) {
  if (idx.empty()) throw UsageError("to_tensor: empty batch");
  const std::size_t H = ds.image(idx[0]).height, W = ds.image(idx[0]).width, plane = H * W;
  Tensor<T> t({idx.size(), 3, H, W});
  auto out = t.mutable_data();
  T lut[256];
  for (int v = 0; v < 256; ++v) lut[v] = T((v / 255.0 - norm.mean) / norm.std);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& px = ds.image(idx[b]).pixels;
    T* dst = out.data() + b * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = lut[px[i]];
    std::copy_n(dst, plane, dst + plane);
    std::copy_n(dst, plane, dst + 2 * plane);
  }
  return t;
}

inline std::vector<int> class_indices(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> y;
  y.reserve(idx.size());
  for (auto i : idx) y.push_back(int(ds.label(i)));
  return y;
}

struct DatasetStats {
  std::size_t raw_total = 0, train_total = 0, test_total = 0;
  metrics::Rational train_incompatible_fraction, test_incompatible_fraction;
  std::size_t augmented_train_total = 0;
  std::size_t skipped = 0;
};

/// Counts over a manifest; augmented total = sum of class count x factor.
inline DatasetStats compute_stats(const std::vector<ManifestEntry>& entries, const AugmentFactors& factors,
                                  std::size_t skipped = 0) {
  DatasetStats s;
  std::size_t train_inc = 0, test_inc = 0;
  for (const auto& e : entries) {
    ++s.raw_total;
    const bool inc = binary_label(e.label) == metrics::Label::incompatible;
    if (e.split == Split::train) {
      ++s.train_total;
      train_inc += inc;
      s.augmented_train_total += factors.of(e.label);
    } else {
      ++s.test_total;
      test_inc += inc;
    }
  }
  if (s.train_total) s.train_incompatible_fraction = metrics::Rational::of(train_inc, s.train_total);
  if (s.test_total) s.test_incompatible_fraction = metrics::Rational::of(test_inc, s.test_total);
  s.skipped = skipped;
  return s;
}

inline nlohmann::ordered_json to_json(const DatasetStats& s) {
  auto frac = [](const metrics::Rational& r) {
    return nlohmann::ordered_json{{"num", r.num}, {"den", r.den}, {"value", r.value()}};
  };
  return {{"raw_total", s.raw_total},
          {"train_total", s.train_total},
          {"test_total", s.test_total},
          {"train_incompatible_fraction", frac(s.train_incompatible_fraction)},
          {"test_incompatible_fraction", frac(s.test_incompatible_fraction)},
          {"augmented_train_total", s.augmented_train_total},
          {"skipped", s.skipped}};
}

}  // namespace mcompat::data
