#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>

namespace layer_table {

// Layer-table oracle, independent of the model classes.
struct Table {
  std::uint64_t num, den;
  std::size_t params = 0;

  std::size_t w(std::size_t c) const { return std::max<std::size_t>(1, (2 * c * num + den) / (2 * den)); }
  void conv(std::size_t in, std::size_t out, std::size_t k, bool bias) { params += out * in * k * k + (bias ? out : 0); }
  void fc(std::size_t in, std::size_t out) { params += out * in + out; }
  void bn(std::size_t c) { params += 2 * c; }
};

inline std::size_t vgg16_table(std::uint64_t num, std::uint64_t den, std::size_t classes) {
  Table t{num, den};
  const std::size_t cfg[] = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  std::size_t in = 3;
  for (std::size_t c : cfg) {
    t.conv(in, t.w(c), 3, true);
    in = t.w(c);
  }
  t.fc(in * 49, t.w(4096));
  t.fc(t.w(4096), t.w(4096));
  t.fc(t.w(4096), classes);
  return t.params;
}

inline std::size_t resnet18_table(std::uint64_t num, std::uint64_t den, std::size_t classes) {
  Table t{num, den};
  t.conv(3, t.w(64), 7, false);
  t.bn(t.w(64));
  std::size_t in = t.w(64);
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t out = t.w(64u << stage);
    for (int b = 0; b < 2; ++b) {
      const bool down = b == 0 && stage > 0;
      t.conv(in, out, 3, false);
      t.bn(out);
      t.conv(out, out, 3, false);
      t.bn(out);
      if (down || in != out) {
        t.conv(in, out, 1, false);
        t.bn(out);
      }
      in = out;
    }
  }
  t.fc(in, classes);
  return t.params;
}

inline std::size_t densenet121_table(std::uint64_t num, std::uint64_t den, std::size_t classes) {
  Table t{num, den};
  const std::size_t k = t.w(32);
  std::size_t c = t.w(64);
  t.conv(3, c, 7, false);
  t.bn(c);
  const std::size_t layers[] = {6, 12, 24, 16};
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::size_t j = 0; j < layers[b]; ++j) {
      t.bn(c);
      t.conv(c, 4 * k, 1, false);
      t.bn(4 * k);
      t.conv(4 * k, k, 3, false);
      c += k;
    }
    if (b < 3) {
      t.bn(c);
      t.conv(c, std::max<std::size_t>(1, c / 2), 1, false);
      c = std::max<std::size_t>(1, c / 2);
    }
  }
  t.bn(c);
  t.fc(c, classes);
  return t.params;
}

}  // namespace layer_table
