#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mcompat/error.hpp"

namespace mcompat::data {

// 8-bit grayscale, row-major.
struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

namespace detail {

class PgmCursor {
 public:
  PgmCursor(const std::vector<std::uint8_t>& bytes, std::string origin) : b_(bytes), origin_(std::move(origin)) {}

  // Next whitespace-delimited header token, skipping '#' comments.
  std::string token() {
    for (;;) {
      while (pos_ < b_.size() && std::isspace(b_[pos_])) ++pos_;
      if (pos_ < b_.size() && b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
        continue;
      }
      break;
    }
    std::string t;
    while (pos_ < b_.size() && !std::isspace(b_[pos_]) && b_[pos_] != '#') t += char(b_[pos_++]);
    if (t.empty()) throw FormatError(origin_ + ": truncated PGM header");
    return t;
  }
  std::size_t number(const char* what) {
    const auto t = token();
    std::size_t v = 0;
    for (char c : t) {
      if (c < '0' || c > '9') throw FormatError(origin_ + ": bad PGM " + what + " '" + t + "'");
      v = v * 10 + std::size_t(c - '0');
      if (v > (std::size_t{1} << 31)) throw FormatError(origin_ + ": PGM " + what + " too large");
    }
    return v;
  }
  // Exactly one whitespace byte separates maxval from the raster.
  void end_header() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw FormatError(origin_ + ": truncated PGM header");
    ++pos_;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

struct PgmHeader {
  std::size_t width = 0, height = 0, data_offset = 0;
};

inline PgmHeader parse_pgm_header(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  PgmCursor cur(bytes, origin);
  const auto magic = cur.token();
  if (magic != "P5") throw FormatError(origin + ": not a binary PGM (magic '" + magic + "', expected P5)");
  PgmHeader h;
  h.width = cur.number("width");
  h.height = cur.number("height");
  const auto maxval = cur.number("maxval");
  if (maxval != 255) throw FormatError(origin + ": PGM maxval " + std::to_string(maxval) + ", expected 255");
  if (h.width == 0 || h.height == 0) throw FormatError(origin + ": PGM has a zero dimension");
  cur.end_header();
  h.data_offset = cur.pos();
  return h;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path, std::size_t limit = SIZE_MAX) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes;
  if (limit == SIZE_MAX) {
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  } else {
    bytes.resize(limit);
    in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(limit));
    bytes.resize(std::size_t(in.gcount()));
  }
  return bytes;
}

}  // namespace detail

inline ImageBuffer decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>") {
  const auto h = detail::parse_pgm_header(bytes, origin);
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.data_offset < n)
    throw FormatError(origin + ": PGM payload truncated (" + std::to_string(bytes.size() - h.data_offset) + " of " +
                      std::to_string(n) + " bytes)");
  ImageBuffer img(h.width, h.height);
  std::copy_n(bytes.begin() + std::ptrdiff_t(h.data_offset), n, img.pixels.begin());
  return img;
}

inline ImageBuffer load_image(const std::filesystem::path& path) {
  return decode_pgm(detail::read_bytes(path), path.string());
}

// Width and height from the header only.
inline std::pair<std::size_t, std::size_t> image_size(const std::filesystem::path& path) {
  const auto h = detail::parse_pgm_header(detail::read_bytes(path, 4096), path.string());
  return {h.width, h.height};
}

inline std::vector<std::uint8_t> encode_pgm(const ImageBuffer& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  if (img.pixels.size() != img.width * img.height) throw UsageError("save_image: pixel count mismatch");
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

}  // namespace mcompat::data
