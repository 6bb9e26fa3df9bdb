#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mcompat/nn/model.hpp"

// MCWT weight files, little-endian:
//   "MCWT" | u32 version (=1) | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 rank | u32 extents[rank] | u8 dtype (0 = f32) | f32 payload
//   u32 CRC32 of all preceding bytes

namespace mcompat::nn {

class LoadError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr char kWeightMagic[4] = {'M', 'C', 'W', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces
  while (size > 0) {
    const auto piece = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, piece);
    data += piece;
    size -= piece;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Ordered name -> f32 tensor map. Insertion order is the file order.
struct WeightStore {
  std::uint32_t version = kWeightVersion;
  std::string provenance;  // in-memory only; not part of the file
  std::vector<std::pair<std::string, Tensor<float>>> entries;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }

  void add(std::string name, Tensor<float> t) {
    if (find(name)) throw UsageError("duplicate weight name '" + name + "'");
    entries.emplace_back(std::move(name), std::move(t));
  }
};

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& b, std::uint8_t v) { b.push_back(v); }
inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("weight file truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = std::uint16_t(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  const std::uint8_t* bytes(std::size_t n) {
    need(n);
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const WeightStore& store) {
  std::vector<std::uint8_t> b(std::begin(kWeightMagic), std::end(kWeightMagic));
  detail::put_u32(b, kWeightVersion);
  detail::put_u32(b, std::uint32_t(store.entries.size()));
  for (const auto& [name, t] : store.entries) {
    if (name.size() > 0xFFFF) throw UsageError("weight name too long: " + name);
    if (t.rank() > 0xFF) throw UsageError("tensor rank too large for " + name);
    detail::put_u16(b, std::uint16_t(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    detail::put_u8(b, std::uint8_t(t.rank()));
    for (auto d : t.dims()) detail::put_u32(b, std::uint32_t(d));
    detail::put_u8(b, 0);
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(b, bits);
    }
  }
  detail::put_u32(b, crc32_of(b.data(), b.size()));
  return b;
}

inline WeightStore decode_weights(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw FormatError("weight file truncated (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kWeightMagic, 4) != 0) throw FormatError("bad weight file magic");
  const std::size_t body = bytes.size() - 4;
  detail::Reader crc_reader(bytes.data() + body, 4);
  if (crc_reader.u32() != crc32_of(bytes.data(), body)) throw FormatError("weight file CRC mismatch");
  detail::Reader r(bytes.data(), body);
  r.bytes(4);
  WeightStore store;
  store.version = r.u32();
  if (store.version != kWeightVersion)
    throw FormatError("unsupported weight format version " + std::to_string(store.version));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    const auto* name_bytes = r.bytes(len);
    std::string name(reinterpret_cast<const char*>(name_bytes), len);
    const std::uint8_t rank = r.u8();
    Dims dims;
    for (std::uint8_t j = 0; j < rank; ++j) {
      dims.push_back(r.u32());
      if (dims.back() == 0) throw FormatError("zero extent in tensor '" + name + "'");
    }
    if (r.u8() != 0) throw FormatError("unsupported dtype in tensor '" + name + "'");
    const std::size_t n = numel_of(dims);
    const auto* payload = r.bytes(n * 4);
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = std::uint32_t(payload[4 * k]) | std::uint32_t(payload[4 * k + 1]) << 8 |
                           std::uint32_t(payload[4 * k + 2]) << 16 | std::uint32_t(payload[4 * k + 3]) << 24;
      std::memcpy(&values[k], &bits, 4);
    }
    if (store.find(name)) throw FormatError("duplicate tensor name '" + name + "'");
    store.entries.emplace_back(std::move(name), Tensor<float>(std::move(dims), std::move(values)));
  }
  if (r.pos() != body) throw FormatError("trailing bytes before CRC in weight file");
  return store;
}

inline void write_weight_file(const WeightStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline WeightStore read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_weights(bytes);
}

template <class T>
WeightStore snapshot(const Model<T>& model) {
  WeightStore store;
  for (const auto& p : model.state()) store.add(p.name, p.value.template cast<float>());
  return store;
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // in the model, absent from the file
  std::vector<std::string> mismatched;  // dims differ
  std::vector<std::string> unexpected;  // in the file, absent from the model

  std::vector<std::string> skipped() const {
    auto s = missing;
    s.insert(s.end(), mismatched.begin(), mismatched.end());
    return s;
  }
};

/// Assigns tensors by name. Under `strict` any missing or mismatched name is
/// an error and the model is left unchanged.
template <class T>
LoadReport apply_weights(Model<T>& model, const WeightStore& store, bool strict) {
  LoadReport report;
  auto slots = model.state();
  std::vector<std::pair<Parameter<T>*, const Tensor<float>*>> plan;
  std::map<std::string, bool> known;
  for (auto& slot : slots) {
    known[slot.name] = true;
    const Tensor<float>* src = store.find(slot.name);
    if (!src) {
      report.missing.push_back(slot.name);
    } else if (src->dims() != slot.value.dims()) {
      report.mismatched.push_back(slot.name + " file " + dims_str(src->dims()) + " model " +
                                  dims_str(slot.value.dims()));
    } else {
      plan.emplace_back(&slot, src);
    }
  }
  for (const auto& [name, t] : store.entries)
    if (!known.count(name)) report.unexpected.push_back(name);
  if (strict && (!report.missing.empty() || !report.mismatched.empty())) {
    std::string msg = "strict weight load failed:";
    for (const auto& m : report.missing) msg += " missing " + m + ";";
    for (const auto& m : report.mismatched) msg += " mismatched " + m + ";";
    throw LoadError(msg);
  }
  for (auto& [slot, src] : plan) {
    auto dst = slot->value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(src->data()[i]);
    report.loaded.push_back(slot->name);
  }
  // Mismatch entries carry dims for diagnostics; keep bare names for callers.
  for (auto& m : report.mismatched) m = m.substr(0, m.find(' '));
  return report;
}

template <class T>
void save_weights(const Model<T>& model, const std::filesystem::path& path) {
  write_weight_file(snapshot(model), path);
}

template <class T>
LoadReport load_weights(Model<T>& model, const std::filesystem::path& path, bool strict) {
  return apply_weights(model, read_weight_file(path), strict);
}

}  // namespace mcompat::nn
