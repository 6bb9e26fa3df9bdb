#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcompat/error.hpp"
#include "mcompat/metrics/metrics.hpp"

namespace mcompat::data {

enum class CompatLabel { compatible, incompatible, partially_compatible };
enum class Split { train, test };

inline std::string label_str(CompatLabel l) {
  switch (l) {
    case CompatLabel::compatible: return "compatible";
    case CompatLabel::incompatible: return "incompatible";
    case CompatLabel::partially_compatible: return "partially_compatible";
  }
  return "?";
}

inline std::optional<CompatLabel> parse_label(std::string_view s) {
  if (s == "compatible") return CompatLabel::compatible;
  if (s == "incompatible") return CompatLabel::incompatible;
  if (s == "partially_compatible") return CompatLabel::partially_compatible;
  return std::nullopt;
}

// Two-class view: partially compatible blends count as incompatible.
inline metrics::Label binary_label(CompatLabel l) {
  return l == CompatLabel::compatible ? metrics::Label::compatible : metrics::Label::incompatible;
}

inline std::string split_str(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestEntry {
  std::string path;
  CompatLabel label = CompatLabel::incompatible;
  Split split = Split::train;
  std::optional<double> scale_um_per_px;
  std::optional<std::string> source;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline nlohmann::ordered_json to_json(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["path"] = e.path;
  j["label"] = label_str(e.label);
  j["split"] = split_str(e.split);
  if (e.scale_um_per_px) j["scale_um_per_px"] = *e.scale_um_per_px;
  if (e.source) j["source"] = *e.source;
  return j;
}

/// One JSON object per line. Blank lines are skipped; unknown keys ignored.
inline std::vector<ManifestEntry> parse_manifest_text(const std::string& text, const std::string& origin = "manifest") {
  std::vector<ManifestEntry> out;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = origin + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
    auto str_field = [&](const char* key) -> std::string {
      if (!j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
      if (!j[key].is_string()) throw ParseError(where + ": field '" + key + "' must be a string");
      return j[key].get<std::string>();
    };
    ManifestEntry e;
    e.path = str_field("path");
    if (e.path.empty()) throw ValidationError(where + ": empty path");
    const auto label = str_field("label");
    const auto parsed = parse_label(label);
    if (!parsed) throw ValidationError(where + ": unknown label '" + label + "'");
    e.label = *parsed;
    const auto split = str_field("split");
    if (split == "train")
      e.split = Split::train;
    else if (split == "test")
      e.split = Split::test;
    else
      throw ValidationError(where + ": unknown split '" + split + "'");
    if (j.contains("scale_um_per_px") && !j["scale_um_per_px"].is_null()) {
      if (!j["scale_um_per_px"].is_number()) throw ParseError(where + ": scale_um_per_px must be a number");
      const double s = j["scale_um_per_px"].get<double>();
      if (!(s > 0)) throw ValidationError(where + ": scale_um_per_px must be positive");
      e.scale_um_per_px = s;
    }
    if (j.contains("source") && !j["source"].is_null()) {
      if (!j["source"].is_string()) throw ParseError(where + ": source must be a string");
      e.source = j["source"].get<std::string>();
    }
    out.push_back(std::move(e));
    if (end == text.size()) break;
  }
  return out;
}

inline std::vector<ManifestEntry> parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open manifest '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_manifest_text(text, path.string());
}

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  for (const auto& e : entries) out << to_json(e).dump() << '\n';
}

// Manifest paths are relative to the manifest's directory unless absolute.
inline std::filesystem::path resolve(const std::filesystem::path& manifest, const ManifestEntry& e) {
  std::filesystem::path p(e.path);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

}  // namespace mcompat::data
