#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcompat/data/augment.hpp"
#include "mcompat/data/dataset.hpp"
#include "mcompat/nn/model.hpp"

namespace mcompat::experiment {

struct ExperimentConfig {
  nn::Family family = nn::Family::vgg16;
  nn::Ratio width{1, 1};
  std::string pretrained_weights;  // empty: train from scratch
  nn::TrainPolicy finetune_policy = nn::TrainPolicy::all;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  std::size_t num_runs = 20;
  std::string manifest;
  data::AugmentFactors augment;
  data::Normalization norm;
  std::string output_dir = "runs";
  std::size_t eval_batch = 32;
  bool record_timing = false;  // adds wall_ms to the run log, which then differs run to run

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (num_runs < 1) throw ConfigError("num_runs must be >= 1");
    if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
    if (!(norm.std > 0) || !std::isfinite(norm.std) || !std::isfinite(norm.mean))
      throw ConfigError("norm_std must be > 0 and norm_mean finite");
    if (augment.compatible < 1 || augment.incompatible < 1 || augment.partially_compatible < 1)
      throw ConfigError("augment factors must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }
};

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string ratio_str(const nn::Ratio& r) { return std::to_string(r.num) + "/" + std::to_string(r.den); }

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<Field> f{
      {"family", [](C& c, S v) { c.family = nn::parse_family(v); },
       [](const C& c) { return std::string(nn::family_name(c.family)); }},
      {"width", [](C& c, S v) { c.width = nn::parse_ratio(v); }, [](const C& c) { return ratio_str(c.width); }},
      {"pretrained_weights", [](C& c, S v) { c.pretrained_weights = v; },
       [](const C& c) { return c.pretrained_weights; }},
      {"finetune_policy", [](C& c, S v) { c.finetune_policy = nn::parse_policy(v); },
       [](const C& c) { return std::string(nn::policy_name(c.finetune_policy)); }},
      {"epochs", [](C& c, S v) { c.epochs = parse_unsigned<std::size_t>("epochs", v); },
       [](const C& c) { return std::to_string(c.epochs); }},
      {"batch_size", [](C& c, S v) { c.batch_size = parse_unsigned<std::size_t>("batch_size", v); },
       [](const C& c) { return std::to_string(c.batch_size); }},
      {"learning_rate", [](C& c, S v) { c.learning_rate = parse_real("learning_rate", v); },
       [](const C& c) { return format_double(c.learning_rate); }},
      {"seed", [](C& c, S v) { c.seed = parse_unsigned<std::uint64_t>("seed", v); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"num_runs", [](C& c, S v) { c.num_runs = parse_unsigned<std::size_t>("num_runs", v); },
       [](const C& c) { return std::to_string(c.num_runs); }},
      {"manifest", [](C& c, S v) { c.manifest = v; }, [](const C& c) { return c.manifest; }},
      {"augment_compatible",
       [](C& c, S v) { c.augment.compatible = parse_unsigned<std::size_t>("augment_compatible", v); },
       [](const C& c) { return std::to_string(c.augment.compatible); }},
      {"augment_incompatible",
       [](C& c, S v) { c.augment.incompatible = parse_unsigned<std::size_t>("augment_incompatible", v); },
       [](const C& c) { return std::to_string(c.augment.incompatible); }},
      {"augment_partially_compatible",
       [](C& c, S v) {
         c.augment.partially_compatible = parse_unsigned<std::size_t>("augment_partially_compatible", v);
       },
       [](const C& c) { return std::to_string(c.augment.partially_compatible); }},
      {"norm_mean", [](C& c, S v) { c.norm.mean = parse_real("norm_mean", v); },
       [](const C& c) { return format_double(c.norm.mean); }},
      {"norm_std", [](C& c, S v) { c.norm.std = parse_real("norm_std", v); },
       [](const C& c) { return format_double(c.norm.std); }},
      {"output_dir", [](C& c, S v) { c.output_dir = v; }, [](const C& c) { return c.output_dir; }},
      {"eval_batch", [](C& c, S v) { c.eval_batch = parse_unsigned<std::size_t>("eval_batch", v); },
       [](const C& c) { return std::to_string(c.eval_batch); }},
      {"record_timing", [](C& c, S v) { c.record_timing = parse_flag("record_timing", v); },
       [](const C& c) { return std::string(c.record_timing ? "true" : "false"); }},
  };
  return f;
}

}  // namespace detail

/// Config keys in snapshot order (snake_case; flags are the kebab-case form).
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.emplace_back(f.key);
  return keys;
}

inline std::string flag_name(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

inline void set_value(ExperimentConfig& cfg, std::string key, const std::string& value) {
  for (auto& c : key)
    if (c == '-') c = '_';
  for (const auto& f : detail::fields())
    if (key == f.key) return f.set(cfg, value);
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_value(const ExperimentConfig& cfg, const std::string& key) {
  for (const auto& f : detail::fields())
    if (key == f.key) return f.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

/// `key = value` lines; '#' starts a comment. Later files or flags override.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::size_t> seen;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(n);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    if (auto [it, fresh] = seen.emplace(key, n); !fresh)
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    try {
      set_value(cfg, key, detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

inline std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace mcompat::experiment
