#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mcompat/data/synth.hpp"
#include "mcompat/experiment/config.hpp"
#include "mcompat/experiment/gradcheck_suite.hpp"
#include "mcompat/nn/architectures.hpp"
#include "mcompat/optim/train.hpp"
#include "mcompat/sobel/sobel.hpp"

namespace mcompat::experiment {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Keeps freed activation memory in the heap instead of handing it back to the
// kernel after every layer; training allocates and frees the same large
// blocks each step.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_TOP_PAD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

enum class SeedStream : std::uint64_t { init = 1, augment = 2 };

inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream s) {
  return mcompat::detail::mix64(seed ^ mcompat::detail::mix64(std::uint64_t(s)));
}

// ---------------------------------------------------------------- data

struct ExperimentData {
  data::Dataset train, test;
  data::DatasetStats stats;
  std::vector<std::string> warnings;
};

/// Train split expanded by the configured factors (or identity crops only),
/// test split as centred crops.
inline ExperimentData load_data(const ExperimentConfig& cfg, std::uint64_t seed, bool augment = true) {
  if (cfg.manifest.empty()) throw ConfigError("manifest is required");
  const fs::path manifest = cfg.manifest;
  const auto entries = data::parse_manifest(manifest);
  std::vector<data::ManifestEntry> train;
  std::vector<data::AugmentedItem> test;
  for (const auto& e : entries) {
    if (e.split == data::Split::train) {
      train.push_back(e);
    } else {
      const auto [w, h] = data::image_size(data::resolve(manifest, e));
      test.push_back(data::identity_item(e, w, h));
    }
  }
  const auto factors = augment ? cfg.augment : data::AugmentFactors::ones();
  auto expanded = data::augment_expand(
      train, factors, derive_seed(seed, SeedStream::augment),
      [&](const data::ManifestEntry& e) { return data::image_size(data::resolve(manifest, e)); });
  ExperimentData out;
  out.train = data::materialize(expanded.items, manifest);
  out.test = data::materialize(test, manifest);
  out.stats = data::compute_stats(entries, factors, expanded.skipped.size());
  out.stats.augmented_train_total = expanded.items.size();
  out.warnings = std::move(expanded.warnings);
  return out;
}

// ---------------------------------------------------------------- models

inline nn::ModelSpec model_spec(const ExperimentConfig& cfg) {
  nn::ModelSpec spec;
  spec.family = cfg.family;
  spec.width = cfg.width;
  spec.validate();
  return spec;
}

inline std::unique_ptr<nn::Model<float>> make_model(const ExperimentConfig& cfg, std::uint64_t seed) {
  return nn::build_model<float>(model_spec(cfg), derive_seed(seed, SeedStream::init));
}

/// Loads everything except the classification head, which keeps its fresh
/// initialisation. The report's `missing` list names what was not loaded.
inline nn::LoadReport load_pretrained(nn::Model<float>& model, const fs::path& path) {
  auto store = nn::read_weight_file(path);
  const auto head = model.head_names();
  std::erase_if(store.entries,
                [&](const auto& e) { return std::find(head.begin(), head.end(), e.first) != head.end(); });
  return nn::apply_weights(model, store, false);
}

inline std::string model_label(const ExperimentConfig& cfg) {
  return std::string(nn::family_name(cfg.family)) + (cfg.pretrained_weights.empty() ? "" : "-pretrained");
}

// ---------------------------------------------------------------- run log

inline json to_json(const metrics::ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

inline metrics::ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  return {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("fn").get<std::uint64_t>(),
          j.at("tn").get<std::uint64_t>()};
}

inline json epoch_json(const optim::EpochRecord& r, bool timing) {
  json j{{"type", "epoch"},
         {"epoch", r.epoch},
         {"train_loss", r.train_loss},
         {"train_acc", r.train_acc},
         {"test_acc", r.test_acc},
         {"train_correct", r.train_correct},
         {"train_seen", r.train_seen},
         {"test_confusion", to_json(r.test_confusion)}};
  if (timing) j["wall_ms"] = r.wall_ms;
  return j;
}

inline json summary_json(const optim::RunLog& log, const ExperimentConfig& cfg) {
  json config;
  for (const auto& k : config_keys()) config[k] = get_value(cfg, k);
  return {{"type", "summary"},
          {"seed", log.seed},
          {"epochs_run", log.epochs.size()},
          {"best_test_acc", log.best_test_acc},
          {"best_epoch", log.best_epoch},
          {"best_confusion", to_json(log.best_confusion)},
          {"final_confusion", to_json(log.final_confusion)},
          {"config", config}};
}

/// Parses a run log written by train(); an absent summary line (aborted run) is a format error.
inline optim::RunLog read_runlog(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open run log '" + path.string() + "'");
  optim::RunLog log;
  bool summary = false;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "epoch") {
        optim::EpochRecord r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.train_loss = j.at("train_loss").get<double>();
        r.train_acc = j.at("train_acc").get<double>();
        r.test_acc = j.at("test_acc").get<double>();
        r.train_correct = j.at("train_correct").get<std::size_t>();
        r.train_seen = j.at("train_seen").get<std::size_t>();
        r.test_confusion = confusion_from_json(j.at("test_confusion"));
        if (j.contains("wall_ms")) r.wall_ms = j["wall_ms"].get<double>();
        log.epochs.push_back(r);
      } else if (type == "summary") {
        log.seed = j.at("seed").get<std::uint64_t>();
        log.best_test_acc = j.at("best_test_acc").get<double>();
        log.best_epoch = j.at("best_epoch").get<std::size_t>();
        log.best_confusion = confusion_from_json(j.at("best_confusion"));
        log.final_confusion = confusion_from_json(j.at("final_confusion"));
        summary = true;
      } else {
        throw FormatError("unknown record type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (!summary) throw FormatError(path.string() + ": no summary record (aborted run?)");
  return log;
}

// ---------------------------------------------------------------- metrics CSV

inline constexpr const char* kMetricsHeader = "model,seed,test_accu,train_accu,precision,recall,specificity,f1";

inline std::string metrics_row(const std::string& model, std::uint64_t seed, const metrics::ConfusionMatrix& test,
                               const std::optional<metrics::Rational>& train_acc) {
  const auto r = metrics::compute_metrics(test);
  using R = metrics::MetricsReport;
  return model + "," + std::to_string(seed) + "," + R::render(r.accuracy) + "," + R::render(train_acc) + "," +
         R::render(r.precision) + "," + R::render(r.recall) + "," + R::render(r.specificity) + "," +
         R::render(r.f1);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------- train

struct TrainResult {
  optim::RunLog log;
  nn::LoadReport pretrained;
  std::vector<std::string> warnings;
};

/// One run into `run_dir`: config.txt, runlog.jsonl, final.mcwt, best.mcwt
/// and metrics.csv (test metrics and train accuracy of the best epoch).
inline TrainResult train(const ExperimentConfig& cfg, const fs::path& run_dir, std::ostream* progress = nullptr) {
  cfg.validate();
  fs::create_directories(run_dir);
  write_text(run_dir / "config.txt", to_text(cfg));

  auto ds = load_data(cfg, cfg.seed);
  TrainResult res;
  res.warnings = ds.warnings;
  auto model = make_model(cfg, cfg.seed);
  if (!cfg.pretrained_weights.empty()) res.pretrained = load_pretrained(*model, cfg.pretrained_weights);
  nn::set_trainable(*model, cfg.finetune_policy);

  std::ofstream runlog(run_dir / "runlog.jsonl", std::ios::binary | std::ios::trunc);
  if (!runlog) throw FormatError("cannot write run log in '" + run_dir.string() + "'");
  optim::TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.adam.lr = cfg.learning_rate;
  tc.seed = cfg.seed;
  tc.norm = cfg.norm;
  tc.eval_batch = cfg.eval_batch;
  tc.on_epoch = [&](const optim::EpochRecord& r) {
    runlog << epoch_json(r, cfg.record_timing).dump() << '\n' << std::flush;
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %zu/%zu  loss %.4f  train %.4f  test %.4f  (%.1f s)\n", r.epoch,
                    cfg.epochs, r.train_loss, r.train_acc, r.test_acc, r.wall_ms / 1000);
      *progress << buf << std::flush;
    }
  };
  auto out = optim::training_loop(*model, ds.train, ds.test, tc);
  runlog << summary_json(out.log, cfg).dump() << '\n';
  runlog.close();

  nn::save_weights(*model, run_dir / "final.mcwt");
  nn::write_weight_file(out.best_weights, run_dir / "best.mcwt");
  const auto& best = out.log.epochs.at(out.log.best_epoch - 1);
  write_text(run_dir / "metrics.csv",
             std::string(kMetricsHeader) + "\n" +
                 metrics_row(model_label(cfg), cfg.seed, out.log.best_confusion,
                             metrics::Rational::of(best.train_correct, best.train_seen)) +
                 "\n");
  res.log = std::move(out.log);
  return res;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateResult {
  metrics::ConfusionMatrix test;
  std::optional<metrics::Rational> train_accuracy;
  std::string row;  // metrics CSV line without header
};

/// Eval-mode metrics on the test split, plus accuracy on the train split's
/// identity crops when there is one.
template <class T>
EvaluateResult evaluate_model(nn::Model<T>& model, const ExperimentData& ds, const ExperimentConfig& cfg,
                              const std::string& label) {
  if (ds.test.empty()) throw UsageError("evaluate: the test split is empty");
  EvaluateResult res;
  res.test = optim::evaluate(model, ds.test, cfg.norm, cfg.eval_batch).confusion;
  if (!ds.train.empty()) {
    const auto tr = optim::evaluate(model, ds.train, cfg.norm, cfg.eval_batch).confusion;
    res.train_accuracy = metrics::Rational::of(tr.tp + tr.tn, tr.total());
  }
  res.row = metrics_row(label, cfg.seed, res.test, res.train_accuracy);
  return res;
}

inline EvaluateResult evaluate(const ExperimentConfig& cfg, const fs::path& weights) {
  auto model = make_model(cfg, cfg.seed);
  nn::load_weights(*model, weights, true);
  return evaluate_model(*model, load_data(cfg, cfg.seed, false), cfg, model_label(cfg));
}

inline std::string confusion_csv(const metrics::ConfusionMatrix& cm) {
  return "tp,fp,fn,tn\n" + std::to_string(cm.tp) + "," + std::to_string(cm.fp) + "," + std::to_string(cm.fn) + "," +
         std::to_string(cm.tn) + "\n";
}

// ---------------------------------------------------------------- predict

struct CaseItem {
  std::string path;                    // as read from disk
  std::string name;                    // as printed
  std::optional<metrics::Label> label;
};

struct CaseStudyOutcome {
  std::size_t rows = 0;
  std::size_t failed = 0;
};

inline constexpr const char* kCaseStudyHeader = "image,label,logit_incompatible,logit_compatible,p_incompatible,decision";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// One row per readable image, in input order. Images larger than the crop
/// are centre-cropped; unreadable or undersized images are reported on `err`.
template <class T>
CaseStudyOutcome case_study_report(nn::Model<T>& model, const std::vector<CaseItem>& items,
                                   const data::Normalization& norm, std::ostream& csv, std::ostream& err) {
  CaseStudyOutcome out;
  csv << kCaseStudyHeader << '\n';
  NoGradGuard no_grad;
  for (const auto& it : items) {
    try {
      const auto img = data::load_image(it.path);
      data::Dataset one;
      one.add(data::apply_recipe(img, data::make_recipe(0, 0, 0, img.width, img.height)), metrics::Label::compatible);
      const auto z = model.forward(data::to_tensor<T>(one, {0}, norm), Mode::eval, nullptr);
      if (z.numel() != 2) throw ShapeError("predict: model must emit 2 logits per image");
      const auto p = metrics::compat_criterion(double(z.data()[0]), double(z.data()[1]));
      csv << csv_field(it.name) << ',' << (it.label ? metrics::label_name(*it.label) : "") << ','
          << format_double(p.logit_incompatible) << ',' << format_double(p.logit_compatible) << ','
          << format_double(p.p_incompatible) << ',' << metrics::label_name(p.decision) << '\n';
      ++out.rows;
    } catch (const std::exception& e) {
      err << "error: " << it.name << ": " << e.what() << '\n';
      ++out.failed;
    }
  }
  return out;
}

inline std::vector<CaseItem> manifest_items(const fs::path& manifest, std::optional<data::Split> split = {}) {
  std::vector<CaseItem> items;
  for (const auto& e : data::parse_manifest(manifest))
    if (!split || e.split == *split) items.push_back({data::resolve(manifest, e).string(), e.path, data::binary_label(e.label)});
  return items;
}

// ---------------------------------------------------------------- sobel

struct SobelOutcome {
  std::vector<double> scores;
  std::vector<metrics::Label> labels;  // only when every item is labelled
  std::size_t failed = 0;
};

inline SobelOutcome sobel_report(const std::vector<CaseItem>& items, double boundary, std::ostream& csv,
                                 std::ostream& err) {
  SobelOutcome out;
  bool labelled = true;
  csv << "path,score,boundary,decision\n";
  for (const auto& it : items) {
    try {
      const auto d = sobel::sobel_classify(data::load_image(it.path), boundary);
      csv << csv_field(it.name) << ',' << format_double(d.score) << ',' << format_double(boundary) << ','
          << metrics::label_name(d.decision) << '\n';
      out.scores.push_back(d.score);
      labelled = labelled && it.label.has_value();
      if (it.label) out.labels.push_back(*it.label);
    } catch (const std::exception& e) {
      err << "error: " << it.name << ": " << e.what() << '\n';
      ++out.failed;
    }
  }
  if (!labelled) out.labels.clear();
  return out;
}

inline std::string sweep_csv(const std::vector<sobel::SweepRow>& rows) {
  using R = metrics::MetricsReport;
  std::string s = "boundary,tp,fp,fn,tn,accuracy,precision,recall,specificity,f1,best\n";
  for (const auto& r : rows)
    s += format_double(r.boundary) + "," + std::to_string(r.cm.tp) + "," + std::to_string(r.cm.fp) + "," +
         std::to_string(r.cm.fn) + "," + std::to_string(r.cm.tn) + "," + R::render(r.report.accuracy) + "," +
         R::render(r.report.precision) + "," + R::render(r.report.recall) + "," + R::render(r.report.specificity) +
         "," + R::render(r.report.f1) + "," + (r.best ? "1" : "0") + "\n";
  return s;
}

// ---------------------------------------------------------------- augment

struct AugmentOutcome {
  data::AugmentResult result;
  data::DatasetStats stats;
};

/// Writes augmented.jsonl (entry plus recipe per line) and stats.json, and
/// optionally the cropped images themselves under images/.
inline AugmentOutcome augment(const ExperimentConfig& cfg, const fs::path& out_dir, bool write_images) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("manifest is required");
  const fs::path manifest = cfg.manifest;
  const auto entries = data::parse_manifest(manifest);
  std::vector<data::ManifestEntry> train;
  for (const auto& e : entries)
    if (e.split == data::Split::train) train.push_back(e);
  AugmentOutcome out;
  out.result = data::augment_expand(train, cfg.augment, derive_seed(cfg.seed, SeedStream::augment),
                                    [&](const data::ManifestEntry& e) {
                                      return data::image_size(data::resolve(manifest, e));
                                    });
  out.stats = data::compute_stats(entries, cfg.augment, out.result.skipped.size());
  out.stats.augmented_train_total = out.result.items.size();

  fs::create_directories(out_dir);
  if (write_images) fs::create_directories(out_dir / "images");
  std::ofstream lines(out_dir / "augmented.jsonl", std::ios::binary | std::ios::trunc);
  if (!lines) throw FormatError("cannot write '" + (out_dir / "augmented.jsonl").string() + "'");
  std::map<std::string, data::ImageBuffer> cache;
  for (std::size_t i = 0; i < out.result.items.size(); ++i) {
    const auto& [e, r] = out.result.items[i];
    auto j = data::to_json(e);
    j["augment_index"] = r.augment_index;
    j["rotation_deg"] = 90 * r.rotation;
    j["flip_h"] = r.flip_h;
    j["flip_v"] = r.flip_v;
    j["translate_dx"] = r.translate_dx;
    j["translate_dy"] = r.translate_dy;
    j["crop_x"] = r.crop_x;
    j["crop_y"] = r.crop_y;
    j["crop"] = r.crop;
    if (write_images) {
      const auto src = data::resolve(manifest, e).string();
      auto found = cache.find(src);
      if (found == cache.end()) found = cache.emplace(src, data::load_image(src)).first;
      char name[48];
      std::snprintf(name, sizeof name, "images/aug_%06zu.pgm", i);
      data::save_image(data::apply_recipe(found->second, r), out_dir / name);
      j["image"] = name;
    }
    lines << j.dump() << '\n';
  }
  write_text(out_dir / "stats.json", data::to_json(out.stats).dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------- seeds

struct BoxStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  std::size_t n = 0;
};

// Nearest rank: the ceil(q/4 * n)-th smallest value (1-based), q = 1..3.
inline BoxStats box_stats(std::vector<double> v) {
  if (v.empty()) throw UsageError("box_stats: no values");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  auto rank = [&](std::size_t q) { return v[std::max<std::size_t>(1, (q * n + 3) / 4) - 1]; };
  return {v.front(), rank(1), rank(2), rank(3), v.back(), n};
}

struct SeedRun {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  double best_test_acc = 0;
  std::string error;
  int exit_code = 0;
};

struct SeedsResult {
  std::vector<SeedRun> runs;
  std::optional<BoxStats> stats;
  std::size_t completed() const {
    return std::size_t(std::count_if(runs.begin(), runs.end(), [](const SeedRun& r) { return r.ok; }));
  }
};

inline fs::path run_dir(const fs::path& root, std::size_t i) { return root / ("run_" + std::to_string(i)); }

/// Runs i = 0..num_runs-1 with seed base+i into run_<i>/, then aggregates the
/// best test accuracies read back from the run logs on disk.
inline SeedsResult seeds(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream* progress = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_text(out_dir / "config.txt", to_text(cfg));
  SeedsResult res;
  for (std::size_t i = 0; i < cfg.num_runs; ++i) {
    SeedRun run;
    run.run = i;
    run.seed = cfg.seed + i;
    auto rc = cfg;
    rc.seed = run.seed;
    if (progress) *progress << "run " << i << " (seed " << run.seed << ")\n";
    try {
      train(rc, run_dir(out_dir, i), progress);
      run.ok = true;
    } catch (const Error& e) {
      run.error = e.what();
      run.exit_code = exit_code(e);
    }
    res.runs.push_back(run);
  }

  std::vector<double> best;
  std::string box = "run,seed,best_test_acc\n";
  for (auto& r : res.runs) {
    if (!r.ok) continue;
    r.best_test_acc = read_runlog(run_dir(out_dir, r.run) / "runlog.jsonl").best_test_acc;
    best.push_back(r.best_test_acc);
    box += std::to_string(r.run) + "," + std::to_string(r.seed) + "," + format_double(r.best_test_acc) + "\n";
  }
  write_text(out_dir / "boxplot.csv", box);
  json summary{{"runs", cfg.num_runs}, {"completed", best.size()}};
  if (!best.empty()) {
    res.stats = box_stats(best);
    summary["min"] = res.stats->min;
    summary["q1"] = res.stats->q1;
    summary["median"] = res.stats->median;
    summary["q3"] = res.stats->q3;
    summary["max"] = res.stats->max;
  }
  json failed = json::array();
  for (const auto& r : res.runs)
    if (!r.ok) failed.push_back({{"run", r.run}, {"seed", r.seed}, {"error", r.error}});
  summary["failed"] = failed;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckSummary {
  std::size_t checks = 0;
  std::size_t failures = 0;
};

/// Every op case, then each family at width 1/8 on a 1x3x64x64 input.
inline GradcheckSummary run_gradcheck(std::ostream& out, bool ops_only = false, std::size_t samples = 2) {
  GradcheckSummary s;
  auto report = [&](const GradcheckResult& r, const std::string& name) {
    ++s.checks;
    s.failures += !r.passed;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error);
    out << (r.passed ? "ok   " : "FAIL ") << name << "  max_rel_error " << buf << "  (" << r.checked
        << " coordinates)";
    if (!r.passed) out << "  worst " << r.worst;
    out << '\n' << std::flush;
  };
  for (const auto& c : op_gradcheck_cases()) report(c.run({}), c.name);
  if (!ops_only)
    for (auto f : {nn::Family::vgg16, nn::Family::resnet18, nn::Family::densenet121})
      report(architecture_gradcheck(f, {1, 8}, 64, samples, {}), std::string(nn::family_name(f)) + " 1/8 64x64");
  if (s.failures == 0)
    out << "all " << s.checks << " checks passed\n";
  else
    out << s.failures << " of " << s.checks << " checks failed\n";
  return s;
}

}  // namespace mcompat::experiment
