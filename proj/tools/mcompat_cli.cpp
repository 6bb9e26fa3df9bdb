#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>

#include "mcompat/experiment/experiment.hpp"

namespace fs = std::filesystem;
using namespace mcompat;
using namespace mcompat::experiment;

namespace {

// --config plus one --<key> flag per config field; values are applied after the file.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys())
      app->add_option("--" + flag_name(key), overrides[key], "override '" + key + "'")->default_str("");
  }

  ExperimentConfig resolve(const CLI::App* app) const {
    ExperimentConfig cfg;
    if (!file.empty()) cfg = load_config(file);
    for (const auto& key : config_keys())
      if (app->count("--" + flag_name(key))) set_value(cfg, key, overrides.at(key));
    cfg.validate();
    return cfg;
  }
};

std::vector<CaseItem> path_items(const std::vector<std::string>& paths) {
  std::vector<CaseItem> items;
  for (const auto& p : paths) items.push_back({p, p, std::nullopt});
  return items;
}

std::optional<data::Split> parse_split(const std::string& s) {
  if (s == "all") return std::nullopt;
  if (s == "train") return data::Split::train;
  if (s == "test") return data::Split::test;
  throw ConfigError("split must be all, train or test");
}

// Writes to `path`, or stdout when it is empty.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty()) return;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    file_.open(path, std::ios::binary | std::ios::trunc);
    if (!file_) throw FormatError("cannot open '" + path + "' for writing");
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Micrograph compatibility classifier toolkit"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "synthesize a labelled micrograph set");
  std::string gen_out;
  std::size_t n_comp = 10, n_inc = 40, size = 256;
  std::uint64_t gen_seed = 0;
  double test_fraction = 0.2;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--compatible", n_comp, "compatible image count")->capture_default_str();
  gen->add_option("--incompatible", n_inc, "incompatible image count")->capture_default_str();
  gen->add_option("--size", size, "image side in pixels")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--test-fraction", test_fraction, "per-class test share")->capture_default_str();

  // augment
  auto* aug = app.add_subcommand("augment", "expand the train split into augmentation recipes");
  ConfigFlags aug_cfg;
  aug_cfg.attach(aug);
  bool write_images = false;
  aug->add_flag("--write-images", write_images, "also write the cropped images");

  // train
  auto* trn = app.add_subcommand("train", "train one model into output-dir");
  ConfigFlags trn_cfg;
  trn_cfg.attach(trn);
  bool quiet = false;
  trn->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "metrics of a weight file on the test split");
  ConfigFlags evl_cfg;
  evl_cfg.attach(evl);
  std::string evl_weights;
  evl->add_option("--weights", evl_weights, "weight file")->required()->check(CLI::ExistingFile);

  // predict
  auto* prd = app.add_subcommand("predict", "per-image logits and incompatibility probability");
  ConfigFlags prd_cfg;
  prd_cfg.attach(prd);
  std::string prd_weights, prd_out, prd_split = "all";
  std::vector<std::string> prd_images;
  prd->add_option("--weights", prd_weights, "weight file")->required()->check(CLI::ExistingFile);
  prd->add_option("--out", prd_out, "CSV path (default stdout)");
  prd->add_option("--split", prd_split, "manifest split when no images are given: all|train|test")
      ->capture_default_str();
  prd->add_option("images", prd_images, "PGM images (default: the manifest's entries)");

  // sobel
  auto* sob = app.add_subcommand("sobel", "Sobel mean-gradient baseline");
  std::string sob_manifest, sob_out, sob_sweep, sob_split = "all";
  double boundary = sobel::kDefaultBoundary;
  std::vector<std::string> sob_images;
  sob->add_option("--manifest", sob_manifest, "labelled manifest");
  sob->add_option("--split", sob_split, "all|train|test")->capture_default_str();
  sob->add_option("--boundary", boundary, "score at or above which an image is incompatible")
      ->capture_default_str();
  sob->add_option("--out", sob_out, "CSV path (default stdout)");
  sob->add_option("--sweep", sob_sweep, "write a boundary sweep CSV (needs labels)");
  sob->add_option("images", sob_images, "PGM images");

  // seeds
  auto* sds = app.add_subcommand("seeds", "num-runs trainings with seeds seed, seed+1, ...");
  ConfigFlags sds_cfg;
  sds_cfg.attach(sds);
  bool sds_quiet = false;
  sds->add_flag("--quiet", sds_quiet, "no per-epoch progress on stderr");

  // gradcheck
  auto* gck = app.add_subcommand("gradcheck", "finite-difference check of every op and architecture");
  bool ops_only = false;
  std::size_t samples = 2;
  gck->add_flag("--ops-only", ops_only, "skip the full-architecture checks");
  gck->add_option("--samples", samples, "sampled coordinates per architecture tensor")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      data::SynthConfig sc;
      sc.test_fraction = test_fraction;
      const auto res = data::synth_generate(n_comp, n_inc, size, gen_seed, gen_out, sc);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << "wrote " << res.entries.size() << " images (" << res.stats.train_total << " train, "
                << res.stats.test_total << " test) to " << gen_out << '\n';
      return 0;
    }
    if (aug->parsed()) {
      const auto cfg = aug_cfg.resolve(aug);
      const auto res = augment(cfg, cfg.output_dir, write_images);
      for (const auto& w : res.result.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << res.stats.augmented_train_total << " augmented training items from " << res.stats.train_total
                << " train images; test split untouched (" << res.stats.test_total << ")\n";
      return 0;
    }
    if (trn->parsed()) {
      const auto cfg = trn_cfg.resolve(trn);
      const auto res = train(cfg, cfg.output_dir, quiet ? nullptr : &std::cerr);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
      if (!cfg.pretrained_weights.empty())
        std::cerr << "pretrained: loaded " << res.pretrained.loaded.size() << " tensors, fresh "
                  << res.pretrained.skipped().size() << "\n";
      std::cout << "best test accuracy " << format_double(res.log.best_test_acc) << " at epoch "
                << res.log.best_epoch << "; outputs in " << cfg.output_dir << '\n';
      return 0;
    }
    if (evl->parsed()) {
      const auto cfg = evl_cfg.resolve(evl);
      const auto res = evaluate(cfg, evl_weights);
      fs::create_directories(cfg.output_dir);
      const std::string metrics_csv = std::string(kMetricsHeader) + "\n" + res.row + "\n";
      write_text(fs::path(cfg.output_dir) / "evaluation.csv", metrics_csv);
      write_text(fs::path(cfg.output_dir) / "confusion.csv", confusion_csv(res.test));
      std::cout << metrics_csv << confusion_csv(res.test);
      return 0;
    }
    if (prd->parsed()) {
      const auto cfg = prd_cfg.resolve(prd);
      auto model = make_model(cfg, cfg.seed);
      nn::load_weights(*model, prd_weights, true);
      std::vector<CaseItem> items;
      if (!prd_images.empty())
        items = path_items(prd_images);
      else if (!cfg.manifest.empty())
        items = manifest_items(cfg.manifest, parse_split(prd_split));
      Output out(prd_out);
      const auto res = case_study_report(*model, items, cfg.norm, out.stream(), std::cerr);
      return !items.empty() && res.rows == 0 ? 2 : 0;
    }
    if (sob->parsed()) {
      std::vector<CaseItem> items = path_items(sob_images);
      if (!sob_manifest.empty()) {
        const auto more = manifest_items(sob_manifest, parse_split(sob_split));
        items.insert(items.end(), more.begin(), more.end());
      }
      SobelOutcome res;
      {
        Output out(sob_out);
        res = sobel_report(items, boundary, out.stream(), std::cerr);
      }
      if (!sob_sweep.empty()) {
        if (res.labels.empty() || res.labels.size() != res.scores.size())
          throw UsageError("--sweep needs every image labelled (use --manifest)");
        Output sw(sob_sweep);
        sw.stream() << sweep_csv(sobel::threshold_sweep(res.scores, res.labels,
                                                        sobel::candidate_boundaries(res.scores)));
      }
      return !items.empty() && res.scores.empty() ? 2 : 0;
    }
    if (sds->parsed()) {
      const auto cfg = sds_cfg.resolve(sds);
      const auto res = seeds(cfg, cfg.output_dir, sds_quiet ? nullptr : &std::cerr);
      for (const auto& r : res.runs)
        if (!r.ok) std::cerr << "run " << r.run << " (seed " << r.seed << ") failed: " << r.error << '\n';
      if (!res.stats) return res.runs.front().exit_code;
      const auto& s = *res.stats;
      std::cout << res.completed() << "/" << res.runs.size() << " runs; best test accuracy min "
                << format_double(s.min) << " q1 " << format_double(s.q1) << " median " << format_double(s.median)
                << " q3 " << format_double(s.q3) << " max " << format_double(s.max) << '\n';
      return 0;
    }
    if (gck->parsed()) {
      const auto s = run_gradcheck(std::cout, ops_only, samples);
      return s.failures == 0 ? 0 : 3;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
