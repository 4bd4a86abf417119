// histnet: dataset building, training, colorization and evaluation.
//
// Exit codes: 0 success, 2 invalid input or configuration, 3 runtime abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "histnet/data.hpp"
#include "histnet/errors.hpp"
#include "histnet/eval.hpp"
#include "histnet/image_io.hpp"
#include "histnet/training.hpp"

namespace fs = std::filesystem;
using namespace histnet;
using nlohmann::json;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitAbort = 3;

#ifndef HISTNET_ASSET_DIR
#define HISTNET_ASSET_DIR "assets"
#endif

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ValidationError("output directory " + dir.string() + " is not empty (use --force to write into it)");
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// --------------------------------------------------------------- dataset-build

struct BuildArgs {
  std::string images, out, taxonomy = HISTNET_ASSET_DIR "/taxonomy.txt", labels, parsing,
                         palette = HISTNET_ASSET_DIR "/parsing_palette.txt", detector;
  BuildOptions opts;
  bool bootstrap = false;
  bool force = false;
};

int cmd_dataset_build(const BuildArgs& a) {
  if (!fs::is_directory(a.images)) throw ValidationError("cannot read image directory " + a.images);
  LabelTaxonomy taxonomy = LabelTaxonomy::load(a.taxonomy);
  std::map<std::string, int> labels;
  if (!a.labels.empty()) labels = load_label_file(a.labels, taxonomy);
  prepare_output(a.out, a.force);

  std::unique_ptr<PersonDetector> detector;
  if (a.detector.empty()) {
    // No detector configured: every person check is recorded as unknown.
    detector = std::make_unique<StubDetector>(std::vector<PersonBox>{}, true);
  } else {
    detector = std::make_unique<ProcessDetector>(split_words(a.detector));
  }
  BuildLog log;
  DatasetManifest m = build_manifest(a.images, a.out, taxonomy, *detector, a.opts, labels, &log);
  if (!a.parsing.empty()) {
    ParsingIngestReport rep;
    m = ingest_parsing_targets(m, a.parsing, Palette::load(a.palette), &rep);
    std::cerr << "parsing targets: " << rep.attached << " attached, " << rep.missing << " missing\n";
  }
  if (a.bootstrap) {
    SoftmaxRegressionTrainer trainer;
    BootstrapReport rep;
    m = bootstrap_labels(m, trainer, {}, &rep);
    std::cerr << "bootstrap: " << rep.manual << " manual, " << rep.pseudo << " pseudo-labelled\n";
  }
  m.save(fs::path(a.out) / "manifest.jsonl");
  write_text(fs::path(a.out) / "build_log.json", log.to_json().dump(2) + "\n");
  json echo = {{"command", "dataset-build"},
               {"images", a.images},
               {"taxonomy", a.taxonomy},
               {"labels", a.labels},
               {"parsing", a.parsing},
               {"detector", a.detector},
               {"saturation_threshold", a.opts.saturation_threshold},
               {"blur_threshold", a.opts.blur_threshold},
               {"max_persons", a.opts.person.max_persons},
               {"min_person_confidence", a.opts.person.min_confidence},
               {"test_fraction", a.opts.test_fraction},
               {"seed", a.opts.seed},
               {"bootstrap", a.bootstrap}};
  write_text(fs::path(a.out) / "config_echo.json", echo.dump(2) + "\n");
  std::cout << "scanned " << log.scanned << ", kept " << log.kept << ", rejected grayscale " << log.rejected_grayscale
            << ", rejected blur " << log.rejected_blur << ", rejected person " << log.rejected_person
            << ", person unknown " << log.person_unknown << ", unreadable " << log.unreadable << "\n";
  return 0;
}

// --------------------------------------------------------------- dataset-stats

int cmd_dataset_stats(const std::string& manifest_path, bool as_json, int hue_bins) {
  DatasetManifest m = DatasetManifest::load(manifest_path);
  DatasetStats s = dataset_stats(m);
  if (as_json) {
    json j = s.to_json();
    if (hue_bins > 0) {
      json bins = json::array();
      for (const auto& b : manifest_hue_histogram(m, hue_bins).bins)
        bins.push_back({{"lo", b.lo_deg}, {"hi", b.hi_deg}, {"frequency", b.frequency}});
      j["hue_histogram"] = bins;
    }
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << s.to_text();
    if (hue_bins > 0) {
      std::cout << "hue histogram:\n";
      for (const auto& b : manifest_hue_histogram(m, hue_bins).bins)
        std::cout << "  [" << b.lo_deg << ", " << b.hi_deg << ") " << b.frequency << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, manifest, out, resume, palette = HISTNET_ASSET_DIR "/parsing_palette.txt";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  bool force = false;
};

std::string config_schema() {
  std::ostringstream os;
  os << "Config file: key = value lines, '#' comments, unknown keys rejected.\n"
        "Keys and test-preset defaults:\n";
  std::istringstream in(TrainConfig::test_preset().to_text());
  for (std::string line; std::getline(in, line);) os << "  " << line << "\n";
  os << "  backbone_weights = <tensor bundle dir>\n  backbone_map = <mapping file>\n"
        "'preset = paper' selects batch 16, 224x224, 8 epochs, Adam 2e-5 / 0.5 / 0.999.\n";
  return os.str();
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  std::optional<TrainState> state;
  if (!a.resume.empty()) {
    if (!a.config.empty() || !a.overrides.empty() || a.seed || !a.ablation.empty()) {
      throw ValidationError("--resume takes its configuration from the checkpoint; drop --config/--set/--seed");
    }
    state.emplace(load_checkpoint(a.resume));
    cfg = state->config;
  } else {
    cfg = a.config.empty() ? TrainConfig::test_preset() : TrainConfig::load(a.config);
    for (const auto& kv : a.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (a.seed) cfg.seed = *a.seed;
    if (!a.ablation.empty()) cfg.ablation = ablation_from_string(a.ablation);
    cfg.validate();
  }
  DatasetManifest manifest = DatasetManifest::load(a.manifest);
  manifest.validate();
  const Palette palette = Palette::load(a.palette);
  if (!state) {
    std::optional<WeightSource> backbone;
    if (!cfg.backbone_weights.empty()) backbone = WeightSource::load(cfg.backbone_weights, cfg.backbone_map);
    state.emplace(make_train_state(cfg, manifest.taxonomy.label_count(), backbone));
  }
  prepare_output(a.out, a.force || !a.resume.empty());
  const fs::path out(a.out);
  write_text(out / "config.txt", cfg.to_text());
  const LossWeights w = cfg.effective_weights();
  json resolved = {{"config", cfg.to_json()},
                   {"effective_weights", w.to_json()},
                   {"model", state->model.to_json()},
                   {"branches",
                    {{"parsing_g3", state->model.parsing_branch},
                     {"info_g2", state->model.info_branch},
                     {"info_d2", state->model.info_branch}}},
                   {"manifest", a.manifest},
                   {"resumed_from", a.resume}};
  write_text(out / "resolved_config.json", resolved.dump(2) + "\n");

  std::ofstream log(out / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  TrainOptions opts{out / "checkpoints", &log, warn, 0};
  TrainResult r = train(*state, manifest, palette, opts);
  std::cout << "generator steps " << r.generator_steps << ", critic steps " << r.critic_steps << ", skipped "
            << r.skipped << "\nfinal l_r " << r.last.l_r << ", total " << r.last.total << "\ncheckpoint "
            << (out / "checkpoints" / "final").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------- colorize

int cmd_colorize(const std::string& checkpoint, const std::vector<std::string>& inputs, const std::string& out_dir,
                 bool force) {
  Generator gen = load_generator(checkpoint);
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(in);
    }
  }
  std::vector<RgbImage> images;
  std::vector<bool> is_color;
  std::vector<fs::path> kept;
  for (const auto& f : files) {
    try {
      Image8 raw = read_image8(f);
      images.push_back(to_rgb(raw));
      is_color.push_back(!is_grayscale(raw));
      kept.push_back(f);
    } catch (const std::exception& e) {
      warn("skipping " + f.string() + ": " + e.what());
    }
  }
  if (kept.empty()) throw ValidationError("no readable input images");
  prepare_output(out_dir, force);
  std::vector<RgbImage> colored = colorize(gen, images);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const std::string stem = kept[i].stem().string();
    write_rgb_png(fs::path(out_dir) / (stem + ".png"), colored[i]);
    std::vector<RgbImage> panel = {grayscale_of(images[i]), colored[i]};
    if (is_color[i]) panel.push_back(images[i]);
    write_rgb_png(fs::path(out_dir) / (stem + "_triptych.png"), hconcat(panel));
  }
  json echo = {{"command", "colorize"}, {"checkpoint", checkpoint}, {"inputs", inputs}, {"written", kept.size()}};
  write_text(fs::path(out_dir) / "config_echo.json", echo.dump(2) + "\n");
  std::cout << "colorized " << kept.size() << " of " << files.size() << " images\n";
  return 0;
}

// ------------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
                 const std::string& perceptual, const std::string& method, const std::string& out_dir, bool force) {
  Generator gen = load_generator(checkpoint);
  DatasetManifest m = DatasetManifest::load(manifest_path);
  auto backend = make_perceptual_backend(perceptual);
  EvaluateOptions opts;
  if (split == "train") opts.split = Split::train;
  else if (split != "test") throw ValidationError("--split must be train or test");
  opts.method = method;
  opts.warn = warn;
  MetricReport r = evaluate(gen, m, *backend, opts);
  std::cout << r.to_table();
  if (!out_dir.empty()) {
    prepare_output(out_dir, force);
    write_text(fs::path(out_dir) / "metrics.txt", r.to_table());
    write_text(fs::path(out_dir) / "metrics.json", r.to_json().dump(2) + "\n");
    json echo = {{"command", "evaluate"}, {"checkpoint", checkpoint}, {"manifest", manifest_path},
                 {"split", split},        {"perceptual", perceptual}, {"method", method}};
    write_text(fs::path(out_dir) / "config_echo.json", echo.dump(2) + "\n");
  }
  return 0;
}

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "key = value config file (default: test preset)");
  cmd->add_option("--manifest", a.manifest, "dataset manifest (.jsonl)")->required();
  cmd->add_option("--out", a.out, "output directory (config echo, log, checkpoints)")->required();
  cmd->add_option("--set", a.overrides, "override a config key, key=value (repeatable)");
  cmd->add_option("--resume", a.resume, "continue from a checkpoint directory");
  cmd->add_option("--palette", a.palette, "parsing palette file");
  cmd->add_option("--seed", a.seed, "overrides the config seed");
  cmd->add_flag("--force", a.force, "write into a non-empty output directory");
  cmd->footer(config_schema());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"histnet: historical photo colorization"};
  app.require_subcommand(1);

  BuildArgs build;
  auto* c_build = app.add_subcommand("dataset-build", "filter an image directory into a dataset manifest");
  c_build->add_option("--images", build.images, "directory of .png/.jpg images")->required();
  c_build->add_option("--out", build.out, "output directory for manifest.jsonl and build_log.json")->required();
  c_build->add_option("--taxonomy", build.taxonomy, "label taxonomy file");
  c_build->add_option("--labels", build.labels, "manual labels: 'file label_id' per line");
  c_build->add_option("--parsing", build.parsing, "directory of <stem>.png parsing maps");
  c_build->add_option("--palette", build.palette, "parsing palette file");
  c_build->add_option("--detector", build.detector, "person detector command (JSON lines on stdin/stdout)");
  c_build->add_option("--saturation-threshold", build.opts.saturation_threshold, "keep images whose mean HSV saturation exceeds this");
  c_build->add_option("--blur-threshold", build.opts.blur_threshold, "minimum Laplacian variance (0 disables)");
  c_build->add_option("--max-persons", build.opts.person.max_persons, "reject images with more detected persons");
  c_build->add_option("--min-person-confidence", build.opts.person.min_confidence, "detections below this are ignored");
  c_build->add_option("--test-fraction", build.opts.test_fraction, "fraction of kept images assigned to the test split");
  c_build->add_option("--seed", build.opts.seed, "seed of the split shuffle");
  c_build->add_flag("--bootstrap", build.bootstrap, "pseudo-label unlabelled images from the manual ones");
  c_build->add_flag("--force", build.force, "write into a non-empty output directory");

  std::string stats_manifest;
  bool stats_json = false;
  int hue_bins = 0;
  auto* c_stats = app.add_subcommand("dataset-stats", "label and split counts of a manifest");
  c_stats->add_option("--manifest", stats_manifest, "dataset manifest")->required();
  c_stats->add_flag("--json", stats_json, "print JSON instead of text");
  c_stats->add_option("--hue-bins", hue_bins, "also print a hue histogram with this many bins");

  TrainArgs train_args;
  auto* c_train = app.add_subcommand("train", "train generator and critic");
  add_train_options(c_train, train_args);

  TrainArgs ablate_args;
  auto* c_ablate = app.add_subcommand("ablate", "train one ablation preset");
  add_train_options(c_ablate, ablate_args);
  c_ablate->add_option("--preset", ablate_args.ablation, "baseline | baseline+parsing | baseline+classifier | full")
      ->required();

  std::string col_ckpt, col_out;
  std::vector<std::string> col_inputs;
  bool col_force = false;
  auto* c_col = app.add_subcommand("colorize", "colorize grayscale or colour images from their L plane");
  c_col->add_option("--checkpoint", col_ckpt, "checkpoint directory")->required();
  c_col->add_option("inputs", col_inputs, "image files or directories")->required();
  c_col->add_option("--out", col_out, "output directory")->required();
  c_col->add_flag("--force", col_force, "write into a non-empty output directory");

  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_perceptual = "fallback", ev_method = "histnet", ev_out;
  bool ev_force = false;
  auto* c_eval = app.add_subcommand("evaluate", "LPIPS / PSNR / SSIM of a checkpoint on a manifest split");
  c_eval->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  c_eval->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  c_eval->add_option("--split", ev_split, "train | test");
  c_eval->add_option("--perceptual", ev_perceptual, "fallback | lpips:<weights dir>");
  c_eval->add_option("--method", ev_method, "row label in the report");
  c_eval->add_option("--out", ev_out, "also write metrics.txt and metrics.json here");
  c_eval->add_flag("--force", ev_force, "write into a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    if (c_build->parsed()) return cmd_dataset_build(build);
    if (c_stats->parsed()) return cmd_dataset_stats(stats_manifest, stats_json, hue_bins);
    if (c_train->parsed()) return cmd_train(train_args);
    if (c_ablate->parsed()) return cmd_train(ablate_args);
    if (c_col->parsed()) return cmd_colorize(col_ckpt, col_inputs, col_out, col_force);
    if (c_eval->parsed()) return cmd_evaluate(ev_ckpt, ev_manifest, ev_split, ev_perceptual, ev_method, ev_out, ev_force);
  } catch (const NonFiniteLossError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAbort;
  } catch (const std::invalid_argument& e) {  // ValidationError, ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ImageIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAbort;
  }
  return kExitInvalid;
}
