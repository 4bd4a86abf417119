#pragma once

// Alternating critic/generator optimization, Adam, checkpoints and the
// epoch loop over a manifest.
//
// Checkpoint directory (a tensor bundle, see tensor_store.hpp):
//   generator/<param>         generator weights
//   critic/<param>            critic weights
//   adam/generator/m/<param>  first moments, likewise .../v/ and adam/critic/...
//   meta: step, critic_step, epoch, batch_pos, permutation, rng, adam_t,
//         config (TrainConfig echo), model (ModelConfig echo)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "histnet/data.hpp"
#include "histnet/losses.hpp"
#include "histnet/model.hpp"
#include "histnet/palette.hpp"
#include "histnet/random.hpp"

namespace histnet {

enum class Ablation { baseline, baseline_parsing, baseline_classifier, full };

/// "baseline", "baseline+parsing", "baseline+classifier", "full".
std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct TrainConfig {
  int batch_size = 16;
  int image_size = 224;
  int epochs = 8;
  double learning_rate = 2e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int critic_steps_per_gen_step = 1;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  LossOptions loss_options;
  Ablation ablation = Ablation::full;
  ScalePreset scale_preset = ScalePreset::paper;
  int info_dim = 256;
  /// Generator steps between checkpoints; 0 writes one only at the end.
  int checkpoint_every = 0;
  /// Optional pretrained backbone (tensor bundle dir + mapping file).
  std::string backbone_weights;
  std::string backbone_map;

  static TrainConfig paper_preset();
  /// Small images, small batch, larger learning rate.
  static TrainConfig test_preset();

  void validate() const;

  /// Model geometry for `label_count` composite labels, with the branches
  /// the ablation keeps.
  ModelConfig model_config(int label_count) const;
  /// Loss weights after the ablation has zeroed the disabled terms.
  LossWeights effective_weights() const;

  /// Sets one field from its key=value text form. Unknown keys and
  /// malformed values throw ValidationError.
  void set(const std::string& key, const std::string& value);
  /// Flat key=value lines; blank lines and '#' comments are skipped.
  /// "preset = test|paper" (if present) must come first.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  /// Canonical key=value text; parse(to_text()) reproduces the config.
  std::string to_text() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Keys accepted by TrainConfig::set, in to_text() order.
const std::vector<std::string>& train_config_keys();

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& params, double lr, double beta1, double beta2, double epsilon);

  /// One update of every parameter from its gradient (same order as params).
  void step(const std::vector<Tensor>& grads);

  std::int64_t steps() const { return t_; }
  double learning_rate() const { return lr_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }

  void save(TensorBundle& bundle, const std::string& prefix) const;
  void load(const TensorBundle& bundle, const std::string& prefix, std::int64_t t);

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> m_, v_;
  double lr_ = 0, beta1_ = 0, beta2_ = 0, eps_ = 0;
  std::int64_t t_ = 0;
};

/// One training batch in network units.
struct Batch {
  Tensor gray;                      // [N, 1, H, W]  L / 50 - 1
  Tensor ab;                        // [N, 2, H, W]  ab / 110
  Tensor parsing;                   // [N, 3, H, W]  palette rendering, zeros if absent
  std::vector<bool> parsing_mask;   // per-sample: has a parsing target
  std::vector<int> labels;          // -1 when unknown
  std::vector<std::string> ids;

  int size() const { return gray.rank() ? gray.dim(0) : 0; }
};

struct BatchItem {
  RgbImage image;                                   // already image_size square
  int label = -1;
  std::optional<std::vector<std::uint8_t>> parsing; // class per pixel
  std::string id;
};

Batch make_batch(const std::vector<BatchItem>& items, const Palette& palette);

/// Teacher distribution y_v: label-smoothed one-hot; uniform for unknown labels.
Tensor teacher_distribution(const std::vector<int>& labels, int classes, double smoothing);

/// Thrown when a loss turns NaN or infinite. what() carries batch statistics.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  TrainConfig config;
  ModelConfig model;
  Generator generator;
  Critic critic;
  Adam generator_opt;
  Adam critic_opt;
  Rng rng;
  std::int64_t step = 0;         // generator steps taken
  std::int64_t critic_step = 0;  // critic steps taken
  int epoch = 0;
  std::size_t batch_pos = 0;
  std::vector<std::size_t> permutation;
};

TrainState make_train_state(const TrainConfig& cfg, int label_count,
                            const std::optional<WeightSource>& backbone = std::nullopt);

struct CriticStepReport {
  double loss = 0;         // descended objective (WGAN-GP + D2 info term)
  double wasserstein = 0;  // mean D(fake) - mean D(real)
  double penalty = 0;
  double real_score = 0;
  double fake_score = 0;
  double l_info_d = 0;     // D2 fit to the detached info code, 0 if disabled

  nlohmann::json to_json() const;
};

/// One Adam update of the critic. The generator runs without recording
/// gradients and is not modified.
CriticStepReport train_step_critic(TrainState& state, const Batch& batch);

/// One Adam update of the generator. The critic is not modified.
LossReport train_step_generator(TrainState& state, const Batch& batch);

/// Per-parameter gradients of the generator objective without updating
/// anything. Used to inspect which branches learn under an ablation.
std::vector<Tensor> generator_gradients(TrainState& state, const Batch& batch, LossReport* report = nullptr);
std::vector<Tensor> critic_gradients(TrainState& state, const Batch& batch, CriticStepReport* report = nullptr);

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& dir);
/// Generator only, for inference.
Generator load_generator(const std::filesystem::path& dir);

/// Manifest-backed loader: decode, resize + center crop, parsing lookup.
class SampleSource {
 public:
  SampleSource(const DatasetManifest& manifest, Split split, int image_size, const Palette& palette,
               bool cache = true);

  std::size_t size() const { return indices_.size(); }
  /// nullopt when the image or its parsing map cannot be read.
  std::optional<BatchItem> load(std::size_t i);
  const SampleRecord& record(std::size_t i) const;
  const Palette& palette() const { return palette_; }

 private:
  const DatasetManifest& manifest_;
  std::vector<std::size_t> indices_;
  int image_size_;
  Palette palette_;
  bool cache_;
  std::vector<std::optional<BatchItem>> loaded_;
  std::vector<bool> tried_;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::ostream* log = nullptr;           // JSON lines, one per optimizer step
  std::function<void(const std::string&)> warn;
  /// Stop after this many generator steps in this call (0 = run to the end).
  std::int64_t max_steps = 0;
};

struct TrainResult {
  std::int64_t generator_steps = 0;
  std::int64_t critic_steps = 0;
  std::size_t skipped = 0;
  LossReport last;
};

/// Runs (or resumes) the epoch loop until `state.config.epochs` are done.
/// Each epoch draws a fresh permutation of the train split; batches take
/// consecutive slices of it. Unreadable samples are dropped with a warning;
/// more than 1% of the split unreadable aborts with ValidationError.
TrainResult train(TrainState& state, const DatasetManifest& manifest, const Palette& palette,
                  const TrainOptions& opts = {});

}  // namespace histnet
