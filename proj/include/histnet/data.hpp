#pragma once

// Dataset construction: label taxonomy, manifests, image filters, label
// bootstrapping from a small manually labelled subset, and statistics.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "histnet/colorspace.hpp"
#include "histnet/palette.hpp"
#include "histnet/random.hpp"

namespace histnet {

// ---------------------------------------------------------------- taxonomy

struct CompositeLabel {
  int id = 0;
  std::string era;
  std::string nationality;
  std::string garment;

  bool operator==(const CompositeLabel& o) const = default;
};

/// Text format, one directive per line ('#' comments):
///   era <name>...
///   nationality <name>...
///   garment <name>...
///   label <id> <era> <nationality> <garment>
class LabelTaxonomy {
 public:
  static LabelTaxonomy parse(const std::string& text);
  static LabelTaxonomy load(const std::filesystem::path& path);

  const std::vector<std::string>& eras() const { return eras_; }
  const std::vector<std::string>& nationalities() const { return nationalities_; }
  const std::vector<std::string>& garments() const { return garments_; }
  const std::vector<CompositeLabel>& labels() const { return labels_; }
  int label_count() const { return static_cast<int>(labels_.size()); }
  const CompositeLabel& label(int id) const;
  std::optional<int> find(const std::string& era, const std::string& nationality, const std::string& garment) const;

  /// Canonical text; parse(serialize()) reproduces the taxonomy.
  std::string serialize() const;
  /// FNV-1a 64 of the canonical text, 16 hex digits.
  std::string hash() const;

  bool operator==(const LabelTaxonomy& o) const = default;

 private:
  std::vector<std::string> eras_, nationalities_, garments_;
  std::vector<CompositeLabel> labels_;
};

// ---------------------------------------------------------------- manifest

enum class LabelSource { manual, pseudo, unknown };
enum class Split { train, test };
/// Outcome of the person check: passed, or the detector could not decide.
enum class PersonCheck { passed, unknown };

std::string to_string(LabelSource s);
std::string to_string(Split s);
std::string to_string(PersonCheck p);

struct SampleRecord {
  std::string id;
  std::string image_path;  // relative paths resolve against the manifest directory
  int label = -1;          // composite label id, -1 when unknown
  LabelSource label_source = LabelSource::unknown;
  std::optional<double> confidence;  // set for pseudo labels, in (0, 1]
  std::optional<std::string> parsing_path;
  Split split = Split::train;
  PersonCheck person = PersonCheck::passed;

  bool operator==(const SampleRecord& o) const = default;
};

struct DatasetManifest {
  LabelTaxonomy taxonomy;
  std::vector<SampleRecord> records;
  std::vector<std::string> notes;
  /// Directory used to resolve relative paths. Not serialized.
  std::filesystem::path root;

  std::filesystem::path resolve(const std::string& p) const;
  std::size_t count(Split s) const;
  std::vector<std::size_t> indices(Split s) const;

  /// Throws ValidationError on duplicate ids, labels outside the taxonomy,
  /// pseudo labels without a confidence in (0, 1], or (when check_paths)
  /// missing files.
  void validate(bool check_paths = false) const;

  /// JSON lines: a header object, then one record per line.
  std::string serialize() const;
  static DatasetManifest parse(const std::string& text, const std::filesystem::path& root = {});
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);

  bool operator==(const DatasetManifest& o) const {
    return taxonomy == o.taxonomy && records == o.records && notes == o.notes;
  }
};

// ---------------------------------------------------------------- filters

/// Keep iff the mean HSV saturation is above `threshold` (which must lie in (0, 1)).
bool filter_near_grayscale(const RgbImage& img, double threshold);
double mean_saturation(const RgbImage& img);

/// Variance of the 4-neighbour Laplacian of Rec.601 luma in [0, 1].
double laplacian_variance(const RgbImage& img);

struct PersonBox {
  double x = 0, y = 0, w = 0, h = 0;
  double confidence = 0;
};

struct Detection {
  bool ok = false;
  std::vector<PersonBox> boxes;
  std::string error;
};

class PersonDetector {
 public:
  virtual ~PersonDetector() = default;
  virtual Detection detect(const std::filesystem::path& path, const RgbImage& img) = 0;
};

/// Returns a fixed answer for every image. The default reports one
/// confident person, so every image passes.
class StubDetector : public PersonDetector {
 public:
  StubDetector() : boxes_{PersonBox{0, 0, 1, 1, 1.0}} {}
  explicit StubDetector(std::vector<PersonBox> boxes, bool fail = false) : boxes_(std::move(boxes)), fail_(fail) {}
  Detection detect(const std::filesystem::path&, const RgbImage&) override;

 private:
  std::vector<PersonBox> boxes_;
  bool fail_ = false;
};

/// Talks to a long-running child process over stdin/stdout, one JSON object
/// per line.
///   request:  {"path": "<image path>"}
///   response: {"boxes": [{"x":..,"y":..,"w":..,"h":..,"confidence":..}, ...]}
///             or {"error": "<message>"}
/// A dead process or malformed reply yields a failed Detection.
class ProcessDetector : public PersonDetector {
 public:
  explicit ProcessDetector(std::vector<std::string> argv);
  ~ProcessDetector() override;
  ProcessDetector(const ProcessDetector&) = delete;
  ProcessDetector& operator=(const ProcessDetector&) = delete;
  Detection detect(const std::filesystem::path& path, const RgbImage& img) override;

 private:
  void start();
  void stop();
  std::vector<std::string> argv_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string pending_;
};

struct PersonFilterOptions {
  int max_persons = 6;
  double min_confidence = 0.5;
};

enum class FilterDecision { keep, reject, unknown };
std::string to_string(FilterDecision d);

/// keep iff 1 <= (boxes with confidence >= min_confidence) <= max_persons;
/// unknown when the detector fails.
FilterDecision filter_person_present(const std::filesystem::path& path, const RgbImage& img, PersonDetector& detector,
                                     const PersonFilterOptions& opts = {});

// ---------------------------------------------------------------- augmentation

/// {mirror(img), gaussian_blur(img, sigma)}.
std::vector<RgbImage> augment(const RgbImage& img, double blur_sigma = 1.0);

// ---------------------------------------------------------------- bootstrap

struct Prediction {
  int label = -1;
  double confidence = 0;
};

class ImageClassifier {
 public:
  virtual ~ImageClassifier() = default;
  virtual Prediction predict(const RgbImage& img) const = 0;
};

struct LabeledImage {
  RgbImage image;
  int label;
};

class ClassifierTrainer {
 public:
  virtual ~ClassifierTrainer() = default;
  virtual std::unique_ptr<ImageClassifier> train(const std::vector<LabeledImage>& examples, int classes) = 0;
};

/// Multinomial logistic regression on standardized thumbnail colour features.
class SoftmaxRegressionTrainer : public ClassifierTrainer {
 public:
  struct Options {
    int thumbnail = 8;
    int iterations = 400;
    double learning_rate = 0.5;
    double l2 = 1e-3;
  };
  SoftmaxRegressionTrainer() = default;
  explicit SoftmaxRegressionTrainer(Options o) : opts_(o) {}
  std::unique_ptr<ImageClassifier> train(const std::vector<LabeledImage>& examples, int classes) override;

  /// Feature vector used by the classifier (exposed for tests).
  static std::vector<double> features(const RgbImage& img, int thumbnail);

 private:
  Options opts_;
};

struct BootstrapOptions {
  double blur_sigma = 1.0;
  int image_size = 32;  // images are resized and centre-cropped before training
};

struct BootstrapReport {
  std::size_t manual = 0;
  std::size_t pseudo = 0;
  std::size_t unreadable = 0;
};

/// Trains on the manually labelled records plus their augmentations and
/// pseudo-labels every other record. Manual labels are never changed.
/// Throws ValidationError listing every taxonomy class without a manual example.
DatasetManifest bootstrap_labels(const DatasetManifest& manifest, ClassifierTrainer& trainer,
                                 const BootstrapOptions& opts = {}, BootstrapReport* report = nullptr);

/// Marks a random fraction f of the records as manually labelled with their
/// true label and clears the rest. At least one record per class present is
/// kept manual.
void mark_manual_fraction(DatasetManifest& manifest, const std::vector<int>& truth, double f, Rng& rng);

// ---------------------------------------------------------------- statistics

struct DatasetStats {
  std::size_t total = 0;
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t unlabeled = 0;
  std::map<std::string, std::size_t> by_era, by_nationality, by_garment, by_source;
  std::vector<std::size_t> by_label;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

DatasetStats dataset_stats(const DatasetManifest& manifest);

/// Hue histogram over the manifest's readable images.
HueHistogram manifest_hue_histogram(const DatasetManifest& manifest, int bins, std::optional<Split> split = {});

/// Full-corpus reference counts, kept for display only.
namespace reference_counts {
inline constexpr std::size_t kTotal = 1353166;
inline constexpr std::array<std::size_t, 3> kEra{66900, 547318, 738948};          // before, during, after
inline constexpr std::array<std::size_t, 3> kGarment{707771, 104763, 540632};     // military, formal, informal
inline constexpr std::size_t kTrain = 1200000;
inline constexpr std::size_t kTest = 100001;
}  // namespace reference_counts

// ---------------------------------------------------------------- parsing targets

struct ParsingIngestReport {
  std::size_t attached = 0;
  std::size_t missing = 0;
};

/// For every record, looks for <parsing_dir>/<image stem>.png. Files are
/// class-index (single channel) or palette-colour images. Any file that does
/// not conform to the palette aborts with a ValidationError listing all
/// offending files.
DatasetManifest ingest_parsing_targets(const DatasetManifest& manifest, const std::filesystem::path& parsing_dir,
                                       const Palette& palette, ParsingIngestReport* report = nullptr);

/// Reads a parsing file into a class map (one byte per pixel).
std::vector<std::uint8_t> read_parsing_classes(const std::filesystem::path& path, const Palette& palette, int* height,
                                               int* width);

// ---------------------------------------------------------------- dataset build

struct BuildOptions {
  double saturation_threshold = 0.05;
  double blur_threshold = 0.0;  // 0 disables the sharpness gate
  PersonFilterOptions person;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct BuildLog {
  std::size_t scanned = 0;
  std::size_t kept = 0;
  std::size_t rejected_grayscale = 0;
  std::size_t rejected_blur = 0;
  std::size_t rejected_person = 0;
  std::size_t person_unknown = 0;
  std::size_t unreadable = 0;
  std::vector<std::pair<std::string, std::string>> decisions;  // (relative path, outcome)

  nlohmann::json to_json() const;
};

/// Scans image_dir (sorted, non-recursive; .png/.jpg/.jpeg), applies the
/// filters and assigns splits with a seeded shuffle. Optional manual labels map
/// relative image paths to composite label ids. Relative paths in the result
/// are relative to `manifest_dir`.
DatasetManifest build_manifest(const std::filesystem::path& image_dir, const std::filesystem::path& manifest_dir,
                               const LabelTaxonomy& taxonomy, PersonDetector& detector, const BuildOptions& opts,
                               const std::map<std::string, int>& manual_labels, BuildLog* log);

/// "relative_path label_id" per line, '#' comments.
std::map<std::string, int> load_label_file(const std::filesystem::path& path, const LabelTaxonomy& taxonomy);

// ---------------------------------------------------------------- synthetic data

struct SyntheticOptions {
  int count = 64;
  int size = 32;
  std::vector<int> labels{0, 1, 2, 3};  // composite label ids to draw from
  int grayscale_count = 0;              // extra grayscale images (filter fodder)
  bool write_parsing = true;
  std::uint64_t seed = 0;
};

struct SyntheticSet {
  std::vector<std::string> files;  // relative to the output directory
  std::vector<int> labels;         // true label per file, -1 for grayscale extras
};

/// Renders figures whose garment colours and shapes depend on the label,
/// writes <dir>/images/*.png, <dir>/parsing/*.png (class-index maps) and
/// <dir>/labels.txt.
SyntheticSet write_synthetic_dataset(const std::filesystem::path& dir, const Palette& palette,
                                     const SyntheticOptions& opts);

/// In-memory version of a single synthetic sample.
struct SyntheticSample {
  RgbImage image;
  std::vector<std::uint8_t> parsing;
};
SyntheticSample render_synthetic(int label_slot, int size, const Palette& palette, Rng& rng);

}  // namespace histnet
