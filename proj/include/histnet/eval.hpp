#pragma once

// Image-quality metrics, inference and metric reports.

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "histnet/colorspace.hpp"
#include "histnet/data.hpp"
#include "histnet/model.hpp"

namespace histnet {

/// PSNR reported for identical images.
inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over all RGB samples, capped at kPsnrCap.
double psnr(const RgbImage& a, const RgbImage& b, double peak = 1.0);

/// Rec. 601 luma plane (0.299 R + 0.587 G + 0.114 B).
std::vector<double> luma(const RgbImage& img);

/// Single-scale SSIM of two planes: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1. Local statistics use the
/// normalized window weights (no sample-size correction); the map is
/// averaged over the positions where the window fits entirely.
double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int height, int width);
/// SSIM of the luma planes.
double ssim(const RgbImage& a, const RgbImage& b);

class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  virtual double distance(const RgbImage& a, const RgbImage& b) const = 0;
  virtual std::string name() const = 0;
};

/// Deterministic stand-in for a learned perceptual metric. At each scale
/// (the image halved `scales - 1` times) every 3x3 RGB patch, mapped to
/// [-1, 1], is projected onto `features` seeded Gaussian directions and
/// rectified. Feature vectors are unit-normalized per pixel; the distance is
/// the squared Euclidean gap between normalized vectors, averaged over pixels
/// and then over scales.
class RandomProjectionDistance : public PerceptualBackend {
 public:
  struct Options {
    int scales = 3;
    int features = 32;
    std::uint64_t seed = 0;
  };
  RandomProjectionDistance();
  explicit RandomProjectionDistance(Options opts);

  double distance(const RgbImage& a, const RgbImage& b) const override;
  std::string name() const override;

 private:
  Options opts_;
  std::vector<Tensor> filters_;  // one [features, 3, 3, 3] bank per scale
};

/// Learned-weights perceptual distance on a VGG-16 trunk. Reads a tensor
/// bundle holding "features.{0,2,5,7,10,12,14,17,19,21,24,26,28}.{weight,bias}"
/// and "lin{0..4}.weight" ([1, C, 1, 1]). Throws ValidationError with a hint
/// to use the fallback backend when the bundle is missing or incomplete.
class LpipsBackend : public PerceptualBackend {
 public:
  explicit LpipsBackend(const std::filesystem::path& weights_dir);

  double distance(const RgbImage& a, const RgbImage& b) const override;
  std::string name() const override { return "lpips-vgg"; }

 private:
  TensorBundle weights_;
};

/// "fallback" or "lpips:<weights dir>".
std::unique_ptr<PerceptualBackend> make_perceptual_backend(const std::string& spec);

/// Colorizes each image from its L plane alone: the model sees the L plane
/// resized to its input size, the predicted (a, b) planes are resized back
/// and merged with the untouched input L. Out-of-gamut pixels lose chroma,
/// never lightness. Colour inputs are treated as their L plane.
std::vector<RgbImage> colorize(const Generator& gen, const std::vector<RgbImage>& inputs, int batch_size = 16);
RgbImage colorize(const Generator& gen, const RgbImage& input);

/// Neutral (a = b = 0) rendering of the L plane.
RgbImage grayscale_of(const RgbImage& img);

struct ImageMetrics {
  std::string id;
  double lpips = 0;
  double psnr = 0;
  double ssim = 0;
};

struct MetricReport {
  std::string method;
  std::string perceptual_backend;
  std::vector<ImageMetrics> images;
  double lpips = 0, psnr = 0, ssim = 0;  // arithmetic means of `images`
  std::size_t sample_count = 0;

  /// Columns: method, LPIPS (lower is better), PSNR, SSIM (higher is better).
  std::string to_table() const;
  nlohmann::json to_json() const;
};

/// Metrics of each (prediction, reference) pair and their means.
MetricReport evaluate_pairs(const std::vector<RgbImage>& predictions, const std::vector<RgbImage>& references,
                            const std::vector<std::string>& ids, const PerceptualBackend& backend,
                            const std::string& method);

struct EvaluateOptions {
  Split split = Split::test;
  std::string method = "histnet";
  std::function<void(const std::string&)> warn;
};

/// Center-cropped references at the model's input size, colorized from
/// their L planes. Unreadable images are skipped with a warning.
MetricReport evaluate(const Generator& gen, const DatasetManifest& manifest, const PerceptualBackend& backend,
                      const EvaluateOptions& opts = {});

/// Full-scale reference figures, kept for side-by-side display only. They
/// need the complete corpus and schedule and are not reproducible here.
struct ReferenceMetrics {
  const char* method;
  double lpips, psnr, ssim;
};
inline constexpr ReferenceMetrics kReferenceComparison[] = {
    {"Iizuka et al.", 0.134, 25.779, 0.956}, {"Larsson et al.", 0.147, 24.527, 0.946},
    {"Deoldify", 0.127, 26.321, 0.957},      {"ChromaGAN", 0.118, 29.487, 0.951},
    {"Su et al.", 0.132, 25.951, 0.941},     {"full model", 0.101, 30.638, 0.962}};
inline constexpr ReferenceMetrics kReferenceAblation[] = {{"baseline", 0.123, 27.093, 0.946},
                                                          {"baseline+parsing", 0.121, 28.992, 0.948},
                                                          {"baseline+classifier", 0.119, 29.828, 0.951},
                                                          {"full", 0.107, 30.585, 0.959}};

}  // namespace histnet
