#pragma once

// sRGB <-> CIE L*a*b* (D65) conversions and HSV hue statistics.

#include <span>
#include <vector>

#include "histnet/errors.hpp"

namespace histnet {

/// Interleaved H x W x 3 image with channels in [0, 1].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, double fill = 0.0);

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  /// Throws ValidationError on bad dimensions or channels outside [0, 1].
  void validate() const;
};

/// Planar L*a*b* image: L in [0, 100], a and b in [-110, 110].
struct LabImage {
  int height = 0;
  int width = 0;
  std::vector<double> L, a, b;

  LabImage() = default;
  LabImage(int h, int w);
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  void validate() const;
};

struct Lab {
  double L, a, b;
};
struct Rgb {
  double r, g, b;
};

/// Chroma range used to normalize a and b into [-1, 1] for network I/O.
inline constexpr double kChromaScale = 110.0;

Lab rgb_to_lab(Rgb rgb);
/// Out-of-gamut results are clamped to [0, 1].
Rgb lab_to_rgb(Lab lab);

/// True when the colour maps into the sRGB cube (up to `tolerance` in linear RGB).
bool in_gamut(Lab lab, double tolerance = 0.0);
/// Like lab_to_rgb, but an out-of-gamut colour has its chroma scaled down
/// (hue and L kept) instead of its RGB channels clipped. L is clamped to [0, 100].
Rgb lab_to_rgb_keep_lightness(Lab lab);

LabImage rgb_to_lab(const RgbImage& img);
RgbImage lab_to_rgb(const LabImage& img);

/// L in [0, 100] -> [-1, 1].
inline double normalize_luminance(double L) { return L / 50.0 - 1.0; }
inline double denormalize_luminance(double v) { return (v + 1.0) * 50.0; }

struct HsvImage {
  int height = 0;
  int width = 0;
  std::vector<double> hue;         // degrees in [0, 360); 0 where undefined
  std::vector<bool> hue_defined;   // false for achromatic pixels (S = 0)
  std::vector<double> saturation;  // [0, 1]
  std::vector<double> value;       // [0, 1]
};

struct Hsv {
  double h, s, v;
  bool hue_defined;
};

Hsv rgb_to_hsv(Rgb rgb);
HsvImage rgb_to_hsv(const RgbImage& img);

struct HueBin {
  double lo_deg;
  double hi_deg;
  double frequency;
};

struct HueHistogram {
  std::vector<HueBin> bins;
  std::size_t sample_count = 0;

  /// Index of the bin whose [lo, hi) range holds `deg`.
  std::size_t bin_of(double deg) const;
};

/// Normalized histogram of defined hues over every pixel of every image.
/// Achromatic pixels are excluded. Throws on an empty collection, on
/// bin_count < 2, or when no pixel has a defined hue.
HueHistogram hue_histogram(std::span<const RgbImage> images, int bin_count);

}  // namespace histnet
