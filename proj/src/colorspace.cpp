#include "histnet/colorspace.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

namespace histnet {

namespace {

// sRGB primaries, D65 white.
const Eigen::Matrix3d& rgb_to_xyz_matrix() {
  static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 0.4124564, 0.3575761, 0.1804375,  //
                                    0.2126729, 0.7151522, 0.0721750,                       //
                                    0.0193339, 0.1191920, 0.9503041)
                                       .finished();
  return m;
}

const Eigen::Matrix3d& xyz_to_rgb_matrix() {
  static const Eigen::Matrix3d m = rgb_to_xyz_matrix().inverse();
  return m;
}

// Reference white = XYZ of sRGB (1, 1, 1), so the achromatic axis maps to a = b = 0.
const Eigen::Vector3d& white_point() {
  static const Eigen::Vector3d w = rgb_to_xyz_matrix() * Eigen::Vector3d::Ones();
  return w;
}

constexpr double kDelta = 6.0 / 29.0;

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
double linear_to_srgb(double c) { return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055; }

double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
double lab_f_inv(double u) { return u > kDelta ? u * u * u : 3.0 * kDelta * kDelta * (u - 4.0 / 29.0); }

void check_dims(int h, int w, const char* what) {
  if (h < 1 || w < 1) {
    throw ValidationError(std::string(what) + ": dimensions must be positive, got " + std::to_string(h) + "x" +
                          std::to_string(w));
  }
}

}  // namespace

RgbImage::RgbImage(int h, int w, double fill) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

void RgbImage::validate() const {
  check_dims(height, width, "RgbImage");
  if (pixels.size() != pixel_count() * 3) throw ValidationError("RgbImage: pixel buffer size does not match H x W x 3");
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = pixels[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ValidationError("RgbImage: channel value " + std::to_string(v) + " at index " + std::to_string(i) +
                            " outside [0,1]");
    }
  }
}

LabImage::LabImage(int h, int w)
    : height(h), width(w), L(pixel_count()), a(pixel_count()), b(pixel_count()) {}

void LabImage::validate() const {
  check_dims(height, width, "LabImage");
  const std::size_t n = pixel_count();
  if (L.size() != n || a.size() != n || b.size() != n) throw ValidationError("LabImage: planes differ in size");
  constexpr double slack = 1e-9;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(L[i] >= -slack && L[i] <= 100.0 + slack)) throw ValidationError("LabImage: L outside [0,100]");
    if (!(std::abs(a[i]) <= kChromaScale + slack) || !(std::abs(b[i]) <= kChromaScale + slack)) {
      throw ValidationError("LabImage: a/b outside [-110,110]");
    }
  }
}

Lab rgb_to_lab(Rgb rgb) {
  const Eigen::Vector3d lin(srgb_to_linear(rgb.r), srgb_to_linear(rgb.g), srgb_to_linear(rgb.b));
  const Eigen::Vector3d xyz = rgb_to_xyz_matrix() * lin;
  const Eigen::Vector3d& wp = white_point();
  const double fx = lab_f(xyz[0] / wp[0]);
  const double fy = lab_f(xyz[1] / wp[1]);
  const double fz = lab_f(xyz[2] / wp[2]);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Rgb lab_to_rgb(Lab lab) {
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const Eigen::Vector3d& wp = white_point();
  const Eigen::Vector3d xyz(wp[0] * lab_f_inv(fx), wp[1] * lab_f_inv(fy), wp[2] * lab_f_inv(fz));
  const Eigen::Vector3d lin = xyz_to_rgb_matrix() * xyz;
  auto out = [](double c) { return std::clamp(linear_to_srgb(std::max(c, 0.0)), 0.0, 1.0); };
  return {out(lin[0]), out(lin[1]), out(lin[2])};
}

namespace {
Eigen::Vector3d lab_to_linear(Lab lab) {
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const Eigen::Vector3d& wp = white_point();
  const Eigen::Vector3d xyz(wp[0] * lab_f_inv(fx), wp[1] * lab_f_inv(fy), wp[2] * lab_f_inv(fz));
  return xyz_to_rgb_matrix() * xyz;
}
}  // namespace

bool in_gamut(Lab lab, double tolerance) {
  const Eigen::Vector3d lin = lab_to_linear(lab);
  for (int c = 0; c < 3; ++c)
    if (lin[c] < -tolerance || lin[c] > 1.0 + tolerance) return false;
  return true;
}

Rgb lab_to_rgb_keep_lightness(Lab lab) {
  lab.L = std::clamp(lab.L, 0.0, 100.0);
  if (in_gamut(lab, 1e-12)) return lab_to_rgb(lab);
  // The neutral axis is always inside the gamut, so shrink chroma until the
  // colour fits.
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 40; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (in_gamut(Lab{lab.L, lab.a * mid, lab.b * mid}, 1e-12)) lo = mid;
    else hi = mid;
  }
  return lab_to_rgb(Lab{lab.L, lab.a * lo, lab.b * lo});
}

LabImage rgb_to_lab(const RgbImage& img) {
  img.validate();
  LabImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const Lab lab = rgb_to_lab(Rgb{img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]});
    out.L[i] = lab.L;
    out.a[i] = lab.a;
    out.b[i] = lab.b;
  }
  return out;
}

RgbImage lab_to_rgb(const LabImage& img) {
  img.validate();
  RgbImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const Rgb rgb = lab_to_rgb(Lab{img.L[i], img.a[i], img.b[i]});
    out.pixels[3 * i] = rgb.r;
    out.pixels[3 * i + 1] = rgb.g;
    out.pixels[3 * i + 2] = rgb.b;
  }
  return out;
}

Hsv rgb_to_hsv(Rgb rgb) {
  const double mx = std::max({rgb.r, rgb.g, rgb.b});
  const double mn = std::min({rgb.r, rgb.g, rgb.b});
  const double chroma = mx - mn;
  Hsv out{0.0, mx > 0.0 ? chroma / mx : 0.0, mx, chroma > 0.0};
  if (!out.hue_defined) return out;
  double h;
  if (mx == rgb.r) {
    h = std::fmod((rgb.g - rgb.b) / chroma, 6.0);
  } else if (mx == rgb.g) {
    h = (rgb.b - rgb.r) / chroma + 2.0;
  } else {
    h = (rgb.r - rgb.g) / chroma + 4.0;
  }
  h *= 60.0;
  if (h < 0.0) h += 360.0;
  if (h >= 360.0) h -= 360.0;
  out.h = h;
  return out;
}

HsvImage rgb_to_hsv(const RgbImage& img) {
  img.validate();
  HsvImage out;
  out.height = img.height;
  out.width = img.width;
  const std::size_t n = img.pixel_count();
  out.hue.resize(n);
  out.hue_defined.resize(n);
  out.saturation.resize(n);
  out.value.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Hsv p = rgb_to_hsv(Rgb{img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]});
    out.hue[i] = p.h;
    out.hue_defined[i] = p.hue_defined;
    out.saturation[i] = p.s;
    out.value[i] = p.v;
  }
  return out;
}

std::size_t HueHistogram::bin_of(double deg) const {
  if (bins.empty()) throw ValidationError("empty hue histogram");
  const double width = 360.0 / static_cast<double>(bins.size());
  deg = std::fmod(deg, 360.0);
  if (deg < 0.0) deg += 360.0;
  return std::min(bins.size() - 1, static_cast<std::size_t>(deg / width));
}

HueHistogram hue_histogram(std::span<const RgbImage> images, int bin_count) {
  if (bin_count < 2) throw ValidationError("hue_histogram: bin_count must be >= 2");
  if (images.empty()) throw ValidationError("hue_histogram: empty image collection");
  HueHistogram hist;
  const double width = 360.0 / bin_count;
  for (int i = 0; i < bin_count; ++i) hist.bins.push_back({i * width, (i + 1) * width, 0.0});
  hist.bins.back().hi_deg = 360.0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(bin_count), 0);
  for (const RgbImage& img : images) {
    img.validate();
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      const Hsv p = rgb_to_hsv(Rgb{img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]});
      if (!p.hue_defined) continue;
      ++counts[hist.bin_of(p.h)];
      ++hist.sample_count;
    }
  }
  if (hist.sample_count == 0) throw ValidationError("hue_histogram: no chromatic pixels in the collection");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    hist.bins[i].frequency = static_cast<double>(counts[i]) / static_cast<double>(hist.sample_count);
  }
  return hist;
}

}  // namespace histnet
