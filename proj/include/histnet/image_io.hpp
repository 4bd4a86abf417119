#pragma once

// 8-bit PNG/JPEG reading and writing plus the small set of geometric and
// filtering operations the pipeline needs.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "histnet/colorspace.hpp"

namespace histnet {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw 8-bit image, interleaved, 1 or 3 channels.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Decodes PNG or JPEG (detected from the file signature). Alpha is dropped,
/// 16-bit PNG is reduced to 8 bits, palette PNG is expanded to RGB.
Image8 read_image8(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& img);
void write_jpeg(const std::filesystem::path& path, const Image8& img, int quality = 95);

/// 8-bit channels map linearly onto [0, 1]; gray input is replicated.
RgbImage to_rgb(const Image8& img);
/// Rounds to nearest 8-bit level.
Image8 to_image8(const RgbImage& img);
/// Single-channel 8-bit image of a [0, 1] plane.
Image8 plane_to_image8(const std::vector<double>& plane, int height, int width);

RgbImage read_rgb(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const RgbImage& img);

/// True when every pixel of the 8-bit image has equal channels.
bool is_grayscale(const Image8& img);

RgbImage mirror_horizontal(const RgbImage& img);

/// Separable Gaussian blur with reflective borders, kernel radius ceil(3 sigma).
RgbImage gaussian_blur(const RgbImage& img, double sigma);

/// Area-weighted resize (antialiased when shrinking, bilinear-like when growing).
RgbImage resize(const RgbImage& img, int height, int width);

/// Aspect-preserving resize so the short side equals `size`, then a centered
/// size x size crop.
RgbImage resize_center_crop(const RgbImage& img, int size);

/// Nearest-neighbour version for label maps (one byte per pixel).
std::vector<std::uint8_t> resize_center_crop_nearest(const std::vector<std::uint8_t>& labels, int height, int width,
                                                     int size);

/// Side-by-side panel of equally sized images.
RgbImage hconcat(const std::vector<RgbImage>& images, int gap = 2);

}  // namespace histnet
