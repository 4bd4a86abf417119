#include "histnet/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

namespace histnet {

namespace fs = std::filesystem;

namespace {

bool has_png_signature(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

bool has_jpeg_signature(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[3] = {};
  in.read(reinterpret_cast<char*>(sig), 3);
  return in.gcount() == 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF;
}

Image8 read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ImageIoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 img;
  img.height = static_cast<int>(png.height);
  img.width = static_cast<int>(png.width);
  img.channels = color ? 3 : 1;
  img.data.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return img;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegError*>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

// Returns false with err->message filled on failure. No objects with
// destructors may live in this frame because of longjmp.
bool decode_jpeg(std::FILE* file, Image8* out, JpegError* err) {
  jpeg_decompress_struct info;
  info.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  if (setjmp(err->jump)) {
    jpeg_destroy_decompress(&info);
    return false;
  }
  jpeg_create_decompress(&info);
  jpeg_stdio_src(&info, file);
  jpeg_read_header(&info, TRUE);
  info.out_color_space = info.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&info);
  out->height = static_cast<int>(info.output_height);
  out->width = static_cast<int>(info.output_width);
  out->channels = info.output_components;
  out->data.resize(static_cast<std::size_t>(out->height) * out->width * out->channels);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = out->data.data() + static_cast<std::size_t>(info.output_scanline) * out->width * out->channels;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return true;
}

bool encode_jpeg(std::FILE* file, const Image8* img, int quality, JpegError* err) {
  jpeg_compress_struct info;
  info.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  if (setjmp(err->jump)) {
    jpeg_destroy_compress(&info);
    return false;
  }
  jpeg_create_compress(&info);
  jpeg_stdio_dest(&info, file);
  info.image_width = static_cast<JDIMENSION>(img->width);
  info.image_height = static_cast<JDIMENSION>(img->height);
  info.input_components = img->channels;
  info.in_color_space = img->channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&info);
  jpeg_set_quality(&info, quality, TRUE);
  jpeg_start_compress(&info, TRUE);
  while (info.next_scanline < info.image_height) {
    auto* row = const_cast<JSAMPROW>(img->data.data() +
                                     static_cast<std::size_t>(info.next_scanline) * img->width * img->channels);
    jpeg_write_scanlines(&info, &row, 1);
  }
  jpeg_finish_compress(&info);
  jpeg_destroy_compress(&info);
  return true;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

Image8 read_jpeg(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open " + path.string());
  Image8 img;
  JpegError err{};
  if (!decode_jpeg(file.get(), &img, &err)) {
    throw ImageIoError("cannot decode JPEG " + path.string() + ": " + err.message);
  }
  return img;
}

// Triangle-filter resampling weights along one axis.
struct Taps {
  std::vector<int> first;
  std::vector<std::vector<double>> weights;
};

Taps resample_taps(int in, int out) {
  Taps taps;
  const double scale = static_cast<double>(in) / out;
  const double support = std::max(scale, 1.0);
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = static_cast<int>(std::floor(center - support));
    const int hi = static_cast<int>(std::ceil(center + support));
    std::vector<double> w;
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) {
      const double v = std::max(0.0, 1.0 - std::abs((j + 0.5 - center) / support));
      w.push_back(v);
      total += v;
    }
    for (double& v : w) v /= total;
    taps.first.push_back(lo);
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

}  // namespace

Image8 read_image8(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ImageIoError("not a readable file: " + path.string());
  if (has_png_signature(path)) return read_png(path);
  if (has_jpeg_signature(path)) return read_jpeg(path);
  throw ImageIoError("unsupported image format (expected PNG or JPEG): " + path.string());
}

void write_png(const fs::path& path, const Image8& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

void write_jpeg(const fs::path& path, const Image8& img, int quality) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageIoError("cannot open " + path.string() + " for writing");
  JpegError err{};
  if (!encode_jpeg(file.get(), &img, quality, &err)) {
    throw ImageIoError("cannot encode JPEG " + path.string() + ": " + err.message);
  }
}

RgbImage to_rgb(const Image8& img) {
  RgbImage out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, img.channels == 1 ? 0 : c) / 255.0;
  return out;
}

Image8 to_image8(const RgbImage& img) {
  Image8 out{img.height, img.width, 3, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    out.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

Image8 plane_to_image8(const std::vector<double>& plane, int height, int width) {
  Image8 out{height, width, 1, std::vector<std::uint8_t>(plane.size())};
  for (std::size_t i = 0; i < plane.size(); ++i) {
    out.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(plane[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

RgbImage read_rgb(const fs::path& path) { return to_rgb(read_image8(path)); }

void write_rgb_png(const fs::path& path, const RgbImage& img) { write_png(path, to_image8(img)); }

bool is_grayscale(const Image8& img) {
  if (img.channels == 1) return true;
  for (std::size_t i = 0; i + 2 < img.data.size(); i += 3) {
    if (img.data[i] != img.data[i + 1] || img.data[i] != img.data[i + 2]) return false;
  }
  return true;
}

RgbImage mirror_horizontal(const RgbImage& img) {
  RgbImage out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

RgbImage gaussian_blur(const RgbImage& img, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;
  // Half-sample symmetric reflection: -1 -> 0, n -> n-1.
  auto reflect = [](int i, int n) {
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };
  RgbImage tmp(img.height, img.width), out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * img.at(y, reflect(x + k, img.width), c);
        tmp.at(y, x, c) = s;
      }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k) s += kernel[k + radius] * tmp.at(reflect(y + k, img.height), x, c);
        out.at(y, x, c) = std::clamp(s, 0.0, 1.0);
      }
  return out;
}

RgbImage resize(const RgbImage& img, int height, int width) {
  if (height < 1 || width < 1) throw ValidationError("resize: target size must be positive");
  if (height == img.height && width == img.width) return img;
  const Taps tx = resample_taps(img.width, width);
  const Taps ty = resample_taps(img.height, height);
  auto clampi = [](int v, int n) { return std::clamp(v, 0, n - 1); };
  RgbImage tmp(img.height, width), out(height, width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < tx.weights[x].size(); ++k)
          s += tx.weights[x][k] * img.at(y, clampi(tx.first[x] + static_cast<int>(k), img.width), c);
        tmp.at(y, x, c) = s;
      }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < ty.weights[y].size(); ++k)
          s += ty.weights[y][k] * tmp.at(clampi(ty.first[y] + static_cast<int>(k), img.height), x, c);
        out.at(y, x, c) = std::clamp(s, 0.0, 1.0);
      }
  return out;
}

namespace {
struct CropPlan {
  int scaled_h, scaled_w, top, left;
};
CropPlan crop_plan(int h, int w, int size) {
  CropPlan p{};
  if (h <= w) {
    p.scaled_h = size;
    p.scaled_w = std::max(size, static_cast<int>(std::lround(static_cast<double>(w) * size / h)));
  } else {
    p.scaled_w = size;
    p.scaled_h = std::max(size, static_cast<int>(std::lround(static_cast<double>(h) * size / w)));
  }
  p.top = (p.scaled_h - size) / 2;
  p.left = (p.scaled_w - size) / 2;
  return p;
}
}  // namespace

RgbImage resize_center_crop(const RgbImage& img, int size) {
  if (size < 1) throw ValidationError("resize_center_crop: size must be positive");
  const CropPlan p = crop_plan(img.height, img.width, size);
  const RgbImage scaled = resize(img, p.scaled_h, p.scaled_w);
  RgbImage out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = scaled.at(y + p.top, x + p.left, c);
  return out;
}

std::vector<std::uint8_t> resize_center_crop_nearest(const std::vector<std::uint8_t>& labels, int height, int width,
                                                     int size) {
  const CropPlan p = crop_plan(height, width, size);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const int sy = std::min(height - 1, static_cast<int>((y + p.top + 0.5) * height / p.scaled_h));
    for (int x = 0; x < size; ++x) {
      const int sx = std::min(width - 1, static_cast<int>((x + p.left + 0.5) * width / p.scaled_w));
      out[static_cast<std::size_t>(y) * size + x] = labels[static_cast<std::size_t>(sy) * width + sx];
    }
  }
  return out;
}

RgbImage hconcat(const std::vector<RgbImage>& images, int gap) {
  if (images.empty()) throw ValidationError("hconcat of no images");
  const int h = images[0].height;
  int w = 0;
  for (const RgbImage& img : images) {
    if (img.height != h) throw ValidationError("hconcat: images differ in height");
    w += img.width;
  }
  w += gap * static_cast<int>(images.size() - 1);
  RgbImage out(h, w, 1.0);
  int x0 = 0;
  for (const RgbImage& img : images) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = img.at(y, x, c);
    x0 += img.width + gap;
  }
  return out;
}

}  // namespace histnet
