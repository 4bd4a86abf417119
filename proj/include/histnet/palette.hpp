#pragma once

// Color-coded rendering of human-parsing class maps.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histnet/image_io.hpp"
#include "histnet/tensor.hpp"

namespace histnet {

struct PaletteEntry {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

class Palette {
 public:
  Palette() = default;
  explicit Palette(std::vector<PaletteEntry> entries);

  /// "name r g b" per line; '#' starts a comment. Class index = line order.
  static Palette parse(const std::string& text);
  static Palette load(const std::filesystem::path& path);

  std::size_t size() const { return entries_.size(); }
  const PaletteEntry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<PaletteEntry>& entries() const { return entries_; }
  std::optional<std::size_t> index_of(const std::string& name) const;
  std::optional<std::size_t> index_of(std::array<std::uint8_t, 3> rgb) const;

  /// Channel value v in [0, 255] mapped to v / 127.5 - 1.
  static double normalize(std::uint8_t v) { return v / 127.5 - 1.0; }

  /// Class map (one byte per pixel) -> [3, H, W] normalized rendering.
  Tensor render(const std::vector<std::uint8_t>& classes, int height, int width) const;
  Image8 render_image(const std::vector<std::uint8_t>& classes, int height, int width) const;

  /// Accepts a single-channel class-index image or an RGB palette image.
  /// Throws ValidationError naming the first unknown class or color.
  std::vector<std::uint8_t> decode(const Image8& img) const;

 private:
  std::vector<PaletteEntry> entries_;
};

}  // namespace histnet
