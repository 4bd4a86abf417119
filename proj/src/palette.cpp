#include "histnet/palette.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "histnet/errors.hpp"

namespace histnet {

Palette::Palette(std::vector<PaletteEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw ValidationError("palette is empty");
  if (entries_.size() > 256) throw ValidationError("palette has more than 256 classes");
  std::set<std::string> names;
  std::set<std::array<std::uint8_t, 3>> colors;
  for (const auto& e : entries_) {
    if (!names.insert(e.name).second) throw ValidationError("palette: duplicate class name " + e.name);
    if (!colors.insert(e.rgb).second) throw ValidationError("palette: duplicate color for class " + e.name);
  }
}

Palette Palette::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<PaletteEntry> entries;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string name;
    if (!(fields >> name)) continue;
    int r, g, b;
    std::string extra;
    if (!(fields >> r >> g >> b) || (fields >> extra) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255) {
      throw ValidationError("palette line " + std::to_string(lineno) + ": expected 'name r g b' with 0..255 values");
    }
    entries.push_back({name, {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)}});
  }
  return Palette(std::move(entries));
}

Palette Palette::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open palette file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::optional<std::size_t> Palette::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

std::optional<std::size_t> Palette::index_of(std::array<std::uint8_t, 3> rgb) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].rgb == rgb) return i;
  return std::nullopt;
}

namespace {
void check_classes(const std::vector<std::uint8_t>& classes, int height, int width, std::size_t count) {
  if (classes.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError("class map size does not match " + std::to_string(height) + "x" + std::to_string(width));
  for (std::uint8_t c : classes)
    if (c >= count) throw ValidationError("class index " + std::to_string(c) + " not in palette");
}
}  // namespace

Tensor Palette::render(const std::vector<std::uint8_t>& classes, int height, int width) const {
  check_classes(classes, height, width, entries_.size());
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor t({3, height, width});
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) t[c * plane + i] = normalize(entries_[classes[i]].rgb[c]);
  return t;
}

Image8 Palette::render_image(const std::vector<std::uint8_t>& classes, int height, int width) const {
  check_classes(classes, height, width, entries_.size());
  Image8 img{height, width, 3, std::vector<std::uint8_t>(classes.size() * 3)};
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = entries_[classes[i]].rgb[c];
  return img;
}

std::vector<std::uint8_t> Palette::decode(const Image8& img) const {
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  std::vector<std::uint8_t> out(n);
  if (img.channels == 1) {
    check_classes(img.data, img.height, img.width, entries_.size());
    return img.data;
  }
  if (img.channels != 3) throw ValidationError("parsing image must have 1 or 3 channels");
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::uint8_t, 3> rgb{img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]};
    auto idx = index_of(rgb);
    if (!idx) {
      throw ValidationError("color (" + std::to_string(rgb[0]) + "," + std::to_string(rgb[1]) + "," +
                            std::to_string(rgb[2]) + ") at pixel " + std::to_string(i) + " is not in the palette");
    }
    out[i] = static_cast<std::uint8_t>(*idx);
  }
  return out;
}

}  // namespace histnet
