#include "histnet/tensor_store.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

namespace histnet {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "tensor payloads are written in native little-endian order");

void TensorBundle::put(const std::string& name, Tensor t) {
  if (!tensors.count(name)) order.push_back(name);
  tensors[name] = std::move(t);
}

const Tensor& TensorBundle::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("tensor bundle has no tensor named " + name);
  return it->second;
}

void write_tensor_bundle(const fs::path& dir, const TensorBundle& bundle) {
  fs::create_directories(dir);
  json manifest{{"format", "histnet-tensors"}, {"version", 1},      {"dtype", "float64-le"},
                {"payload", "tensors.bin"},   {"meta", bundle.meta}, {"tensors", json::array()}};
  std::ofstream payload(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!payload) throw std::runtime_error("cannot write " + (dir / "tensors.bin").string());
  std::size_t offset = 0;
  for (const std::string& name : bundle.order) {
    const Tensor& t = bundle.tensors.at(name);
    payload.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  if (!payload) throw std::runtime_error("short write to " + (dir / "tensors.bin").string());
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

TensorBundle read_tensor_bundle(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing manifest.json in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "histnet-tensors" || manifest.value("dtype", "") != "float64-le") {
    throw std::runtime_error(dir.string() + " is not a histnet tensor directory");
  }
  std::ifstream payload(dir / manifest.value("payload", "tensors.bin"), std::ios::binary);
  if (!payload) throw std::runtime_error("missing tensor payload in " + dir.string());
  TensorBundle bundle;
  bundle.meta = manifest.value("meta", json::object());
  for (const json& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != shape_size(shape)) throw std::runtime_error("tensor entry count/shape mismatch in " + dir.string());
    std::vector<double> data(count);
    payload.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
    payload.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!payload) throw std::runtime_error("truncated tensor payload in " + dir.string());
    bundle.put(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return bundle;
}

}  // namespace histnet
