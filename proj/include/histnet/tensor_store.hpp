#pragma once

// Directory-of-tensors format shared by checkpoints and weight imports:
//
//   <dir>/manifest.json  {"format": "histnet-tensors", "version": 1,
//                         "dtype": "float64-le", "payload": "tensors.bin",
//                         "meta": {...},
//                         "tensors": [{"name", "shape", "offset", "count"}, ...]}
//   <dir>/tensors.bin    concatenated little-endian IEEE-754 doubles;
//                        `offset` and `count` are in elements.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "histnet/tensor.hpp"

namespace histnet {

struct TensorBundle {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> order;
  std::map<std::string, Tensor> tensors;

  void put(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

void write_tensor_bundle(const std::filesystem::path& dir, const TensorBundle& bundle);
TensorBundle read_tensor_bundle(const std::filesystem::path& dir);

}  // namespace histnet
