#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "histnet/tensor.hpp"

namespace histnet {

/// Seeded generator whose draws are identical on every platform: only the
/// raw mt19937_64 stream is used, never the implementation-defined std
/// distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  Tensor normal_tensor(Shape shape, double stddev);
  Tensor uniform_tensor(Shape shape, double lo, double hi);
  std::vector<std::size_t> permutation(std::size_t n);

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace histnet
