#pragma once

#include <map>
#include <string>
#include <vector>

#include "histnet/autograd.hpp"
#include "histnet/random.hpp"

namespace histnet {

struct NamedParam {
  std::string name;
  Var var;
};

/// Ordered, named collection of trainable leaves.
class ParameterSet {
 public:
  Var add(const std::string& name, Tensor init);

  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<Var> vars() const;
  /// Parameters whose name starts with `prefix`.
  std::vector<Var> vars_with_prefix(const std::string& prefix) const;
  const Var* find(const std::string& name) const;
  Var& at(const std::string& name);
  std::size_t scalar_count() const;

 private:
  std::vector<NamedParam> items_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal initialised 2-D convolution with optional bias.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet& params, const std::string& name, int in, int out, int kernel, int stride, int pad,
         bool bias, double slope, Rng& rng);

  Var operator()(const Var& x) const;
  int out_channels() const { return out_; }

 private:
  Var weight_;
  Var bias_;
  int out_ = 0;
  ops::ConvGeometry geo_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, int in, int out, double slope, Rng& rng);

  /// x [N, in] -> [N, out]
  Var operator()(const Var& x) const;

 private:
  Var weight_;
  Var bias_;
};

/// [N, C, H, W] -> [N, C]
Var global_average_pool(const Var& x);
/// [N, C] -> [N, C, H, W]
Var spatial_broadcast(const Var& v, int height, int width);
Var add_bias(const Var& x, const Var& bias);

}  // namespace histnet
