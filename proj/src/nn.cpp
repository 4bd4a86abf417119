#include "histnet/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace histnet {

Var ParameterSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
  index_[name] = items_.size();
  items_.push_back({name, Var::param(std::move(init))});
  return items_.back().var;
}

std::vector<Var> ParameterSet::vars() const {
  std::vector<Var> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.var);
  return out;
}

std::vector<Var> ParameterSet::vars_with_prefix(const std::string& prefix) const {
  std::vector<Var> out;
  for (const auto& p : items_)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.var);
  return out;
}

const Var* ParameterSet::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].var;
}

Var& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].var;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.var.value().size();
  return n;
}

Conv2d::Conv2d(ParameterSet& params, const std::string& name, int in, int out, int kernel, int stride, int pad,
               bool bias, double slope, Rng& rng)
    : out_(out), geo_{stride, pad} {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  const double std = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
  weight_ = params.add(name + ".weight", rng.normal_tensor({out, in, kernel, kernel}, std));
  if (bias) bias_ = params.add(name + ".bias", Tensor({out}, 0.0));
}

Var add_bias(const Var& x, const Var& bias) {
  Shape bshape(x.shape().size(), 1);
  bshape[1] = bias.shape()[0];
  return ops::add(x, ops::broadcast_to(ops::reshape(bias, bshape), x.shape()));
}

Var Conv2d::operator()(const Var& x) const {
  Var y = ops::conv2d(x, weight_, geo_);
  return bias_.defined() ? add_bias(y, bias_) : y;
}

Linear::Linear(ParameterSet& params, const std::string& name, int in, int out, double slope, Rng& rng) {
  const double std = std::sqrt(2.0 / ((1.0 + slope * slope) * in));
  weight_ = params.add(name + ".weight", rng.normal_tensor({out, in}, std));
  bias_ = params.add(name + ".bias", Tensor({out}, 0.0));
}

Var Linear::operator()(const Var& x) const { return add_bias(ops::matmul(x, weight_, false, true), bias_); }

Var global_average_pool(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_average_pool expects NCHW");
  return ops::scale(ops::reshape(ops::reduce_to(x, {s[0], s[1], 1, 1}), {s[0], s[1]}), 1.0 / (s[2] * s[3]));
}

Var spatial_broadcast(const Var& v, int height, int width) {
  const Shape& s = v.shape();
  if (s.size() != 2) throw ShapeError("spatial_broadcast expects [N, C]");
  return ops::broadcast_to(ops::reshape(v, {s[0], s[1], 1, 1}), {s[0], s[1], height, width});
}

}  // namespace histnet
