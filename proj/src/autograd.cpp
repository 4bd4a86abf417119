#include "histnet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <unordered_map>

namespace histnet {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using Index = std::shared_ptr<const std::vector<std::size_t>>;


// Flat index in `in` for every element of the broadcast result `out`.
Index broadcast_map(const Shape& in, const Shape& out) {
  static std::mutex mu;
  static std::map<std::pair<Shape, Shape>, Index> cache;
  {
    std::lock_guard lock(mu);
    auto it = cache.find({in, out});
    if (it != cache.end()) return it->second;
  }
  if (in.size() != out.size()) {
    throw ShapeError("broadcast rank mismatch " + shape_str(in) + " -> " + shape_str(out));
  }
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    if (in[d] != out[d] && in[d] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
    }
    in_stride[d] = (in[d] == 1) ? 0 : s;
    s *= static_cast<std::size_t>(in[d]);
  }
  auto map = std::make_shared<std::vector<std::size_t>>(shape_size(out));
  std::vector<int> idx(rank, 0);
  for (std::size_t i = 0; i < map->size(); ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += in_stride[d] * static_cast<std::size_t>(idx[d]);
    (*map)[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  std::lock_guard lock(mu);
  if (cache.size() > 4096) cache.clear();
  cache[{in, out}] = map;
  return map;
}

Var gather_shared(const Var& a, Index index, const Shape& shape);

Var scatter_shared(const Var& g, Index index, const Shape& shape) {
  if (index->size() != g.value().size()) throw ShapeError("scatter: index/value size mismatch");
  Tensor out(shape, 0.0);
  const double* src = g.value().data();
  double* dst = out.data();
  for (std::size_t i = 0; i < index->size(); ++i) dst[(*index)[i]] += src[i];
  Shape gshape = g.shape();
  return Var::make(std::move(out), "scatter", {g},
                   [index, gshape](const Var& go, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{gather_shared(go, index, gshape)};
                   });
}

Var gather_shared(const Var& a, Index index, const Shape& shape) {
  Tensor out(shape);
  if (index->size() != out.size()) throw ShapeError("gather: index size does not match output shape");
  const double* src = a.value().data();
  double* dst = out.data();
  for (std::size_t i = 0; i < index->size(); ++i) dst[i] = src[(*index)[i]];
  Shape ashape = a.shape();
  return Var::make(std::move(out), "gather", {a},
                   [index, ashape](const Var& go, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{scatter_shared(go, index, ashape)};
                   });
}

void check_conv_shapes(const Shape& x, const Shape& w, const char* what) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError(std::string(what) + ": expects rank-4 input and weight");
  if (x[1] != w[1]) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x[1]) + " channels, weight expects " +
                     std::to_string(w[1]));
  }
  if (w[2] != w[3]) throw ShapeError(std::string(what) + ": only square kernels are supported");
}

struct ConvDims {
  int n, c, h, w, o, k, ho, wo;
  std::size_t kk() const { return static_cast<std::size_t>(c) * k * k; }
  std::size_t p() const { return static_cast<std::size_t>(ho) * wo; }
};

ConvDims conv_dims(const Shape& x, const Shape& w, ops::ConvGeometry geo) {
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0};
  d.ho = (d.h + 2 * geo.pad - d.k) / geo.stride + 1;
  d.wo = (d.w + 2 * geo.pad - d.k) / geo.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(d.k) + " does not fit input " + shape_str(x));
  }
  return d;
}

void im2col(const double* x, const ConvDims& d, ops::ConvGeometry geo, double* col) {
  const std::size_t p = d.p();
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * d.k + ki) * d.k + kj) * p;
        const double* plane = x + static_cast<std::size_t>(c) * d.h * d.w;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * geo.stride - geo.pad + ki;
          double* out = row + static_cast<std::size_t>(oh) * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::fill(out, out + d.wo, 0.0);
            continue;
          }
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * geo.stride - geo.pad + kj;
            out[ow] = (iw < 0 || iw >= d.w) ? 0.0 : plane[static_cast<std::size_t>(ih) * d.w + iw];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvDims& d, ops::ConvGeometry geo, double* x) {
  const std::size_t p = d.p();
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const double* row = col + ((static_cast<std::size_t>(c) * d.k + ki) * d.k + kj) * p;
        double* plane = x + static_cast<std::size_t>(c) * d.h * d.w;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * geo.stride - geo.pad + ki;
          if (ih < 0 || ih >= d.h) continue;
          const double* in = row + static_cast<std::size_t>(oh) * d.wo;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * geo.stride - geo.pad + kj;
            if (iw >= 0 && iw < d.w) plane[static_cast<std::size_t>(ih) * d.w + iw] += in[ow];
          }
        }
      }
    }
  }
}

Tensor elementwise(const Tensor& a, const Tensor& b, const char* what, double (*f)(double, double)) {
  require_same_shape(a, b, what);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor& Var::mutable_value() {
  if (!node_->inputs.empty()) throw std::logic_error("mutable_value() on a non-leaf variable");
  return node_->value;
}

Var Var::make(Tensor value, const char* op, std::vector<Var> inputs, BackwardFn backward) {
  Var out(std::move(value), false);
  out.node_->op = op;
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs = std::move(inputs);
  out.node_->backward = std::move(backward);
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph) {
  if (output.value().size() != 1) throw ShapeError("grad: output must be a scalar, got " + shape_str(output.shape()));

  std::unordered_map<const Node*, bool> is_target;
  for (const Var& v : wrt) is_target[v.node()] = true;

  // Post-order over nodes that require grad; `reaches` marks nodes that
  // depend on at least one target.
  std::vector<const Node*> order;
  std::unordered_map<const Node*, bool> reaches;
  if (output.requires_grad()) {
    std::vector<std::pair<const Node*, std::size_t>> stack{{output.node(), 0}};
    reaches[output.node()] = false;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const Node* child = node->inputs[next++].node();
        if (child->requires_grad && !reaches.count(child)) {
          reaches[child] = false;
          stack.emplace_back(child, 0);
        }
        continue;
      }
      bool r = is_target.count(node) > 0;
      for (const Var& in : node->inputs)
        if (in.requires_grad() && reaches[in.node()]) r = true;
      reaches[node] = r;
      order.push_back(node);
      stack.pop_back();
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<const Node*, Var> grads;
  grads[output.node()] = Var::constant(Tensor(output.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (!reaches[node] || node->inputs.empty()) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    std::vector<bool> need(node->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < need.size(); ++i) {
      const Var& in = node->inputs[i];
      need[i] = in.requires_grad() && reaches[in.node()];
      any = any || need[i];
    }
    if (!any) continue;
    const Var g = found->second;
    std::vector<Var> parts = node->backward(g, node->inputs, need);
    for (std::size_t i = 0; i < need.size(); ++i) {
      if (!need[i] || !parts[i].defined()) continue;
      const Node* in = node->inputs[i].node();
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, parts[i]);
      } else {
        slot->second = ops::add(slot->second, parts[i]);
      }
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& v : wrt) {
    auto found = grads.find(v.node());
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(Var::constant(Tensor(v.shape(), 0.0)));
    }
  }
  return result;
}

std::vector<Tensor> grad_values(const Var& output, std::span<const Var> wrt) {
  std::vector<Tensor> out;
  for (const Var& g : grad(output, wrt, false)) out.push_back(g.value());
  return out;
}

namespace ops {

Var add(const Var& a, const Var& b) {
  return Var::make(elementwise(a.value(), b.value(), "add", [](double x, double y) { return x + y; }), "add", {a, b},
                   [](const Var& g, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{g, g};
                   });
}

Var sub(const Var& a, const Var& b) {
  return Var::make(elementwise(a.value(), b.value(), "sub", [](double x, double y) { return x - y; }), "sub", {a, b},
                   [](const Var& g, std::span<const Var>, const std::vector<bool>& need) {
                     return std::vector<Var>{g, need[1] ? scale(g, -1.0) : Var()};
                   });
}

Var mul(const Var& a, const Var& b) {
  return Var::make(elementwise(a.value(), b.value(), "mul", [](double x, double y) { return x * y; }), "mul", {a, b},
                   [](const Var& g, std::span<const Var> in, const std::vector<bool>& need) {
                     return std::vector<Var>{need[0] ? mul(g, in[1]) : Var(), need[1] ? mul(g, in[0]) : Var()};
                   });
}

Var scale(const Var& a, double k) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= k;
  return Var::make(std::move(out), "scale", {a}, [k](const Var& g, std::span<const Var>, const std::vector<bool>&) {
    return std::vector<Var>{scale(g, k)};
  });
}

Var add_scalar(const Var& a, double k) {
  Tensor out = a.value();
  for (double& v : out.values()) v += k;
  return Var::make(std::move(out), "add_scalar", {a},
                   [](const Var& g, std::span<const Var>, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

Var mul_const(const Var& a, const Tensor& k) {
  Tensor out = elementwise(a.value(), k, "mul_const", [](double x, double y) { return x * y; });
  auto factor = std::make_shared<const Tensor>(k);
  return Var::make(std::move(out), "mul_const", {a},
                   [factor](const Var& g, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{mul_const(g, *factor)};
                   });
}

Var square(const Var& a) { return mul(a, a); }

Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return gather_shared(a, broadcast_map(a.shape(), shape), shape);
}

Var reduce_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return scatter_shared(a, broadcast_map(shape, a.shape()), shape);
}

Var reshape(const Var& a, const Shape& shape) {
  Shape original = a.shape();
  return Var::make(a.value().reshaped(shape), "reshape", {a},
                   [original](const Var& g, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{reshape(g, original)};
                   });
}

Var sum(const Var& a) {
  auto index = std::make_shared<const std::vector<std::size_t>>(a.value().size(), 0);
  return scatter_shared(a, index, Shape{});
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_per_sample(const Var& a) {
  if (a.shape().empty()) throw ShapeError("sum_per_sample on a scalar");
  const int n = a.shape()[0];
  const std::size_t inner = a.value().size() / static_cast<std::size_t>(std::max(n, 1));
  auto index = std::make_shared<std::vector<std::size_t>>(a.value().size());
  for (std::size_t i = 0; i < index->size(); ++i) (*index)[i] = i / inner;
  return scatter_shared(a, index, Shape{n});
}

Var mean_per_sample(const Var& a) {
  const std::size_t inner = a.value().size() / static_cast<std::size_t>(std::max(a.shape()[0], 1));
  return scale(sum_per_sample(a), 1.0 / static_cast<double>(inner));
}

Var scale_per_sample(const Var& a, const Var& k) {
  if (k.shape().size() != 1 || a.shape().empty() || k.shape()[0] != a.shape()[0]) {
    throw ShapeError("scale_per_sample: factor " + shape_str(k.shape()) + " does not match " + shape_str(a.shape()));
  }
  Shape kshape(a.shape().size(), 1);
  kshape[0] = a.shape()[0];
  return mul(a, broadcast_to(reshape(k, kshape), a.shape()));
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  if (a.shape().size() != 2 || b.shape().size() != 2) throw ShapeError("matmul expects rank-2 operands");
  const int ar = a.shape()[0], ac = a.shape()[1], br = b.shape()[0], bc = b.shape()[1];
  const int m = ta ? ac : ar, k1 = ta ? ar : ac, k2 = tb ? bc : br, n = tb ? br : bc;
  if (k1 != k2) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + (ta ? "^T" : "") + " * " +
                     shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  Tensor out(Shape{m, n});
  ConstMap am(a.value().data(), ar, ac), bm(b.value().data(), br, bc);
  MutMap om(out.data(), m, n);
  if (!ta && !tb) om.noalias() = am * bm;
  if (!ta && tb) om.noalias() = am * bm.transpose();
  if (ta && !tb) om.noalias() = am.transpose() * bm;
  if (ta && tb) om.noalias() = am.transpose() * bm.transpose();
  return Var::make(std::move(out), "matmul", {a, b},
                   [ta, tb](const Var& g, std::span<const Var> in, const std::vector<bool>& need) {
                     const Var& A = in[0];
                     const Var& B = in[1];
                     Var da, db;
                     if (!ta && !tb) {
                       if (need[0]) da = matmul(g, B, false, true);
                       if (need[1]) db = matmul(A, g, true, false);
                     } else if (!ta && tb) {
                       if (need[0]) da = matmul(g, B, false, false);
                       if (need[1]) db = matmul(g, A, true, false);
                     } else if (ta && !tb) {
                       if (need[0]) da = matmul(B, g, false, true);
                       if (need[1]) db = matmul(A, g, false, false);
                     } else {
                       if (need[0]) da = matmul(B, g, true, true);
                       if (need[1]) db = matmul(g, A, true, true);
                     }
                     return std::vector<Var>{da, db};
                   });
}

Var conv2d(const Var& x, const Var& w, ConvGeometry geo) {
  check_conv_shapes(x.shape(), w.shape(), "conv2d");
  const ConvDims d = conv_dims(x.shape(), w.shape(), geo);
  Tensor out(Shape{d.n, d.o, d.ho, d.wo});
  std::vector<double> col(d.kk() * d.p());
  ConstMap wm(w.value().data(), d.o, static_cast<Eigen::Index>(d.kk()));
  const std::size_t in_stride = static_cast<std::size_t>(d.c) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.o) * d.p();
  for (int n = 0; n < d.n; ++n) {
    im2col(x.value().data() + n * in_stride, d, geo, col.data());
    ConstMap cm(col.data(), static_cast<Eigen::Index>(d.kk()), static_cast<Eigen::Index>(d.p()));
    MutMap om(out.data() + n * out_stride, d.o, static_cast<Eigen::Index>(d.p()));
    om.noalias() = wm * cm;
  }
  Shape xs = x.shape(), ws = w.shape();
  return Var::make(std::move(out), "conv2d", {x, w},
                   [xs, ws, geo](const Var& g, std::span<const Var> in, const std::vector<bool>& need) {
                     return std::vector<Var>{need[0] ? conv2d_input_grad(g, in[1], xs, geo) : Var(),
                                             need[1] ? conv2d_weight_grad(in[0], g, ws, geo) : Var()};
                   });
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, ConvGeometry geo) {
  check_conv_shapes(x_shape, w.shape(), "conv2d_input_grad");
  const ConvDims d = conv_dims(x_shape, w.shape(), geo);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw ShapeError("conv2d_input_grad: gradient shape " + shape_str(g.shape()) + " inconsistent with input " +
                     shape_str(x_shape));
  }
  Tensor out(x_shape, 0.0);
  std::vector<double> col(d.kk() * d.p());
  ConstMap wm(w.value().data(), d.o, static_cast<Eigen::Index>(d.kk()));
  const std::size_t in_stride = static_cast<std::size_t>(d.c) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.o) * d.p();
  for (int n = 0; n < d.n; ++n) {
    ConstMap gm(g.value().data() + n * out_stride, d.o, static_cast<Eigen::Index>(d.p()));
    MutMap cm(col.data(), static_cast<Eigen::Index>(d.kk()), static_cast<Eigen::Index>(d.p()));
    cm.noalias() = wm.transpose() * gm;
    col2im(col.data(), d, geo, out.data() + n * in_stride);
  }
  Shape ws = w.shape();
  return Var::make(std::move(out), "conv2d_input_grad", {g, w},
                   [ws, geo](const Var& go, std::span<const Var> in, const std::vector<bool>& need) {
                     return std::vector<Var>{need[0] ? conv2d(go, in[1], geo) : Var(),
                                             need[1] ? conv2d_weight_grad(go, in[0], ws, geo) : Var()};
                   });
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, ConvGeometry geo) {
  check_conv_shapes(x.shape(), w_shape, "conv2d_weight_grad");
  const ConvDims d = conv_dims(x.shape(), w_shape, geo);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(g.shape()) + " inconsistent with input " +
                     shape_str(x.shape()));
  }
  Tensor out(w_shape, 0.0);
  std::vector<double> col(d.kk() * d.p());
  MutMap om(out.data(), d.o, static_cast<Eigen::Index>(d.kk()));
  const std::size_t in_stride = static_cast<std::size_t>(d.c) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.o) * d.p();
  for (int n = 0; n < d.n; ++n) {
    im2col(x.value().data() + n * in_stride, d, geo, col.data());
    ConstMap cm(col.data(), static_cast<Eigen::Index>(d.kk()), static_cast<Eigen::Index>(d.p()));
    ConstMap gm(g.value().data() + n * out_stride, d.o, static_cast<Eigen::Index>(d.p()));
    om.noalias() += gm * cm.transpose();
  }
  Shape xs = x.shape();
  return Var::make(std::move(out), "conv2d_weight_grad", {x, g},
                   [xs, geo](const Var& go, std::span<const Var> in, const std::vector<bool>& need) {
                     return std::vector<Var>{need[0] ? conv2d_input_grad(in[1], go, xs, geo) : Var(),
                                             need[1] ? conv2d(in[0], go, geo) : Var()};
                   });
}

Var max_pool2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("max_pool2 needs even spatial dims, got " + shape_str(s));
  const int n = s[0], c = s[1], h = s[2] / 2, w = s[3] / 2;
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * c * h * w);
  const double* v = x.value().data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * s[2] * s[3];
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        std::size_t best = base + static_cast<std::size_t>(2 * i) * s[3] + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t k = base + static_cast<std::size_t>(2 * i + di) * s[3] + 2 * j + dj;
            if (v[k] > v[best]) best = k;
          }
        (*index)[o++] = best;
      }
    }
  }
  return gather_shared(x, index, Shape{n, c, h, w});
}

namespace {
Index upsample_map(const Shape& s) {
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * c * h * w * 4);
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        (*index)[o++] = (static_cast<std::size_t>(p) * h + i / 2) * w + j / 2;
  return index;
}
}  // namespace

Var upsample2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample2 expects NCHW");
  return gather_shared(x, upsample_map(s), Shape{s[0], s[1], 2 * s[2], 2 * s[3]});
}

Var sum_pool2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("sum_pool2 needs even spatial dims");
  Shape half{s[0], s[1], s[2] / 2, s[3] / 2};
  return scatter_shared(x, upsample_map(half), half);
}

Var scatter(const Var& g, std::vector<std::size_t> index, const Shape& shape) {
  return scatter_shared(g, std::make_shared<const std::vector<std::size_t>>(std::move(index)), shape);
}

Var gather(const Var& a, std::vector<std::size_t> index, const Shape& shape) {
  return gather_shared(a, std::make_shared<const std::vector<std::size_t>>(std::move(index)), shape);
}

namespace {
Index channel_slice_map(const Shape& s, int begin, int end) {
  const int n = s[0], c = s[1];
  const std::size_t plane = shape_size(s) / (static_cast<std::size_t>(n) * c);
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * (end - begin) * plane);
  std::size_t o = 0;
  for (int i = 0; i < n; ++i)
    for (int ch = begin; ch < end; ++ch)
      for (std::size_t k = 0; k < plane; ++k) (*index)[o++] = (static_cast<std::size_t>(i) * c + ch) * plane + k;
  return index;
}
}  // namespace

Var slice_channels(const Var& a, int begin, int end) {
  const Shape& s = a.shape();
  if (s.size() < 2 || begin < 0 || end > s[1] || begin >= end) {
    throw ShapeError("slice_channels [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(s));
  }
  Shape out = s;
  out[1] = end - begin;
  return gather_shared(a, channel_slice_map(s, begin, end), out);
}

Var pad_channels(const Var& a, int begin, int total) {
  Shape full = a.shape();
  const int c = full[1];
  full[1] = total;
  if (begin < 0 || begin + c > total) throw ShapeError("pad_channels out of range");
  return scatter_shared(a, channel_slice_map(full, begin, begin + c), full);
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels of nothing");
  Shape out = parts[0].shape();
  if (out.size() < 2) throw ShapeError("concat_channels expects rank >= 2");
  int total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size()) throw ShapeError("concat_channels rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != 1 && s[d] != out[d]) {
        throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(parts[0].shape()));
      }
    }
    total += s[1];
  }
  out[1] = total;
  Tensor value(out);
  const int n = out[0];
  const std::size_t plane = shape_size(out) / (static_cast<std::size_t>(n) * total);
  std::vector<int> offsets;
  int offset = 0;
  for (const Var& p : parts) {
    const int c = p.shape()[1];
    const double* src = p.value().data();
    for (int i = 0; i < n; ++i) {
      std::copy(src + static_cast<std::size_t>(i) * c * plane, src + static_cast<std::size_t>(i + 1) * c * plane,
                value.data() + (static_cast<std::size_t>(i) * total + offset) * plane);
    }
    offsets.push_back(offset);
    offset += c;
  }
  offsets.push_back(total);
  return Var::make(std::move(value), "concat_channels", std::vector<Var>(parts.begin(), parts.end()),
                   [offsets](const Var& g, std::span<const Var>, const std::vector<bool>& need) {
                     std::vector<Var> out(need.size());
                     for (std::size_t i = 0; i < need.size(); ++i)
                       if (need[i]) out[i] = slice_channels(g, offsets[i], offsets[i + 1]);
                     return out;
                   });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x.value()[i] > 0.0 ? 1.0 : slope;
  return mul_const(x, mask);
}

Var tanh(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::tanh(x.value()[i]);
    d[i] = 1.0 - out[i] * out[i];
  }
  auto deriv = std::make_shared<const Tensor>(std::move(d));
  return Var::make(std::move(out), "tanh", {x}, [deriv](const Var& g, std::span<const Var>, const std::vector<bool>&) {
    return std::vector<Var>{mul_const(g, *deriv)};
  });
}

Var sqrt(const Var& x) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::sqrt(std::max(x.value()[i], 0.0));
    d[i] = out[i] > 0.0 ? 0.5 / out[i] : 0.0;
  }
  auto deriv = std::make_shared<const Tensor>(std::move(d));
  return Var::make(std::move(out), "sqrt", {x}, [deriv](const Var& g, std::span<const Var>, const std::vector<bool>&) {
    return std::vector<Var>{mul_const(g, *deriv)};
  });
}

Var log_floor(const Var& x, double floor) {
  Tensor out(x.shape()), d(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = std::log(std::max(v, floor));
    d[i] = v > floor ? 1.0 / v : 0.0;
  }
  auto deriv = std::make_shared<const Tensor>(std::move(d));
  return Var::make(std::move(out), "log_floor", {x},
                   [deriv](const Var& g, std::span<const Var>, const std::vector<bool>&) {
                     return std::vector<Var>{mul_const(g, *deriv)};
                   });
}

Var softmax_rows(const Var& x) {
  if (x.shape().size() != 2) throw ShapeError("softmax_rows expects rank 2, got " + shape_str(x.shape()));
  const int rows = x.shape()[0], cols = x.shape()[1];
  Tensor out(x.shape());
  for (int r = 0; r < rows; ++r) {
    const double* in = x.value().data() + static_cast<std::size_t>(r) * cols;
    double* o = out.data() + static_cast<std::size_t>(r) * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - mx));
    for (int c = 0; c < cols; ++c) o[c] /= total;
  }
  auto y = std::make_shared<const Tensor>(out);
  return Var::make(std::move(out), "softmax_rows", {x},
                   [y](const Var& g, std::span<const Var>, const std::vector<bool>&) {
                     const Shape& s = y->shape();
                     Var gy = mul_const(g, *y);
                     Var row = broadcast_to(reduce_to(gy, Shape{s[0], 1}), s);
                     return std::vector<Var>{sub(gy, mul_const(row, *y))};
                   });
}

}  // namespace ops
}  // namespace histnet
