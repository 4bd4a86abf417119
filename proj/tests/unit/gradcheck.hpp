#pragma once

// Central-difference oracle used by the gradient tests. It only ever
// evaluates the forward function, so it stays independent of the backward
// rules it checks.

#include <algorithm>
#include <cmath>
#include <functional>

#include "histnet/tensor.hpp"

namespace histnet::testing {

inline double numeric_partial(const std::function<double()>& f, double& slot, double h = 1e-6) {
  const double saved = slot;
  slot = saved + h;
  const double up = f();
  slot = saved - h;
  const double down = f();
  slot = saved;
  return (up - down) / (2.0 * h);
}

inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = numeric_partial(f, x[i], h);
  return g;
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  return worst;
}

}  // namespace histnet::testing
