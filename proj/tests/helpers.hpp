#pragma once

#include <cmath>
#include <vector>

#include "rise/rng.hpp"
#include "rise/tensor.hpp"

namespace testutil {

inline rise::Tensor randn(rise::Shape shape, rise::Rng& rng, double scale = 1.0) {
  rise::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline rise::Tensor uniform(rise::Shape shape, rise::Rng& rng, double lo, double hi) {
  rise::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const rise::Tensor& a, const rise::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
