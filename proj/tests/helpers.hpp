#pragma once

#include <cmath>
#include <vector>

#include "covalign/rng.hpp"
#include "covalign/tensor.hpp"

namespace covalign::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Random softmax field [N x h x w].
inline Tensor random_probs(std::size_t n, std::size_t h, std::size_t w, Rng& rng, double spread = 2.0) {
  std::vector<double> v(n * h * w);
  for (std::size_t k = 0; k < h * w; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i * h * w + k] = std::exp(rng.uniform(-spread, spread));
      total += v[i * h * w + k];
    }
    for (std::size_t i = 0; i < n; ++i) v[i * h * w + k] /= total;
  }
  return Tensor::from({n, h, w}, std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace covalign::testing
