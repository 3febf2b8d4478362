#include "covalign/cfp.hpp"

#include <cmath>

#include "covalign/errors.hpp"

namespace covalign {

std::size_t CategoryFeatures::num_valid() const {
  std::size_t n = 0;
  for (bool v : valid) n += v ? 1 : 0;
  return n;
}

CategoryFeatures CategoryFeatures::detached() const {
  CategoryFeatures out = *this;
  out.f = stop_grad(f);
  return out;
}

CategoryFeatures pool(const std::vector<Tensor>& features, const std::vector<Tensor>& coarse_output,
                      const PoolOptions& options) {
  if (features.empty() || features.size() != coarse_output.size()) {
    throw ContractViolation("pool: need matching, non-empty feature and output lists");
  }
  const std::size_t channels = features.front().dim() == 3 ? features.front().size(0) : 0;
  const std::size_t categories = coarse_output.front().dim() == 3 ? coarse_output.front().size(0) : 0;

  std::vector<Tensor> feat_cols;
  std::vector<Tensor> prob_cols;
  std::vector<double> mass(categories, 0.0);
  std::size_t pixels = 0;
  for (std::size_t b = 0; b < features.size(); ++b) {
    const Tensor& x = features[b];
    const Tensor& y = coarse_output[b];
    if (x.dim() != 3 || y.dim() != 3 || x.size(0) != channels || y.size(0) != categories ||
        x.size(1) != y.size(1) || x.size(2) != y.size(2)) {
      throw ContractViolation("pool: features " + shape_str(x.shape()) + " and coarse output " +
                              shape_str(y.shape()) + " do not match");
    }
    const std::size_t plane = x.size(1) * x.size(2);
    const auto p = y.data();
    for (std::size_t k = 0; k < plane; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < categories; ++i) {
        s += p[i * plane + k];
        mass[i] += p[i * plane + k];
      }
      if (std::abs(s - 1.0) > 1e-6) throw ContractViolation("pool: coarse output is not a probability field");
    }
    feat_cols.push_back(reshape(x, {channels, plane}));
    prob_cols.push_back(reshape(y, {categories, plane}));
    pixels += plane;
  }

  const Tensor feats = feat_cols.size() == 1 ? feat_cols.front() : concat_cols(feat_cols);
  const Tensor probs = prob_cols.size() == 1 ? prob_cols.front() : concat_cols(prob_cols);
  Tensor weighted = matmul(probs, transpose(feats));  // [N x C]

  CategoryFeatures out;
  out.pixels = pixels;
  out.mask_mass = mass;
  const double threshold = options.mass_fraction * static_cast<double>(pixels);
  for (double m : mass) out.valid.push_back(m >= threshold);

  if (options.normalize_by_mass) {
    // Differentiable mass so that gradients w.r.t. the output stay exact.
    Tensor denom = clamp_min(sum_last(probs), 1e-12);
    out.f = div(weighted, broadcast_last(denom, channels));
  } else {
    out.f = scalar_mul(weighted, 1.0 / static_cast<double>(pixels));
  }
  return out;
}

CategoryFeatures pool(const Tensor& features, const Tensor& coarse_output, const PoolOptions& options) {
  return pool(std::vector<Tensor>{features}, std::vector<Tensor>{coarse_output}, options);
}

}  // namespace covalign
