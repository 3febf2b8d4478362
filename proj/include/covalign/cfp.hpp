#pragma once

#include <vector>

#include "covalign/tensor.hpp"

namespace covalign {

/// Per-category centroids pooled from one batch.
struct CategoryFeatures {
  Tensor f;                        // [N x C]
  std::vector<double> mask_mass;   // sum over pixels of the soft assignment, per category
  std::vector<bool> valid;         // mask_mass[i] >= mass_threshold
  std::size_t pixels = 0;          // pooled pixel count (h * w summed over the batch)

  std::size_t num_categories() const { return mask_mass.size(); }
  std::size_t num_valid() const;
  /// Same values, cut from the tape.
  CategoryFeatures detached() const;
};

struct PoolOptions {
  /// Divide each centroid by its mask mass instead of the pixel count.
  bool normalize_by_mass = false;
  /// Validity threshold as a fraction of the pooled pixel count.
  double mass_fraction = 1e-3;
};

/// f[i, c] = (1 / P) * sum_k Y'[i, k] * features[c, k] over the P pixels of
/// every image in the batch. features[b] is [C x h x w]; coarse_output[b] is
/// the softmax field [N x h x w] at the same resolution.
CategoryFeatures pool(const std::vector<Tensor>& features, const std::vector<Tensor>& coarse_output,
                      const PoolOptions& options = {});

CategoryFeatures pool(const Tensor& features, const Tensor& coarse_output, const PoolOptions& options = {});

}  // namespace covalign
