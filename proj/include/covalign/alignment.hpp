#pragma once

// Category-feature alignment losses.
//
// Covariance regularization (CR) compares two category-feature sets through
// their N x N Pearson correlation matrix, taken row-wise over the C feature
// dimensions. Minimizing cr_loss pushes same-category correlations to 1 and
// cross-category correlations to or below 0; the sign boundary at zero is the
// decision threshold, so no margin is involved. The MSE and triplet losses are
// the Euclidean-distance baselines.
//
// CorrMatrix CSV layout (written by metrics::write_corr_csv): an optional
// "# key=value" comment line, then a header of N category labels, then N rows
// of N cells. Row i, column j holds Corr(f1[i], f2[j]) printed with 17
// significant digits; pairs that are not valid are empty cells.

#include <vector>

#include "covalign/cfp.hpp"
#include "covalign/tensor.hpp"

namespace covalign {

struct CRConfig {
  double epsilon = 1e-6;
  double sigma_floor = 1e-8;
  double triplet_margin = 0.5;

  void validate() const;
};

struct CorrMatrix {
  Tensor values;                 // [N x N]
  std::vector<bool> pair_valid;  // row-major N x N

  std::size_t size() const { return values.size(0); }
  bool valid(std::size_t i, std::size_t j) const { return pair_valid[i * size() + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * size() + j]; }
  /// Mean of valid diagonal entries; NaN when none is valid.
  double mean_diagonal() const;
};

/// A loss value plus bookkeeping. A skipped loss is an exact constant 0.
struct AlignLoss {
  Tensor value;
  bool skipped = false;
  std::size_t terms = 0;  // number of pairs (or categories) averaged
};

/// Pearson correlation between rows f1[i] and f2[j]; the denominator is
/// max(sigma_i * sigma_j, sigma_floor). Requires C >= 2.
CorrMatrix pearson_matrix(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg = {});

/// -mean over valid pairs of log A_ij, with A_ii = clamp(Corr_ii, eps, 1) and
/// A_ij = max(1 - Corr_ij, eps) off the diagonal. Skipped (exact 0) when
/// fewer than two categories are valid on both sides.
AlignLoss cr_loss(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg = {});

/// Intra-domain CR between two source groups. The caller pools both groups
/// from stop-gradient coarse outputs, so only encoder features are trained.
AlignLoss icr_loss(const CategoryFeatures& group1, const CategoryFeatures& group2, const CRConfig& cfg = {});

/// Cross-domain CR. The source side is detached here; the caller pools the
/// target side from stop-gradient coarse outputs.
AlignLoss ccr_loss(const CategoryFeatures& source, const CategoryFeatures& target, const CRConfig& cfg = {});

/// Mean over categories valid on both sides of ||f1[i] - f2[i]||.
AlignLoss mse_align_loss(const CategoryFeatures& f1, const CategoryFeatures& f2);

/// (1 / N^2) * sum_i sum_{j != i} max(d(f1[i], f2[i]) - d(f1[i], f2[j]) + margin, 0)
/// over valid pairs, d Euclidean.
AlignLoss triplet_align_loss(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg = {});

}  // namespace covalign
