#include "covalign/alignment.hpp"

#include <cmath>
#include <limits>

#include "covalign/errors.hpp"

namespace covalign {

namespace {

void require_compatible(const CategoryFeatures& a, const CategoryFeatures& b, const char* op) {
  if (a.f.dim() != 2 || a.f.shape() != b.f.shape()) {
    throw ContractViolation(std::string(op) + ": category features " + shape_str(a.f.shape()) + " vs " +
                            shape_str(b.f.shape()));
  }
  if (a.valid.size() != a.f.size(0) || b.valid.size() != b.f.size(0)) {
    throw ContractViolation(std::string(op) + ": validity flags do not match category count");
  }
}

// Row-wise population variance over the feature dimension.
std::vector<double> row_variance(const Tensor& f) {
  const std::size_t n = f.size(0), c = f.size(1);
  const auto d = f.data();
  std::vector<double> var(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t k = 0; k < c; ++k) mu += d[i * c + k];
    mu /= static_cast<double>(c);
    for (std::size_t k = 0; k < c; ++k) var[i] += (d[i * c + k] - mu) * (d[i * c + k] - mu);
    var[i] /= static_cast<double>(c);
  }
  return var;
}

Tensor center_rows(const Tensor& f) {
  const std::size_t c = f.size(1);
  return sub(f, broadcast_last(scalar_mul(sum_last(f), 1.0 / static_cast<double>(c)), c));
}

// Row standard deviation, floored so the square root stays differentiable.
Tensor row_std(const Tensor& centered, double floor) {
  const std::size_t c = centered.size(1);
  Tensor var = scalar_mul(sum_last(mul(centered, centered)), 1.0 / static_cast<double>(c));
  return sqrt(clamp_min(var, floor * floor));
}

// Euclidean norm of each row; rows that are exactly zero yield an exact 0
// with zero gradient.
Tensor row_norms(const Tensor& diff) {
  Tensor sq = sum_last(mul(diff, diff));
  std::vector<double> pad(sq.numel(), 0.0), keep(sq.numel(), 1.0);
  for (std::size_t i = 0; i < sq.numel(); ++i) {
    if (sq[i] == 0.0) {
      pad[i] = 1.0;
      keep[i] = 0.0;
    }
  }
  const Shape shape = sq.shape();
  return mul(sqrt(add(sq, Tensor::from(shape, pad))), Tensor::from(shape, keep));
}

AlignLoss skipped_loss() { return {Tensor::scalar(0.0), true, 0}; }

}  // namespace

void CRConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("CRConfig: epsilon must lie in (0, 1)");
  if (!(sigma_floor > 0.0)) throw ContractViolation("CRConfig: sigma_floor must be positive");
  if (!(triplet_margin >= 0.0)) throw ContractViolation("CRConfig: triplet margin must be non-negative");
}

double CorrMatrix::mean_diagonal() const {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    if (valid(i, i)) {
      total += at(i, i);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

CorrMatrix pearson_matrix(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg) {
  require_compatible(f1, f2, "pearson_matrix");
  const std::size_t n = f1.f.size(0), c = f1.f.size(1);
  if (c < 2) throw ContractViolation("pearson_matrix: correlation needs at least 2 feature dimensions");

  const Tensor x1 = center_rows(f1.f);
  const Tensor x2 = center_rows(f2.f);
  const Tensor cov = scalar_mul(matmul(x1, transpose(x2)), 1.0 / static_cast<double>(c));
  const Tensor s1 = reshape(row_std(x1, cfg.sigma_floor), {n, 1});
  const Tensor s2 = reshape(row_std(x2, cfg.sigma_floor), {1, n});
  const Tensor denom = clamp_min(matmul(s1, s2), cfg.sigma_floor);

  CorrMatrix out;
  out.values = div(cov, denom);
  const auto v1 = row_variance(f1.f);
  const auto v2 = row_variance(f2.f);
  out.pair_valid.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.pair_valid[i * n + j] =
          f1.valid[i] && f2.valid[j] && v1[i] >= cfg.sigma_floor && v2[j] >= cfg.sigma_floor;
    }
  }
  return out;
}

AlignLoss cr_loss(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg) {
  cfg.validate();
  const CorrMatrix corr = pearson_matrix(f1, f2, cfg);
  const std::size_t n = corr.size();
  std::size_t mutual = 0;
  for (std::size_t i = 0; i < n; ++i) mutual += corr.valid(i, i) ? 1 : 0;
  if (mutual < 2) return skipped_loss();

  std::vector<double> diag(n * n, 0.0), off(n * n, 0.0), pairs(n * n, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      (i == j ? diag : off)[i * n + j] = 1.0;
      if (corr.valid(i, j)) {
        pairs[i * n + j] = 1.0;
        ++count;
      }
    }
  }
  const Shape shape{n, n};
  const Tensor on_diag = clamp_max(clamp_min(corr.values, cfg.epsilon), 1.0);
  const Tensor off_diag = clamp_min(scalar_mul(add_scalar(corr.values, -1.0), -1.0), cfg.epsilon);
  const Tensor a = add(mul(on_diag, Tensor::from(shape, diag)), mul(off_diag, Tensor::from(shape, off)));
  const Tensor total = sum(mul(log(a), Tensor::from(shape, pairs)));
  return {scalar_mul(total, -1.0 / static_cast<double>(count)), false, count};
}

AlignLoss icr_loss(const CategoryFeatures& group1, const CategoryFeatures& group2, const CRConfig& cfg) {
  return cr_loss(group1, group2, cfg);
}

AlignLoss ccr_loss(const CategoryFeatures& source, const CategoryFeatures& target, const CRConfig& cfg) {
  return cr_loss(source.detached(), target, cfg);
}

AlignLoss mse_align_loss(const CategoryFeatures& f1, const CategoryFeatures& f2) {
  require_compatible(f1, f2, "mse_align_loss");
  const std::size_t n = f1.f.size(0);
  std::vector<double> mask(n, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (f1.valid[i] && f2.valid[i]) {
      mask[i] = 1.0;
      ++count;
    }
  }
  if (count == 0) return skipped_loss();
  const Tensor d = row_norms(sub(f1.f, f2.f));
  const Tensor total = sum(mul(d, Tensor::from({n}, mask)));
  return {scalar_mul(total, 1.0 / static_cast<double>(count)), false, count};
}

AlignLoss triplet_align_loss(const CategoryFeatures& f1, const CategoryFeatures& f2, const CRConfig& cfg) {
  cfg.validate();
  require_compatible(f1, f2, "triplet_align_loss");
  const std::size_t n = f1.f.size(0);
  std::size_t mutual = 0;
  for (std::size_t i = 0; i < n; ++i) mutual += (f1.valid[i] && f2.valid[i]) ? 1 : 0;
  if (mutual < 2) return skipped_loss();

  // All N^2 distances d(f1[i], f2[j]), flattened row-major.
  std::vector<std::size_t> rows1, rows2, intra;
  std::vector<double> mask;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      rows1.push_back(i);
      rows2.push_back(j);
      intra.push_back(i * n + i);
      const bool use = i != j && f1.valid[i] && f2.valid[i] && f2.valid[j];
      mask.push_back(use ? 1.0 : 0.0);
      count += use ? 1 : 0;
    }
  }
  const Tensor dist = row_norms(sub(select_rows(f1.f, rows1), select_rows(f2.f, rows2)));  // [N^2]
  const Tensor intra_dist = reshape(select_rows(reshape(dist, {n * n, 1}), intra), {n * n});
  const Tensor hinge = relu(add_scalar(sub(intra_dist, dist), cfg.triplet_margin));
  const Tensor total = sum(mul(hinge, Tensor::from({n * n}, mask)));
  return {scalar_mul(total, 1.0 / static_cast<double>(n * n)), false, count};
}

}  // namespace covalign
