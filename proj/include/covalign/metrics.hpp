#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covalign/alignment.hpp"

namespace covalign {

/// counts[gt * N + pred]; pixels whose ground truth is the ignore label are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  std::size_t num_classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * n_ + pred]; }
  std::uint64_t total() const;

  void add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred);
  void merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<std::optional<double>> per_class;  // nullopt when TP + FP + FN == 0
  double miou = 0.0;                             // mean over defined classes
};

IouResult iou(const ConfusionMatrix& conf);

/// Writes a CorrMatrix with 17 significant digits; invalid pairs are empty cells.
void write_corr_csv(const CorrMatrix& corr, const std::vector<std::string>& labels,
                    const std::filesystem::path& path, const std::string& config_hash = "");

struct CorrTable {
  std::vector<std::string> labels;
  std::vector<std::optional<double>> values;  // row-major N x N
};
CorrTable read_corr_csv(const std::filesystem::path& path);

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  int label = 0;
};

struct Projection {
  std::vector<ProjectedPoint> points;
  std::vector<std::vector<double>> components;  // two unit loading vectors of length C
  bool degenerate = false;                      // all inputs identical
};

/// Projects centered vectors onto their top two principal components. Each
/// component's largest-magnitude loading is made positive.
Projection feature_projection_2d(const std::vector<std::vector<double>>& features, const std::vector<int>& labels);

struct ResultRow {
  std::string method;
  IouResult result;
};

/// Per-class IoU columns (percent) then mIoU, one row per method.
std::string results_table_text(const std::vector<ResultRow>& rows, const std::vector<std::string>& class_names);
void write_results_csv(const std::vector<ResultRow>& rows, const std::vector<std::string>& class_names,
                       const std::filesystem::path& path, const std::string& config_hash = "");

}  // namespace covalign
