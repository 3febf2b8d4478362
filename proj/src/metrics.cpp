#include "covalign/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "covalign/errors.hpp"
#include "covalign/synthdata.hpp"

namespace covalign {

namespace fs = std::filesystem;

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ContractViolation("ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
  if (truth.size() != pred.size()) throw ContractViolation("ConfusionMatrix::add: size mismatch");
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (truth[k] == kIgnoreLabel) continue;
    if (truth[k] >= n_ || pred[k] >= n_) throw ContractViolation("ConfusionMatrix::add: label out of range");
    ++counts_[truth[k] * n_ + pred[k]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ContractViolation("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouResult iou(const ConfusionMatrix& conf) {
  const std::size_t n = conf.num_classes();
  IouResult out;
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      fp += conf.at(j, i);
      fn += conf.at(i, j);
    }
    const std::uint64_t tp = conf.at(i, i);
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) {
      out.per_class.emplace_back();
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(denom);
    out.per_class.emplace_back(v);
    total += v;
    ++defined;
  }
  out.miou = defined ? total / static_cast<double>(defined) : 0.0;
  return out;
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::ofstream open_for_write(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << *v * 100.0;
  return os.str();
}

}  // namespace

void write_corr_csv(const CorrMatrix& corr, const std::vector<std::string>& labels, const fs::path& path,
                    const std::string& config_hash) {
  const std::size_t n = corr.size();
  if (labels.size() != n) throw ContractViolation("write_corr_csv: need one label per category");
  auto out = open_for_write(path);
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << '\n';
  for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << labels[j];
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out << ',';
      if (corr.valid(i, j)) out << fmt17(corr.at(i, j));
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

CorrTable read_corr_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CorrTable table;
  std::string line;
  bool header = true;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '#') continue;
    auto cells = split_csv_line(line);
    if (header) {
      table.labels = std::move(cells);
      header = false;
      continue;
    }
    if (cells.size() != table.labels.size()) throw DataError(path.string() + ": ragged row " + std::to_string(rows));
    for (const auto& c : cells) {
      if (c.empty()) {
        table.values.emplace_back();
      } else {
        try {
          table.values.emplace_back(std::stod(c));
        } catch (const std::exception&) {
          throw DataError(path.string() + ": bad number '" + c + "'");
        }
      }
    }
    ++rows;
  }
  if (header || rows != table.labels.size()) throw DataError(path.string() + ": expected a square table");
  return table;
}

Projection feature_projection_2d(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) {
  if (features.size() < 2) throw ContractViolation("feature_projection_2d: need at least 2 vectors");
  if (labels.size() != features.size()) throw ContractViolation("feature_projection_2d: one label per vector");
  const std::size_t m = features.size(), c = features.front().size();
  if (c < 2) throw ContractViolation("feature_projection_2d: need at least 2 dimensions");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c));
  for (std::size_t i = 0; i < m; ++i) {
    if (features[i].size() != c) throw ContractViolation("feature_projection_2d: ragged input");
    for (std::size_t j = 0; j < c; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = features[i][j];
  }
  x.rowwise() -= x.colwise().mean();

  Projection out;
  if (x.cwiseAbs().maxCoeff() == 0.0) {
    out.degenerate = true;
    for (std::size_t i = 0; i < m; ++i) out.points.push_back({0.0, 0.0, labels[i]});
    out.components.assign(2, std::vector<double>(c, 0.0));
    return out;
  }

  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto last = static_cast<Eigen::Index>(c) - 1;
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(c), 2);
  basis.col(0) = eig.eigenvectors().col(last);
  basis.col(1) = eig.eigenvectors().col(last - 1);
  for (Eigen::Index k = 0; k < 2; ++k) {
    Eigen::Index arg = 0;
    basis.col(k).cwiseAbs().maxCoeff(&arg);
    if (basis(arg, k) < 0.0) basis.col(k) *= -1.0;
  }
  const Eigen::MatrixXd proj = x * basis;
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out.points.push_back({proj(r, 0), proj(r, 1), labels[i]});
  }
  for (Eigen::Index k = 0; k < 2; ++k) {
    out.components.emplace_back(basis.col(k).data(), basis.col(k).data() + c);
  }
  return out;
}

std::string results_table_text(const std::vector<ResultRow>& rows, const std::vector<std::string>& class_names) {
  std::size_t method_w = 6;
  for (const auto& r : rows) method_w = std::max(method_w, r.method.size());
  std::vector<std::size_t> widths;
  for (const auto& name : class_names) widths.push_back(std::max<std::size_t>(name.size(), 6));
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(method_w)) << "Method";
  for (std::size_t c = 0; c < class_names.size(); ++c) os << "  " << std::right << std::setw(static_cast<int>(widths[c])) << class_names[c];
  os << "  " << std::setw(6) << "mIoU" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(method_w)) << r.method;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      const auto v = c < r.result.per_class.size() ? r.result.per_class[c] : std::nullopt;
      os << "  " << std::right << std::setw(static_cast<int>(widths[c])) << pct(v);
    }
    os << "  " << std::setw(6) << pct(r.result.miou) << '\n';
  }
  return os.str();
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::vector<std::string>& class_names,
                       const fs::path& path, const std::string& config_hash) {
  auto out = open_for_write(path);
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << '\n';
  out << "method";
  for (const auto& name : class_names) out << ',' << name;
  out << ",mIoU\n";
  for (const auto& r : rows) {
    out << r.method;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      out << ',';
      if (c < r.result.per_class.size() && r.result.per_class[c]) out << fmt17(*r.result.per_class[c]);
    }
    out << ',' << fmt17(r.result.miou) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace covalign
