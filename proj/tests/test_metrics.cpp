#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <Eigen/Dense>

#include "doctest.h"

#include "covalign/metrics.hpp"
#include "covalign/rng.hpp"
#include "covalign/synthdata.hpp"

using namespace covalign;
namespace fs = std::filesystem;

namespace {

// IoU from explicit pixel index sets.
std::vector<std::optional<double>> iou_oracle(const std::vector<std::uint8_t>& gt, const std::vector<std::uint8_t>& pred,
                                              std::size_t n) {
  std::vector<std::optional<double>> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::set<std::size_t> g, p;
    for (std::size_t k = 0; k < gt.size(); ++k) {
      if (gt[k] == kIgnoreLabel) continue;
      if (gt[k] == c) g.insert(k);
      if (pred[k] == c) p.insert(k);
    }
    std::size_t inter = 0;
    for (auto k : g) inter += p.count(k);
    const std::size_t uni = g.size() + p.size() - inter;
    if (uni) out[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

CorrMatrix corr_from(std::size_t n, std::vector<double> v, std::vector<bool> valid) {
  return CorrMatrix{Tensor::from({n, n}, std::move(v)), std::move(valid)};
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("perfect prediction") {
  ConfusionMatrix m(3);
  const std::vector<std::uint8_t> y{0, 1, 2, 2, 1, 0};
  m.add(y, y);
  const IouResult r = iou(m);
  CHECK(r.miou == 1.0);
  for (const auto& v : r.per_class) CHECK(*v == 1.0);
}

TEST_CASE("constant prediction on a half-and-half image") {
  ConfusionMatrix m(2);
  m.add(std::vector<std::uint8_t>{0, 0, 1, 1}, std::vector<std::uint8_t>{0, 0, 0, 0});
  const IouResult r = iou(m);
  CHECK(*r.per_class[0] == 0.5);
  CHECK(*r.per_class[1] == 0.0);
  CHECK(r.miou == 0.25);
}

TEST_CASE("random pairs match the set-counting oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + seed % 5;
    std::vector<std::uint8_t> gt(300), pred(300);
    for (std::size_t k = 0; k < 300; ++k) {
      gt[k] = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(n));
      pred[k] = static_cast<std::uint8_t>(rng.below(n));
    }
    ConfusionMatrix m(n);
    m.add(gt, pred);
    const IouResult r = iou(m);
    const auto ref = iou_oracle(gt, pred, n);
    double mean = 0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < n; ++c) {
      REQUIRE(r.per_class[c].has_value() == ref[c].has_value());
      if (ref[c]) {
        CHECK(std::abs(*r.per_class[c] - *ref[c]) < 1e-12);
        mean += *ref[c];
        ++defined;
      }
    }
    CHECK(std::abs(r.miou - mean / static_cast<double>(defined)) < 1e-12);
    std::size_t kept = 0;
    for (auto g : gt) kept += g != kIgnoreLabel;
    CHECK(m.total() == kept);
  }
}

TEST_CASE("absent classes are undefined and excluded") {
  ConfusionMatrix m(3);
  m.add(std::vector<std::uint8_t>{0, 0, 1}, std::vector<std::uint8_t>{0, 0, 1});
  const IouResult r = iou(m);
  CHECK_FALSE(r.per_class[2].has_value());
  CHECK(r.miou == 1.0);
}

TEST_CASE("streaming accumulation equals batch accumulation") {
  Rng rng(5);
  std::vector<std::uint8_t> gt(200), pred(200);
  for (std::size_t k = 0; k < 200; ++k) gt[k] = static_cast<std::uint8_t>(rng.below(4)), pred[k] = static_cast<std::uint8_t>(rng.below(4));
  ConfusionMatrix whole(4), a(4), b(4);
  whole.add(gt, pred);
  a.add(std::span(gt).first(70), std::span(pred).first(70));
  b.add(std::span(gt).subspan(70), std::span(pred).subspan(70));
  b.merge(a);
  CHECK(b == whole);
}

TEST_CASE("mIoU is invariant under consistent relabeling") {
  Rng rng(6);
  std::vector<std::uint8_t> gt(200), pred(200);
  for (std::size_t k = 0; k < 200; ++k) gt[k] = static_cast<std::uint8_t>(rng.below(4)), pred[k] = static_cast<std::uint8_t>(rng.below(4));
  const std::vector<std::uint8_t> perm{2, 3, 1, 0};
  auto relabel = [&](std::vector<std::uint8_t> v) {
    for (auto& x : v) x = perm[x];
    return v;
  };
  ConfusionMatrix a(4), b(4);
  a.add(gt, pred);
  b.add(relabel(gt), relabel(pred));
  CHECK(std::abs(iou(a).miou - iou(b).miou) < 1e-15);
  for (std::size_t c = 0; c < 4; ++c) CHECK(*iou(a).per_class[c] == *iou(b).per_class[perm[c]]);
}

TEST_CASE("correlation CSV round trip with empty cells") {
  const fs::path path = fs::temp_directory_path() / "covalign_corr_test.csv";
  Rng rng(7);
  std::vector<double> v(9);
  for (auto& x : v) x = rng.uniform(-1, 1);
  v[0] = 1.0;
  const CorrMatrix c = corr_from(3, v, {true, true, true, true, false, true, true, true, true});
  write_corr_csv(c, {"a", "b", "c"}, path, "feedbeef");
  std::ifstream in(path);
  std::string first, header, row0, row1;
  std::getline(in, first);
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  CHECK(first == "# config_hash=feedbeef");
  CHECK(header == "a,b,c");
  CHECK(row0.substr(0, 2) == "1,");
  CHECK(row1.find(",,") != std::string::npos);
  const CorrTable t = read_corr_csv(path);
  CHECK(t.labels == std::vector<std::string>{"a", "b", "c"});
  for (std::size_t k = 0; k < 9; ++k) {
    if (k == 4) {
      CHECK_FALSE(t.values[k].has_value());
    } else {
      REQUIRE(t.values[k].has_value());
      CHECK(*t.values[k] == v[k]);
    }
  }
  fs::remove(path);
}

TEST_CASE("projection: antipodal points") {
  const Projection p = feature_projection_2d({{1, 2, 3}, {-1, -2, -3}}, {0, 1});
  REQUIRE(p.points.size() == 2);
  CHECK(p.points[0].x == doctest::Approx(-p.points[1].x));
  CHECK(std::abs(p.points[0].x) == doctest::Approx(std::sqrt(14.0)));
  CHECK(std::abs(p.points[0].y) < 1e-12);
  CHECK(p.points[1].label == 1);
}

TEST_CASE("projection: axis-aligned 2-D data is a signed permutation") {
  const std::vector<std::vector<double>> pts{{3, 0.5}, {-3, -0.5}, {-3, 0.5}, {3, -0.5}};
  const Projection p = feature_projection_2d(pts, {0, 0, 1, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(std::abs(p.points[i].x) - 3.0) < 1e-12);
    CHECK(std::abs(std::abs(p.points[i].y) - 0.5) < 1e-12);
  }
  CHECK(p.components[0][0] > 0);
  CHECK(p.components[1][1] > 0);
}

TEST_CASE("projection reconstruction error matches an eigendecomposition") {
  Rng rng(8);
  std::vector<std::vector<double>> pts(10, std::vector<double>(8));
  for (auto& r : pts)
    for (auto& x : r) x = rng.normal();
  const Projection p = feature_projection_2d(pts, std::vector<int>(10, 0));
  Eigen::MatrixXd X(10, 8);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 8; ++j) X(i, j) = pts[i][j];
  X.rowwise() -= X.colwise().mean();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
  const double expected = es.eigenvalues().head(6).sum();  // discarded variance
  double err = 0;
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 8; ++j) {
      const double rec = p.points[i].x * p.components[0][j] + p.points[i].y * p.components[1][j];
      err += std::pow(X(i, j) - rec, 2);
    }
  }
  CHECK(std::abs(err - expected) < 1e-9);
}

TEST_CASE("projection of identical inputs is flagged") {
  const Projection p = feature_projection_2d({{1, 1}, {1, 1}, {1, 1}}, {0, 1, 2});
  CHECK(p.degenerate);
  for (const auto& pt : p.points) CHECK((pt.x == 0.0 && pt.y == 0.0));
}

TEST_CASE("results table layout") {
  IouResult r;
  r.per_class = {0.5, std::nullopt, 0.25};
  r.miou = 0.375;
  const std::string text = results_table_text({{"dca", r}}, {"a", "b", "c"});
  CHECK(text.find("mIoU") != std::string::npos);
  CHECK(text.find("37.50") != std::string::npos);
  const fs::path path = fs::temp_directory_path() / "covalign_results_test.csv";
  write_results_csv({{"dca", r}}, {"a", "b", "c"}, path, "abc");
  std::ifstream in(path);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(l1 == "# config_hash=abc");
  CHECK(l2 == "method,a,b,c,mIoU");
  CHECK(l3.rfind("dca,", 0) == 0);
  fs::remove(path);
}

}  // TEST_SUITE
