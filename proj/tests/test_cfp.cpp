#include "doctest.h"
#include "helpers.hpp"

#include "covalign/cfp.hpp"
#include "covalign/errors.hpp"

using namespace covalign;
using covalign::testing::max_abs_diff;
using covalign::testing::random_probs;
using covalign::testing::random_tensor;

namespace {

// Per-pixel accumulation over a batch.
std::vector<double> pool_oracle(const std::vector<Tensor>& feats, const std::vector<Tensor>& probs) {
  const std::size_t c = feats[0].size(0), n = probs[0].size(0);
  std::vector<double> f(n * c, 0.0);
  std::size_t pixels = 0;
  for (std::size_t b = 0; b < feats.size(); ++b) {
    const std::size_t hw = feats[b].size(1) * feats[b].size(2);
    pixels += hw;
    for (std::size_t k = 0; k < hw; ++k)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) f[i * c + ch] += probs[b][i * hw + k] * feats[b][ch * hw + k];
  }
  for (auto& v : f) v /= static_cast<double>(pixels);
  return f;
}

}  // namespace

TEST_SUITE("cfp") {

TEST_CASE("one-hot mask on category 0 gives the spatial mean") {
  Rng rng(1);
  const Tensor feats = random_tensor({3, 4, 4}, rng);
  std::vector<double> y(2 * 16, 0.0);
  for (std::size_t k = 0; k < 16; ++k) y[k] = 1.0;
  const CategoryFeatures cf = pool(feats, Tensor::from({2, 4, 4}, y));
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0.0;
    for (std::size_t k = 0; k < 16; ++k) m += feats[ch * 16 + k] / 16.0;
    CHECK(cf.f[ch] == doctest::Approx(m).epsilon(1e-14));
    CHECK(cf.f[3 + ch] == 0.0);
  }
  CHECK(cf.valid[0]);
  CHECK_FALSE(cf.valid[1]);
  CHECK(cf.mask_mass[0] == 16.0);
}

TEST_CASE("uniform mask gives mean over N") {
  Rng rng(2);
  const Tensor feats = random_tensor({2, 3, 3}, rng);
  const CategoryFeatures cf = pool(feats, Tensor::full({4, 3, 3}, 0.25));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t ch = 0; ch < 2; ++ch) {
      double m = 0.0;
      for (std::size_t k = 0; k < 9; ++k) m += feats[ch * 9 + k] / 9.0;
      CHECK(cf.f[i * 2 + ch] == doctest::Approx(m / 4.0).epsilon(1e-14));
    }
}

TEST_CASE("random instances match the accumulation oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(10 + seed);
    std::vector<Tensor> feats, probs;
    const std::size_t batch = 1 + seed % 3;
    for (std::size_t b = 0; b < batch; ++b) {
      feats.push_back(random_tensor({2, 2, 2}, rng));
      probs.push_back(random_probs(2, 2, 2, rng));
    }
    const CategoryFeatures cf = pool(feats, probs);
    CHECK(max_abs_diff(cf.f.data(), pool_oracle(feats, probs)) < 1e-12);
    CHECK(cf.pixels == 4 * batch);
  }
}

TEST_CASE("mask mass sums to the pixel count and sets validity") {
  Rng rng(3);
  const Tensor p = random_probs(5, 6, 6, rng, 6.0);
  const CategoryFeatures cf = pool(random_tensor({4, 6, 6}, rng), p);
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(cf.mask_mass[i] >= 0.0);
    total += cf.mask_mass[i];
    CHECK(cf.valid[i] == (cf.mask_mass[i] >= 1e-3 * 36));
  }
  CHECK(total == doctest::Approx(36.0).epsilon(1e-12));
}

TEST_CASE("linear in features") {
  Rng rng(4);
  const Tensor a = random_tensor({3, 4, 4}, rng), b = random_tensor({3, 4, 4}, rng);
  const Tensor y = random_probs(3, 4, 4, rng);
  const double s = 1.7, t = -0.4;
  const Tensor lhs = pool(add(scalar_mul(a, s), scalar_mul(b, t)), y).f;
  const Tensor rhs = add(scalar_mul(pool(a, y).f, s), scalar_mul(pool(b, y).f, t));
  CHECK(max_abs_diff(lhs.data(), rhs.data()) < 1e-12);
}

TEST_CASE("permuting categories permutes rows") {
  Rng rng(5);
  const Tensor feats = random_tensor({2, 3, 3}, rng);
  const Tensor y = random_probs(3, 3, 3, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  std::vector<double> yp(y.numel());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 9; ++k) yp[i * 9 + k] = y[perm[i] * 9 + k];
  const Tensor f = pool(feats, y).f, fp = pool(feats, Tensor::from({3, 3, 3}, yp)).f;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t ch = 0; ch < 2; ++ch) CHECK(fp[i * 2 + ch] == f[perm[i] * 2 + ch]);
}

TEST_CASE("gradients w.r.t. features and coarse output") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(40 + seed);
    const Tensor feats = random_tensor({3, 3, 3}, rng);
    const Tensor logits = random_tensor({2, 3, 3}, rng);
    const Tensor w = random_tensor({2, 3}, rng);
    auto scalar = [&](const CategoryFeatures& cf) { return sum(mul(mul(cf.f, cf.f), w)); };
    CHECK(grad_check([&](const Tensor& x) { return scalar(pool(x, softmax_channel(logits))); }, feats) < 1e-4);
    CHECK(grad_check([&](const Tensor& l) { return scalar(pool(feats, softmax_channel(l))); }, logits) < 1e-4);
  }
}

TEST_CASE("mass-normalized mode divides by the soft mass") {
  Rng rng(6);
  const Tensor feats = random_tensor({2, 3, 3}, rng);
  const Tensor y = random_probs(2, 3, 3, rng);
  PoolOptions opt;
  opt.normalize_by_mass = true;
  const CategoryFeatures a = pool(feats, y), b = pool(feats, y, opt);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t ch = 0; ch < 2; ++ch) CHECK(b.f[i * 2 + ch] == doctest::Approx(a.f[i * 2 + ch] * 9.0 / a.mask_mass[i]).epsilon(1e-13));
}

TEST_CASE("contract violations") {
  Rng rng(7);
  const Tensor feats = random_tensor({2, 3, 3}, rng);
  CHECK_THROWS_AS(pool(feats, Tensor::full({2, 3, 3}, 0.6)), ContractViolation);
  CHECK_THROWS_AS(pool(feats, random_probs(2, 2, 3, rng)), ContractViolation);
}

TEST_CASE("detached copies carry no history") {
  Rng rng(8);
  Tensor feats = random_tensor({2, 3, 3}, rng, -1, 1, true);
  const CategoryFeatures cf = pool(feats, random_probs(2, 3, 3, rng));
  CHECK(cf.f.requires_grad());
  const CategoryFeatures d = cf.detached();
  CHECK_FALSE(d.f.requires_grad());
  CHECK(max_abs_diff(d.f.data(), cf.f.data()) == 0.0);
  CHECK(d.valid == cf.valid);
}

}  // TEST_SUITE
