#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"

#include "covalign/errors.hpp"
#include "covalign/segmodel.hpp"

using namespace covalign;
using covalign::testing::random_tensor;

TEST_SUITE("segmodel") {

TEST_CASE("default encoder shape arithmetic") {
  const SegModel m(ModelConfig{}, 0);
  Rng rng(1);
  const Tensor f = m.encode(random_tensor({3, 64, 64}, rng));
  CHECK(f.shape() == Shape{32, 16, 16});
  CHECK_THROWS_AS(m.encode(random_tensor({3, 62, 64}, rng)), ContractViolation);
}

TEST_CASE("classifier output shapes and the zero-initialized head") {
  ModelConfig cfg;
  cfg.num_classes = 7;
  const SegModel m(cfg, 2);
  Rng rng(2);
  const Tensor f = random_tensor({32, 16, 16}, rng, 0, 1);
  const Tensor logits = m.classify(f, 64, 64);
  CHECK(logits.shape() == Shape{7, 64, 64});
  const Tensor p = softmax_channel(logits);
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
}

TEST_CASE("zero input gives a finite forward pass") {
  const SegModel m(ModelConfig{}, 3);
  const SegForward fw = m.forward(Tensor::zeros({3, 64, 64}));
  for (double v : fw.features.data()) CHECK(std::isfinite(v));
  for (double v : fw.logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("parameter count depends only on the config") {
  const ModelConfig cfg;
  CHECK(SegModel(cfg, 1).parameter_count() == SegModel(cfg, 99).parameter_count());
  // 3x3 convs 3->16, 16->32, 32->32 and a 1x1 32->5 head, bias-free.
  CHECK(SegModel(cfg, 1).parameter_count() == 16 * 3 * 9 + 32 * 16 * 9 + 32 * 32 * 9 + 5 * 32);
}

TEST_CASE("receptive field: one input pixel moves only nearby features") {
  const SegModel m(ModelConfig{}, 4);
  Rng rng(4);
  Tensor x = random_tensor({3, 32, 32}, rng, 0, 1);
  const Tensor before = m.encode(x);
  Tensor y = x.clone();
  y.mutable_data()[(0 * 32 + 16) * 32 + 16] += 0.5;
  const Tensor after = m.encode(y);
  // Receptive field of three 3x3 convs with strides 2, 2, 1 spans 15 input
  // pixels; at the 8x8 output the affected cells lie within +-2 of (4, 4).
  const std::size_t c = before.size(0), h = before.size(1), w = before.size(2);
  bool changed_near = false;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q) {
        const double d = std::abs(after[(ch * h + r) * w + q] - before[(ch * h + r) * w + q]);
        const bool near = r + 2 >= 4 && r <= 6 && q + 2 >= 4 && q <= 6;
        if (!near) CHECK(d == 0.0);
        if (near && d > 0) changed_near = true;
      }
  CHECK(changed_near);
}

TEST_CASE("classifier and encoder gradients match finite differences") {
  ModelConfig cfg;
  cfg.widths = {4, 6, 5};
  cfg.num_classes = 3;
  SegModel m(cfg, 5);
  Rng rng(5);
  for (auto& v : m.parameters().back().mutable_data()) v = rng.uniform(-0.5, 0.5);
  const Tensor x = random_tensor({3, 8, 8}, rng, 0, 1);
  auto loss = [&](const SegModel& model) {
    const Tensor logits = model.forward(x).logits;
    return add(mean(logits), scalar_mul(mean(mul(logits, logits)), 0.5));
  };
  m.zero_grad();
  backward(loss(m));
  for (std::size_t pi : {std::size_t{0}, m.parameters().size() - 1}) {
    const auto analytic = m.parameters()[pi].grad();
    double worst = 0.0;
    for (std::size_t j = 0; j < m.parameters()[pi].numel(); ++j) {
      SegModel plus = m.clone(), minus = m.clone();
      const double h = 1e-5;
      plus.parameters()[pi].mutable_data()[j] += h;
      minus.parameters()[pi].mutable_data()[j] -= h;
      const double fd = (loss(plus).item() - loss(minus).item()) / (2 * h);
      worst = std::max(worst, std::abs(analytic[j] - fd) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("poly schedule endpoints") {
  OptimConfig o;
  o.max_iters = 100;
  CHECK(o.lr(0) == o.base_lr);
  CHECK(o.lr(50) == doctest::Approx(0.01 * std::pow(0.5, 0.9)));
  CHECK(o.lr(100) == 0.0);
}

TEST_CASE("sgd_step single parameter arithmetic") {
  ModelConfig cfg;
  cfg.widths = {2};
  cfg.num_classes = 2;
  cfg.downsample_factor = 1;
  SegModel m(cfg, 0);
  for (auto& p : m.parameters()) {
    for (auto& v : p.mutable_data()) v = 1.0;
    for (auto& g : p.mutable_grad()) g = 1.0;
  }
  OptimConfig o;
  o.momentum = 0.0;
  o.weight_decay = 0.0;
  o.base_lr = 0.1;
  sgd_step_fixed(m, o, 0.1);
  for (const auto& p : m.parameters())
    for (double v : p.data()) CHECK(v == doctest::Approx(0.9).epsilon(1e-15));
  for (const auto& p : m.parameters())
    for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("two momentum steps on a constant gradient give velocity 1.9 g plus decay") {
  ModelConfig cfg;
  cfg.widths = {2};
  cfg.num_classes = 2;
  cfg.downsample_factor = 1;
  SegModel m(cfg, 0);
  OptimConfig o;
  o.max_iters = 10;
  const double g = 0.5, lr = 0.01;
  const double p0 = m.parameters()[0][0];
  for (int step = 0; step < 2; ++step) {
    for (auto& p : m.parameters())
      for (auto& x : p.mutable_grad()) x = g;
    sgd_step_fixed(m, o, lr);
  }
  const double v1 = g + o.weight_decay * p0;
  const double p1 = p0 - lr * v1;
  const double v2 = o.momentum * v1 + g + o.weight_decay * p1;
  CHECK(m.momentum_buffers()[0][0] == doctest::Approx(v2).epsilon(1e-15));
  CHECK(v2 == doctest::Approx(1.9 * g + o.weight_decay * (0.9 * p0 + p1)).epsilon(1e-15));
  CHECK(m.parameters()[0][0] == doctest::Approx(p1 - lr * v2).epsilon(1e-15));
}

TEST_CASE("exhausted schedule and invalid configs") {
  SegModel m(ModelConfig{}, 0);
  OptimConfig o;
  o.max_iters = 3;
  CHECK_THROWS_AS(sgd_step(m, o, 3), ContractViolation);
  OptimConfig bad;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  ModelConfig mc;
  mc.num_classes = 1;
  CHECK_THROWS_AS(mc.validate(), ContractViolation);
  mc = ModelConfig{};
  mc.downsample_factor = 3;
  CHECK_THROWS_AS(mc.validate(), ContractViolation);
}

TEST_CASE("gradient clipping bounds the applied step") {
  ModelConfig cfg;
  cfg.widths = {2};
  cfg.num_classes = 2;
  cfg.downsample_factor = 1;
  SegModel m(cfg, 0);
  std::vector<std::vector<double>> before;
  for (const auto& p : m.parameters()) before.emplace_back(p.data().begin(), p.data().end());
  for (auto& p : m.parameters())
    for (auto& x : p.mutable_grad()) x = 100.0;
  OptimConfig o;
  o.momentum = 0.0;
  o.weight_decay = 0.0;
  o.grad_clip_norm = 1.0;
  sgd_step_fixed(m, o, 1.0);
  double sq = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    for (std::size_t j = 0; j < before[i].size(); ++j) sq += std::pow(m.parameters()[i][j] - before[i][j], 2);
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip is exact and rejects corruption") {
  SegModel m(ModelConfig{}, 17);
  m.momentum_buffers()[1][3] = 0.25;
  const auto bytes = m.serialize();
  CHECK(std::string(bytes.begin(), bytes.begin() + 7) == "COVALGN");
  const SegModel back = SegModel::deserialize(bytes);
  CHECK(back.serialize() == bytes);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(SegModel::deserialize(bad), DataError);
  bad = bytes;
  bad.resize(bad.size() / 2);
  CHECK_THROWS_AS(SegModel::deserialize(bad), DataError);
  const auto path = std::filesystem::temp_directory_path() / "covalign_ckpt_test.ckpt";
  m.save(path);
  CHECK(SegModel::load(path).serialize() == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(SegModel::load(path), DataError);
}

}  // TEST_SUITE
