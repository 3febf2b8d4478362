#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "helpers.hpp"

#include "covalign/errors.hpp"
#include "covalign/selftrain.hpp"

using namespace covalign;
using covalign::testing::random_probs;

namespace {

// Small two-domain problem that trains in well under a second.
std::pair<Dataset, Dataset> tiny_domains(std::size_t count = 8, std::uint64_t seed = 1) {
  auto [src, tgt] = default_benchmark();
  for (auto* s : {&src, &tgt}) {
    s->image_size = 16;
    for (std::size_t c = 1; c < s->num_classes(); ++c) s->scale_range[c] = {3, 8};
  }
  return {make_dataset(src, count, seed), make_dataset(tgt, count, seed + 100)};
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.model.widths = {6, 8};
  cfg.model.downsample_factor = 2;
  cfg.stage.max_stages = 2;
  cfg.stage.iters_per_stage = 4;
  cfg.stage.pretrain_iters = 6;
  cfg.stage.pretrain_icr_warmup = 2;
  cfg.stage.batch_size = 2;
  cfg.seed = 3;
  return cfg;
}

double ce_oracle(const Tensor& p, std::span<const std::uint8_t> labels) {
  const std::size_t n = p.size(0), hw = p.size(1) * p.size(2);
  double total = 0;
  std::size_t kept = 0;
  for (std::size_t k = 0; k < hw; ++k) {
    if (labels[k] == kIgnoreLabel) continue;
    ++kept;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels[k] == i ? 1.0 : 0.0;
      const double pk = p[i * hw + k];
      total -= y * std::log(std::max(pk, 1e-12)) + (1 - y) * std::log(std::max(1 - pk, 1e-12));
    }
  }
  return total / static_cast<double>(kept);
}

void set_threads(const char* v) { ::setenv("COVALIGN_THREADS", v, 1); }

}  // namespace

TEST_SUITE("selftrain") {

TEST_CASE("cross-entropy examples") {
  std::vector<double> onehot(2 * 4, 0.0);
  const std::vector<std::uint8_t> labels{0, 1, 1, 0};
  for (std::size_t k = 0; k < 4; ++k) onehot[labels[k] * 4 + k] = 1.0;
  CHECK(cross_entropy(Tensor::from({2, 2, 2}, onehot), labels).value.item() < 1e-9);
  const double uniform = cross_entropy(Tensor::full({2, 2, 2}, 0.5), labels).value.item();
  CHECK(uniform == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("cross-entropy matches the formula oracle and ignores masked pixels") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor p = random_probs(4, 3, 3, rng);
    std::vector<std::uint8_t> labels(9);
    for (auto& l : labels) l = rng.uniform() < 0.3 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(4));
    labels[0] = 1;
    CHECK(std::abs(cross_entropy(p, labels).value.item() - ce_oracle(p, labels)) < 1e-12);
  }
  Rng rng(50);
  const Tensor p = random_probs(3, 2, 4, rng);
  std::vector<std::uint8_t> half{0, 1, 2, 0, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel};
  std::vector<double> kept(3 * 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) kept[i * 4 + k] = p[i * 8 + k];
  CHECK(cross_entropy(p, half).value.item() ==
        doctest::Approx(cross_entropy(Tensor::from({3, 1, 4}, kept), std::vector<std::uint8_t>{0, 1, 2, 0}).value.item()).epsilon(1e-14));
  const LossTerm none = cross_entropy(p, std::vector<std::uint8_t>(8, kIgnoreLabel));
  CHECK(none.skipped);
  CHECK(none.value.item() == 0.0);
}

TEST_CASE("cross-entropy gradient through softmax") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const Tensor logits = covalign::testing::random_tensor({3, 2, 2}, rng, -2, 2);
    std::vector<std::uint8_t> labels{0, 2, kIgnoreLabel, 1};
    CHECK(grad_check([&](const Tensor& l) { return cross_entropy(softmax_channel(l), labels).value; }, logits) < 1e-4);
  }
}

TEST_CASE("uniform model predicts the lowest index") {
  const SegModel m(ModelConfig{}, 0);
  const auto [src, tgt] = default_benchmark();
  const Prediction p = predict(m, generate_one(tgt, 0, 0).image());
  for (auto l : p.labels) CHECK(l == 0);
  for (double c : p.confidence) CHECK(c == doctest::Approx(0.2));
}

TEST_CASE("pseudo-label thresholds") {
  const auto [src, tgt] = tiny_domains(4);
  const TrainConfig cfg = tiny_config();
  SegModel m(cfg.model, 1);
  pretrain(m, src, cfg);
  const PseudoLabelSet all = generate_pseudo_labels(m, tgt, 1.0);
  for (const auto& l : all.labels)
    for (auto v : l) CHECK(v == kIgnoreLabel);
  const PseudoLabelSet plain = generate_pseudo_labels(m, tgt);
  for (std::size_t i = 0; i < tgt.size(); ++i) CHECK(plain.labels[i] == predict(m, tgt.samples[i].image()).labels);
  CHECK(tgt.label_reads() == 0);
}

TEST_CASE("pseudo-label accuracy equals the model's accuracy") {
  const auto [src, tgt] = tiny_domains(4);
  const TrainConfig cfg = tiny_config();
  SegModel m(cfg.model, 2);
  pretrain(m, src, cfg);
  const PseudoLabelSet pl = generate_pseudo_labels(m, tgt);
  ConfusionMatrix from_pseudo(5);
  for (std::size_t i = 0; i < tgt.size(); ++i) from_pseudo.add(tgt.samples[i].labels(), pl.labels[i]);
  CHECK(from_pseudo == evaluate(m, tgt));
}

TEST_CASE("parallel pseudo-labels equal the serial result") {
  const auto [src, tgt] = tiny_domains(6);
  const TrainConfig cfg = tiny_config();
  SegModel m(cfg.model, 3);
  pretrain(m, src, cfg);
  set_threads("1");
  const auto serial = generate_pseudo_labels(m, tgt, 0.3).digest();
  set_threads("3");
  const auto parallel = generate_pseudo_labels(m, tgt, 0.3).digest();
  const ConfusionMatrix par_eval = evaluate(m, src);
  set_threads("1");
  CHECK(serial == parallel);
  CHECK(par_eval == evaluate(m, src));
}

TEST_CASE("pretrain: zero iterations and the uniform first loss") {
  const auto [src, tgt] = tiny_domains(4);
  TrainConfig cfg = tiny_config();
  cfg.stage.pretrain_iters = 0;
  SegModel m(cfg.model, 4);
  const auto before = m.serialize();
  pretrain(m, src, cfg);
  CHECK(m.serialize() == before);

  cfg.stage.pretrain_iters = 1;
  std::vector<TraceRow> trace;
  pretrain(m, src, cfg, &trace);
  REQUIRE(trace.size() == 1);
  // Zero classifier: p = 1/5 everywhere, so each pixel costs -log(1/5) - 4 log(4/5).
  CHECK(*trace[0].ce_source == doctest::Approx(std::log(5.0) - 4.0 * std::log(0.8)).epsilon(1e-12));
}

TEST_CASE("pretrain improves source mIoU on a memorizable set") {
  const auto [src, tgt] = tiny_domains(4);
  TrainConfig cfg = tiny_config();
  cfg.stage.pretrain_iters = 150;
  cfg.stage.pretrain_icr_warmup = 150;
  cfg.optim.base_lr = 0.05;
  SegModel m(cfg.model, 5);
  const double before = iou(evaluate(m, src)).miou;
  pretrain(m, src, cfg);
  CHECK(iou(evaluate(m, src)).miou > before);
}

TEST_CASE("K=1 with zero stage iterations returns M0") {
  const auto [src, tgt] = tiny_domains(4);
  TrainConfig cfg = tiny_config();
  cfg.stage.max_stages = 1;
  cfg.stage.iters_per_stage = 0;
  const RunResult r = run_selftraining(src, tgt, cfg);
  CHECK(r.model.serialize() == r.pretrained.serialize());
  CHECK(r.records.size() == 2);
}

TEST_CASE("records, stage-constant pseudo-labels and the label audit") {
  const auto [src, tgt] = tiny_domains(6);
  const TrainConfig cfg = tiny_config();
  tgt.reset_label_reads();
  const RunResult r = run_selftraining(src, tgt, cfg);
  CHECK(tgt.label_reads() == 0);
  REQUIRE(r.records.size() == cfg.stage.max_stages + 1);
  for (std::size_t k = 1; k < r.records.size(); ++k) {
    CHECK(r.records[k].stage == k);
    CHECK(r.records[k].pseudo_digest_start == r.records[k].pseudo_digest_end);
  }
  CHECK(r.trace.size() == cfg.stage.pretrain_iters + cfg.stage.max_stages * cfg.stage.iters_per_stage);
  for (const auto& t : r.trace) {
    CHECK(std::isfinite(t.ce_source.value()));
    if (t.stage > 0) {
      CHECK(std::isfinite(t.ce_target.value()));
      CHECK(t.icr.has_value());
      CHECK(t.ccr.has_value());
    }
  }
  // Stage learning rates follow one global schedule.
  CHECK(r.trace[cfg.stage.pretrain_iters].lr == cfg.optim.base_lr);
  CHECK(r.trace.back().lr < r.trace[cfg.stage.pretrain_iters + cfg.stage.iters_per_stage].lr);
}

TEST_CASE("evaluation sets fill per-stage scores") {
  const auto [src, tgt] = tiny_domains(4);
  const TrainConfig cfg = tiny_config();
  const RunResult r = run_selftraining(src, tgt, cfg, EvalSets{&src, &tgt});
  for (const auto& rec : r.records) {
    CHECK(rec.source_miou.has_value());
    CHECK(rec.target_miou.has_value());
  }
}

TEST_CASE("zeroed weights reproduce the reduced pipelines bit for bit") {
  const auto [src, tgt] = tiny_domains(6);
  TrainConfig base = tiny_config();
  SegModel m0(base.model, base.seed);
  pretrain(m0, src, base);

  TrainConfig a = base, b = base;
  a.stage.weights = {1, 0, 0, 0, 0, 0};
  b.stage.weights = {1, 0, 0, 0, 0, 0};
  b.cr.epsilon = 0.3;  // unused when CR is off
  CHECK(run_stages_from(m0, src, tgt, a, {}).model.serialize() == run_stages_from(m0, src, tgt, b, {}).model.serialize());

  // With CE_t and CR disabled the target set is never touched.
  auto [src2, tgt_other] = tiny_domains(6, 9);
  CHECK(run_stages_from(m0, src, tgt, a, {}).model.serialize() ==
        run_stages_from(m0, src, tgt_other, a, {}).model.serialize());
}

TEST_CASE("identical seeds give identical runs") {
  const auto [src, tgt] = tiny_domains(6);
  const TrainConfig cfg = tiny_config();
  const RunResult r1 = run_selftraining(src, tgt, cfg), r2 = run_selftraining(src, tgt, cfg);
  CHECK(r1.model.serialize() == r2.model.serialize());
  REQUIRE(r1.trace.size() == r2.trace.size());
  for (std::size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].ce_source == r2.trace[i].ce_source);
}

TEST_CASE("stage validation") {
  StageConfig s;
  s.max_stages = 0;
  CHECK_THROWS_AS(s.validate(), ContractViolation);
  s = StageConfig{};
  s.pseudo_confidence_threshold = 0.0;
  CHECK_THROWS_AS(s.validate(), ContractViolation);
  s = StageConfig{};
  s.batch_size = 1;
  CHECK_THROWS_AS(s.validate(), ContractViolation);
}

TEST_CASE("non-finite values are rejected at the source") {
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), NumericError);
}

TEST_CASE("divergence aborts with the iteration in the message") {
  const auto [src, tgt] = tiny_domains(4);
  TrainConfig cfg = tiny_config();
  cfg.optim.base_lr = 1e300;
  cfg.stage.pretrain_iters = 30;
  SegModel m(cfg.model, 6);
  try {
    pretrain(m, src, cfg);
    FAIL("expected divergence");
  } catch (const TrainingAborted& e) {
    CHECK(std::string(e.what()).find("iteration") != std::string::npos);
  }
}

}  // TEST_SUITE
