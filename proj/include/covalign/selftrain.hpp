#pragma once

// Stagewise self-training with covariance alignment.
//
//   M0 <- pretrain on labelled source (CE_s + ICR)
//   for k = 1..K:
//     pseudo <- argmax predictions of M_{k-1} on the target set
//     M_k    <- iters_per_stage steps on
//               w_ce_s*CE_s + w_ce_t*CE_t(pseudo) + w_icr*ICR + w_ccr*CCR
//               (+ w_mse*MSE + w_triplet*Triplet for the baselines)
//
// Pretraining runs its own poly schedule over pretrain_iters. The K stages
// share one poly schedule indexed by the global stage iteration, with
// I = K * iters_per_stage. Terms with weight 0 are never evaluated, so
// zeroing a weight reproduces the reduced pipeline exactly.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covalign/alignment.hpp"
#include "covalign/errors.hpp"
#include "covalign/cfp.hpp"
#include "covalign/metrics.hpp"
#include "covalign/segmodel.hpp"
#include "covalign/synthdata.hpp"

namespace covalign {

struct LossWeights {
  double ce_source = 1.0;
  double ce_target = 1.0;
  double icr = 1.0;
  double ccr = 1.0;
  double mse = 0.0;      // cross-domain MSE centroid alignment baseline
  double triplet = 0.0;  // source-only triplet baseline
  bool operator==(const LossWeights&) const = default;
};

struct StageConfig {
  std::size_t max_stages = 5;
  std::size_t iters_per_stage = 300;
  std::size_t pretrain_iters = 300;
  std::size_t batch_size = 4;
  std::optional<double> pseudo_confidence_threshold;
  LossWeights weights;
  double pretrain_icr_weight = 1.0;
  // Pretraining iterations run with CE only before ICR switches on. The
  // classifier starts at zero, so early pooled centroids are near-identical.
  std::size_t pretrain_icr_warmup = 0;

  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  OptimConfig optim;  // max_iters is derived per phase
  StageConfig stage;
  CRConfig cr;
  std::uint64_t seed = 0;
};

/// Result of an optional loss term.
struct LossTerm {
  Tensor value;
  bool skipped = false;
};

/// Binary-form cross-entropy summed over channels and averaged over the
/// non-ignored pixels of all images:
///   -(1/P) sum_k sum_i [y_ki log p_ki + (1 - y_ki) log(1 - p_ki)],
/// with both probabilities floored at 1e-12. Skipped (exact 0) when every
/// pixel is ignored.
LossTerm cross_entropy(const std::vector<Tensor>& pred_softmax,
                       const std::vector<std::span<const std::uint8_t>>& labels);
LossTerm cross_entropy(const Tensor& pred_softmax, std::span<const std::uint8_t> labels);

struct Prediction {
  std::vector<std::uint8_t> labels;
  std::vector<double> confidence;  // max softmax probability per pixel
};

/// Argmax of the softmax output at label resolution; ties go to the lowest index.
Prediction predict(const SegModel& model, const Tensor& image);

struct PseudoLabelSet {
  std::vector<std::vector<std::uint8_t>> labels;  // kIgnoreLabel marks dropped pixels
  std::size_t stage = 0;

  /// FNV-1a over every label map in order.
  std::uint64_t digest() const;
};

/// Plain argmax by default; with a threshold, pixels whose max probability is
/// below it become kIgnoreLabel. Images are processed in parallel when
/// COVALIGN_THREADS > 1; results are merged in image order.
PseudoLabelSet generate_pseudo_labels(const SegModel& model, const Dataset& target,
                                      std::optional<double> threshold = std::nullopt, std::size_t stage = 0);

ConfusionMatrix evaluate(const SegModel& model, const Dataset& data);

/// One optimizer step worth of loss values; nullopt marks an inactive term.
struct TraceRow {
  std::size_t stage = 0;
  std::size_t iter = 0;
  std::optional<double> ce_source, ce_target, icr, ccr, mse, triplet;
  double lr = 0.0;
};

struct StageRecord {
  std::size_t stage = 0;
  double mean_ce_source = 0.0, mean_ce_target = 0.0, mean_icr = 0.0, mean_ccr = 0.0;
  std::optional<double> source_miou, target_miou;
  std::uint64_t pseudo_digest_start = 0, pseudo_digest_end = 0;
};

struct EvalSets {
  const Dataset* source = nullptr;
  const Dataset* target = nullptr;
};

/// Thrown when a loss turns non-finite; the message names the iteration and
/// the per-term values computed so far.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Source pretraining: CE_s + pretrain_icr_weight * ICR, ICR skipped during the
/// warmup iterations. iters == 0 leaves the model unchanged.
void pretrain(SegModel& model, const Dataset& source, const TrainConfig& cfg, std::vector<TraceRow>* trace = nullptr);

/// One stage of joint training; global_offset is the index of its first step
/// in the shared stage schedule.
StageRecord run_stage(SegModel& model, const Dataset& source, const Dataset& target, const PseudoLabelSet& pseudo,
                      const TrainConfig& cfg, std::size_t stage, std::vector<TraceRow>* trace = nullptr);

struct RunResult {
  SegModel model;
  SegModel pretrained;
  std::vector<StageRecord> records;  // pretrain + one per stage
  std::vector<TraceRow> trace;
};

/// Optional hook invoked after pretraining and after each stage.
using StageHook = std::function<void(std::size_t stage, const SegModel& model)>;

RunResult run_selftraining(const Dataset& source, const Dataset& target, const TrainConfig& cfg,
                         const EvalSets& eval = {}, const StageHook& hook = {});

/// Continues from an existing pretrained model (skips pretraining).
RunResult run_stages_from(const SegModel& pretrained, const Dataset& source, const Dataset& target,
                          const TrainConfig& cfg, const EvalSets& eval = {}, const StageHook& hook = {});

/// Worker count for parallel sections, from COVALIGN_THREADS (default 1).
std::size_t worker_threads();

}  // namespace covalign
