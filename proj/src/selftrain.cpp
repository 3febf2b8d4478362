#include "covalign/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "covalign/errors.hpp"
#include "covalign/rng.hpp"

namespace covalign {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr std::uint64_t kPretrainStream = 0x9E7A;
constexpr std::uint64_t kStageStream = 0x57A6E;

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(worker_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Draws k distinct indices from [0, n) (k <= n); with k > n, draws with replacement.
std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  if (k > n) {
    for (std::size_t i = 0; i < k; ++i) out.push_back(static_cast<std::size_t>(rng.below(n)));
    return out;
  }
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(pool[i], pool[i + static_cast<std::size_t>(rng.below(n - i))]);
    out.push_back(pool[i]);
  }
  return out;
}

struct BatchForward {
  std::vector<Tensor> features;
  std::vector<Tensor> probs_low;  // softmax at feature resolution, detached
  std::vector<Tensor> probs;      // softmax at label resolution
};

BatchForward forward_batch(const SegModel& model, const Dataset& data, const std::vector<std::size_t>& idx,
                           bool need_probs) {
  BatchForward out;
  for (const std::size_t i : idx) {
    SegForward f = model.forward(data.samples[i].image());
    out.features.push_back(f.features);
    out.probs_low.push_back(stop_grad(softmax_channel(f.low_logits)));
    if (need_probs) out.probs.push_back(softmax_channel(f.logits));
  }
  return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

struct StepTerms {
  std::optional<double> ce_source, ce_target, icr, ccr, mse, triplet;

  std::string describe() const {
    std::ostringstream os;
    auto put = [&](const char* name, const std::optional<double>& v) {
      os << ' ' << name << '=';
      if (v) os << *v; else os << "n/a";
    };
    put("L_CE_s", ce_source);
    put("L_CE_t", ce_target);
    put("L_ICR", icr);
    put("L_CCR", ccr);
    put("L_MSE", mse);
    put("L_triplet", triplet);
    return os.str();
  }
};

// Random disjoint halving of the source batch into the two ICR groups.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> halve(Rng& rng, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t half = n / 2;
  return {{order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half)},
          {order.begin() + static_cast<std::ptrdiff_t>(half), order.end()}};
}

std::vector<std::span<const std::uint8_t>> source_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<std::span<const std::uint8_t>> out;
  for (auto i : idx) out.emplace_back(data.samples[i].labels());
  return out;
}

void accumulate(Tensor& total, const Tensor& term, double weight) {
  const Tensor scaled = weight == 1.0 ? term : scalar_mul(term, weight);
  total = total.defined() ? add(total, scaled) : scaled;
}

void check_compatible(const SegModel& model, const Dataset& data, const char* what) {
  if (data.samples.empty()) throw ContractViolation(std::string(what) + " dataset is empty");
  if (data.spec.num_classes() != model.config().num_classes) {
    throw ContractViolation(std::string(what) + " dataset class count differs from the model's");
  }
}

std::size_t stage_budget(const TrainConfig& cfg) { return cfg.stage.max_stages * cfg.stage.iters_per_stage; }

}  // namespace

std::size_t worker_threads() {
  if (const char* env = std::getenv("COVALIGN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

void StageConfig::validate() const {
  if (max_stages == 0) throw ContractViolation("StageConfig: max_stages must be at least 1");
  if (batch_size == 0) throw ContractViolation("StageConfig: batch_size must be at least 1");
  if (pseudo_confidence_threshold && !(*pseudo_confidence_threshold > 0.0 && *pseudo_confidence_threshold <= 1.0)) {
    throw ContractViolation("StageConfig: pseudo_confidence_threshold must lie in (0, 1]");
  }
  const bool needs_halves = weights.icr != 0.0 || weights.triplet != 0.0 || pretrain_icr_weight != 0.0;
  if (needs_halves && batch_size < 2) throw ContractViolation("StageConfig: ICR/triplet need batch_size >= 2");
}

LossTerm cross_entropy(const std::vector<Tensor>& pred_softmax,
                       const std::vector<std::span<const std::uint8_t>>& labels) {
  if (pred_softmax.size() != labels.size() || pred_softmax.empty()) {
    throw ContractViolation("cross_entropy: need one label map per prediction");
  }
  Tensor total;
  std::size_t kept = 0;
  for (std::size_t b = 0; b < pred_softmax.size(); ++b) {
    const Tensor& p = pred_softmax[b];
    if (p.dim() != 3 || labels[b].size() != p.size(1) * p.size(2)) {
      throw ContractViolation("cross_entropy: label map does not match prediction " + shape_str(p.shape()));
    }
    const std::size_t n = p.size(0), plane = p.size(1) * p.size(2);
    std::vector<double> pos(n * plane, 0.0), neg(n * plane, 0.0);
    std::size_t here = 0;
    for (std::size_t k = 0; k < plane; ++k) {
      const auto y = labels[b][k];
      if (y == kIgnoreLabel) continue;
      if (y >= n) throw ContractViolation("cross_entropy: label out of range");
      ++here;
      for (std::size_t c = 0; c < n; ++c) (c == y ? pos : neg)[c * plane + k] = 1.0;
    }
    if (here == 0) continue;
    kept += here;
    const Tensor log_p = log(clamp_min(p, kProbFloor));
    const Tensor log_q = log(clamp_min(add_scalar(scalar_mul(p, -1.0), 1.0), kProbFloor));
    const Tensor term =
        sum(add(mul(log_p, Tensor::from(p.shape(), std::move(pos))), mul(log_q, Tensor::from(p.shape(), std::move(neg)))));
    total = total.defined() ? add(total, term) : term;
  }
  if (kept == 0) return {Tensor::scalar(0.0), true};
  return {scalar_mul(total, -1.0 / static_cast<double>(kept)), false};
}

LossTerm cross_entropy(const Tensor& pred_softmax, std::span<const std::uint8_t> labels) {
  return cross_entropy(std::vector<Tensor>{pred_softmax}, std::vector<std::span<const std::uint8_t>>{labels});
}

Prediction predict(const SegModel& model, const Tensor& image) {
  NoGradGuard no_grad;
  const Tensor probs = softmax_channel(model.forward(image).logits);
  const std::size_t n = probs.size(0), plane = probs.size(1) * probs.size(2);
  const auto p = probs.data();
  Prediction out;
  out.labels.resize(plane);
  out.confidence.resize(plane);
  for (std::size_t k = 0; k < plane; ++k) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c) {
      if (p[c * plane + k] > p[best * plane + k]) best = c;
    }
    out.labels[k] = static_cast<std::uint8_t>(best);
    out.confidence[k] = p[best * plane + k];
  }
  return out;
}

std::uint64_t PseudoLabelSet::digest() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto feed = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001B3ull;
  };
  for (const auto& map : labels) {
    for (int s = 0; s < 8; ++s) feed(static_cast<std::uint8_t>(map.size() >> (8 * s)));
    for (auto v : map) feed(v);
  }
  return h;
}

PseudoLabelSet generate_pseudo_labels(const SegModel& model, const Dataset& target, std::optional<double> threshold,
                                      std::size_t stage) {
  PseudoLabelSet out;
  out.stage = stage;
  out.labels.resize(target.samples.size());
  parallel_for(target.samples.size(), [&](std::size_t i) {
    Prediction p = predict(model, target.samples[i].image());
    if (threshold) {
      for (std::size_t k = 0; k < p.labels.size(); ++k) {
        if (p.confidence[k] < *threshold) p.labels[k] = kIgnoreLabel;
      }
    }
    out.labels[i] = std::move(p.labels);
  });
  return out;
}

ConfusionMatrix evaluate(const SegModel& model, const Dataset& data) {
  const std::size_t n = model.config().num_classes;
  std::vector<ConfusionMatrix> parts(data.samples.size(), ConfusionMatrix(n));
  parallel_for(data.samples.size(), [&](std::size_t i) {
    const Prediction p = predict(model, data.samples[i].image());
    parts[i].add(data.samples[i].labels(), p.labels);
  });
  ConfusionMatrix total(n);
  for (const auto& c : parts) total.merge(c);
  return total;
}

void pretrain(SegModel& model, const Dataset& source, const TrainConfig& cfg, std::vector<TraceRow>* trace) {
  cfg.stage.validate();
  const std::size_t iters = cfg.stage.pretrain_iters;
  if (iters == 0) return;
  check_compatible(model, source, "source");
  OptimConfig optim = cfg.optim;
  optim.max_iters = iters;
  optim.validate();
  Rng rng(Rng::substream(cfg.seed, kPretrainStream));
  const double w_icr = cfg.stage.pretrain_icr_weight;

  for (std::size_t it = 0; it < iters; ++it) {
    StepTerms terms;
    try {
      const auto idx = sample_batch(rng, source.size(), cfg.stage.batch_size);
      const auto [g1, g2] = halve(rng, idx.size());
      const BatchForward fw = forward_batch(model, source, idx, true);
      const LossTerm ce = cross_entropy(fw.probs, source_labels(source, idx));
      terms.ce_source = ce.value.item();
      Tensor total = ce.value;
      if (w_icr != 0.0 && it >= cfg.stage.pretrain_icr_warmup) {
        const auto f1 = pool(pick(fw.features, g1), pick(fw.probs_low, g1));
        const auto f2 = pool(pick(fw.features, g2), pick(fw.probs_low, g2));
        const AlignLoss icr = icr_loss(f1, f2, cfg.cr);
        terms.icr = icr.value.item();
        accumulate(total, icr.value, w_icr);
      }
      if (!std::isfinite(total.item())) throw NumericError("non-finite total loss");
      backward(total);
      const double lr = optim.lr(it);
      sgd_step(model, optim, it);
      if (trace) trace->push_back({0, it, terms.ce_source, std::nullopt, terms.icr, std::nullopt, std::nullopt,
                                   std::nullopt, lr});
    } catch (const TrainingAborted&) {
      throw;
    } catch (const NumericError& e) {
      throw TrainingAborted("pretrain diverged at iteration " + std::to_string(it) + " (" + e.what() + "):" +
                            terms.describe());
    }
  }
}

StageRecord run_stage(SegModel& model, const Dataset& source, const Dataset& target, const PseudoLabelSet& pseudo,
                      const TrainConfig& cfg, std::size_t stage, std::vector<TraceRow>* trace) {
  cfg.stage.validate();
  if (stage == 0 || stage > cfg.stage.max_stages) throw ContractViolation("run_stage: stage index out of range");
  check_compatible(model, source, "source");
  check_compatible(model, target, "target");
  if (pseudo.labels.size() != target.size()) throw ContractViolation("run_stage: pseudo-label count differs from target set");

  const LossWeights& w = cfg.stage.weights;
  const bool use_target = w.ce_target != 0.0 || w.ccr != 0.0 || w.mse != 0.0;
  OptimConfig optim = cfg.optim;
  optim.max_iters = std::max<std::size_t>(stage_budget(cfg), 1);
  optim.validate();
  Rng rng(Rng::substream(cfg.seed, kStageStream + stage));
  PoolOptions by_mass;
  by_mass.normalize_by_mass = true;

  StageRecord rec;
  rec.stage = stage;
  rec.pseudo_digest_start = pseudo.digest();
  const std::size_t offset = (stage - 1) * cfg.stage.iters_per_stage;
  double sum_ce_s = 0, sum_ce_t = 0, sum_icr = 0, sum_ccr = 0;

  for (std::size_t it = 0; it < cfg.stage.iters_per_stage; ++it) {
    const std::size_t global = offset + it;
    StepTerms terms;
    try {
      const auto src_idx = sample_batch(rng, source.size(), cfg.stage.batch_size);
      const auto tgt_idx = sample_batch(rng, target.size(), cfg.stage.batch_size);
      const auto [g1, g2] = halve(rng, src_idx.size());

      const BatchForward src = forward_batch(model, source, src_idx, true);
      Tensor total;
      const LossTerm ce_s = cross_entropy(src.probs, source_labels(source, src_idx));
      terms.ce_source = ce_s.value.item();
      accumulate(total, ce_s.value, w.ce_source);

      if (w.icr != 0.0) {
        const AlignLoss icr = icr_loss(pool(pick(src.features, g1), pick(src.probs_low, g1)),
                                       pool(pick(src.features, g2), pick(src.probs_low, g2)), cfg.cr);
        terms.icr = icr.value.item();
        accumulate(total, icr.value, w.icr);
      }
      if (w.triplet != 0.0) {
        const AlignLoss tri = triplet_align_loss(pool(pick(src.features, g1), pick(src.probs_low, g1), by_mass),
                                                 pool(pick(src.features, g2), pick(src.probs_low, g2), by_mass), cfg.cr);
        terms.triplet = tri.value.item();
        accumulate(total, tri.value, w.triplet);
      }

      if (use_target) {
        const BatchForward tgt = forward_batch(model, target, tgt_idx, w.ce_target != 0.0);
        if (w.ce_target != 0.0) {
          std::vector<std::span<const std::uint8_t>> plabels;
          for (auto i : tgt_idx) plabels.emplace_back(pseudo.labels[i]);
          const LossTerm ce_t = cross_entropy(tgt.probs, plabels);
          terms.ce_target = ce_t.value.item();
          accumulate(total, ce_t.value, w.ce_target);
        }
        if (w.ccr != 0.0) {
          const AlignLoss ccr = ccr_loss(pool(src.features, src.probs_low), pool(tgt.features, tgt.probs_low), cfg.cr);
          terms.ccr = ccr.value.item();
          accumulate(total, ccr.value, w.ccr);
        }
        if (w.mse != 0.0) {
          const AlignLoss mse = mse_align_loss(pool(src.features, src.probs_low, by_mass).detached(),
                                               pool(tgt.features, tgt.probs_low, by_mass));
          terms.mse = mse.value.item();
          accumulate(total, mse.value, w.mse);
        }
      }

      if (!std::isfinite(total.item())) throw NumericError("non-finite total loss");
      backward(total);
      const double lr = optim.lr(global);
      sgd_step(model, optim, global);
      if (trace) {
        trace->push_back({stage, global, terms.ce_source, terms.ce_target, terms.icr, terms.ccr, terms.mse,
                          terms.triplet, lr});
      }
    } catch (const TrainingAborted&) {
      throw;
    } catch (const NumericError& e) {
      throw TrainingAborted("stage " + std::to_string(stage) + " diverged at iteration " + std::to_string(global) +
                            " (" + e.what() + "):" + terms.describe());
    }
    sum_ce_s += terms.ce_source.value_or(0.0);
    sum_ce_t += terms.ce_target.value_or(0.0);
    sum_icr += terms.icr.value_or(0.0);
    sum_ccr += terms.ccr.value_or(0.0);
  }
  const double denom = std::max<double>(1.0, static_cast<double>(cfg.stage.iters_per_stage));
  rec.mean_ce_source = sum_ce_s / denom;
  rec.mean_ce_target = sum_ce_t / denom;
  rec.mean_icr = sum_icr / denom;
  rec.mean_ccr = sum_ccr / denom;
  rec.pseudo_digest_end = pseudo.digest();
  return rec;
}

namespace {

void fill_eval(StageRecord& rec, const SegModel& model, const EvalSets& eval) {
  if (eval.source) rec.source_miou = iou(evaluate(model, *eval.source)).miou;
  if (eval.target) rec.target_miou = iou(evaluate(model, *eval.target)).miou;
}

}  // namespace

RunResult run_stages_from(const SegModel& pretrained, const Dataset& source, const Dataset& target,
                          const TrainConfig& cfg, const EvalSets& eval, const StageHook& hook) {
  cfg.stage.validate();
  RunResult result{pretrained.clone(), pretrained.clone(), {}, {}};
  StageRecord pre;
  pre.stage = 0;
  fill_eval(pre, result.model, eval);
  result.records.push_back(pre);
  for (std::size_t k = 1; k <= cfg.stage.max_stages; ++k) {
    const PseudoLabelSet pseudo = generate_pseudo_labels(result.model, target, cfg.stage.pseudo_confidence_threshold, k);
    StageRecord rec = run_stage(result.model, source, target, pseudo, cfg, k, &result.trace);
    fill_eval(rec, result.model, eval);
    result.records.push_back(rec);
    if (hook) hook(k, result.model);
  }
  return result;
}

RunResult run_selftraining(const Dataset& source, const Dataset& target, const TrainConfig& cfg, const EvalSets& eval,
                         const StageHook& hook) {
  cfg.stage.validate();
  SegModel model(cfg.model, cfg.seed);
  std::vector<TraceRow> pre_trace;
  pretrain(model, source, cfg, &pre_trace);
  if (hook) hook(0, model);
  RunResult result = run_stages_from(model, source, target, cfg, eval, hook);
  StageRecord& pre = result.records.front();
  double ce = 0.0, icr = 0.0;
  for (const auto& r : pre_trace) {
    ce += r.ce_source.value_or(0.0);
    icr += r.icr.value_or(0.0);
  }
  if (!pre_trace.empty()) {
    pre.mean_ce_source = ce / static_cast<double>(pre_trace.size());
    pre.mean_icr = icr / static_cast<double>(pre_trace.size());
  }
  pre_trace.insert(pre_trace.end(), result.trace.begin(), result.trace.end());
  result.trace = std::move(pre_trace);
  return result;
}

}  // namespace covalign
