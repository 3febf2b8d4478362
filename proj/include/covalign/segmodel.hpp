#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "covalign/tensor.hpp"

namespace covalign {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{16, 32, 32};
  std::size_t num_classes = 5;
  std::size_t downsample_factor = 4;

  std::size_t feature_dim() const { return widths.empty() ? 0 : widths.back(); }
  /// Throws ContractViolation when the configuration is unusable.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct OptimConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double poly_power = 0.9;
  std::size_t max_iters = 1;
  // Rescales the gradient when its global L2 norm exceeds this; 0 disables.
  double grad_clip_norm = 0.0;

  void validate() const;
  /// base_lr * (1 - iter / max_iters)^poly_power; 0 at iter == max_iters.
  double lr(std::size_t iter) const;
};

/// Forward products of one image.
struct SegForward {
  Tensor features;    // [C x h x w]
  Tensor low_logits;  // [N x h x w], classifier output at feature resolution
  Tensor logits;      // [N x H x W], upsampled to label resolution
};

/// Conv encoder (3x3 conv + ReLU per stage) and a 1x1 conv classifier,
/// all bias-free. The first log2(downsample_factor) stages use stride 2.
class SegModel {
 public:
  SegModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  Tensor encode(const Tensor& image) const;
  /// 1x1 classifier at feature resolution.
  Tensor head(const Tensor& features) const;
  /// head() followed by bilinear upsampling to out_h x out_w.
  Tensor classify(const Tensor& features, std::size_t out_h, std::size_t out_w) const;
  SegForward forward(const Tensor& image) const;

  /// Encoder kernels first, classifier last.
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<std::vector<double>>& momentum_buffers() { return velocity_; }
  const std::vector<std::vector<double>>& momentum_buffers() const { return velocity_; }
  std::size_t parameter_count() const;

  void zero_grad();
  /// Deep copy of parameters and momentum with fresh leaves.
  SegModel clone() const;

  /// Binary checkpoint: "COVALGN\0", u32 version, config, then every
  /// parameter as (u32 rank, u64 extents..., f64 values...) and its momentum
  /// buffer. All fields little-endian.
  void save(const std::filesystem::path& path) const;
  static SegModel load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static SegModel deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  SegModel() = default;
  std::size_t stride_for(std::size_t stage) const;

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
};

/// Momentum SGD with poly decay:
///   v <- momentum * v + grad + weight_decay * p,  p <- p - lr(iter) * v,
/// then gradients are zeroed. iter >= max_iters is a ContractViolation.
void sgd_step(SegModel& model, const OptimConfig& optim, std::size_t iter);

/// Same update at a caller-chosen learning rate (no schedule).
void sgd_step_fixed(SegModel& model, const OptimConfig& optim, double lr);

}  // namespace covalign
