#include "covalign/segmodel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "covalign/errors.hpp"
#include "covalign/rng.hpp"

namespace covalign {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'V', 'A', 'L', 'G', 'N', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  void raw(char* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  if (in_channels == 0) throw ContractViolation("ModelConfig: in_channels must be positive");
  if (widths.empty()) throw ContractViolation("ModelConfig: widths must be non-empty");
  for (auto w : widths) {
    if (w == 0) throw ContractViolation("ModelConfig: widths must be positive");
  }
  if (num_classes < 2) throw ContractViolation("ModelConfig: need at least 2 classes");
  if (!is_power_of_two(downsample_factor)) {
    throw ContractViolation("ModelConfig: downsample_factor must be a power of two");
  }
  if (static_cast<std::size_t>(std::countr_zero(downsample_factor)) > widths.size()) {
    throw ContractViolation("ModelConfig: not enough stages for the requested downsample_factor");
  }
}

void OptimConfig::validate() const {
  if (!(base_lr > 0.0)) throw ContractViolation("OptimConfig: base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractViolation("OptimConfig: momentum must lie in [0, 1)");
  if (!(poly_power > 0.0)) throw ContractViolation("OptimConfig: poly_power must be positive");
  if (weight_decay < 0.0) throw ContractViolation("OptimConfig: weight_decay must be non-negative");
  if (max_iters == 0) throw ContractViolation("OptimConfig: max_iters must be positive");
  if (!(grad_clip_norm >= 0.0)) throw ContractViolation("OptimConfig: grad_clip_norm must be non-negative");
}

double OptimConfig::lr(std::size_t iter) const {
  if (iter >= max_iters) return 0.0;
  const double frac = static_cast<double>(iter) / static_cast<double>(max_iters);
  return base_lr * std::pow(1.0 - frac, poly_power);
}

SegModel::SegModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(Rng::substream(seed, 0x5E6D0DE1));
  std::size_t cin = config_.in_channels;
  for (const std::size_t cout : config_.widths) {
    const std::size_t fan_in = cin * 9;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> w(cout * fan_in);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    params_.push_back(Tensor::from({cout, cin, 3, 3}, std::move(w), true));
    cin = cout;
  }
  params_.push_back(Tensor::zeros({config_.num_classes, cin, 1, 1}, true));
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

std::size_t SegModel::stride_for(std::size_t stage) const {
  return stage < static_cast<std::size_t>(std::countr_zero(config_.downsample_factor)) ? 2 : 1;
}

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

Tensor SegModel::encode(const Tensor& image) const {
  if (image.dim() != 3 || image.size(0) != config_.in_channels) {
    throw ContractViolation("encode: expected [" + std::to_string(config_.in_channels) + " x H x W] input, got " +
                            shape_str(image.shape()));
  }
  const std::size_t df = config_.downsample_factor;
  if (image.size(1) % df != 0 || image.size(2) % df != 0) {
    throw ContractViolation("encode: spatial size " + shape_str(image.shape()) + " not divisible by " +
                            std::to_string(df));
  }
  Tensor x = image;
  for (std::size_t s = 0; s < config_.widths.size(); ++s) {
    x = relu(conv2d(x, params_[s], stride_for(s), 1));
  }
  return x;
}

Tensor SegModel::head(const Tensor& features) const {
  if (features.dim() != 3 || features.size(0) != config_.feature_dim()) {
    throw ContractViolation("head: expected [" + std::to_string(config_.feature_dim()) + " x h x w] features");
  }
  return conv2d(features, params_.back(), 1, 0);
}

Tensor SegModel::classify(const Tensor& features, std::size_t out_h, std::size_t out_w) const {
  return upsample_bilinear(head(features), out_h, out_w);
}

SegForward SegModel::forward(const Tensor& image) const {
  SegForward out;
  out.features = encode(image);
  out.low_logits = head(out.features);
  out.logits = upsample_bilinear(out.low_logits, image.size(1), image.size(2));
  return out;
}

void SegModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

SegModel SegModel::clone() const {
  SegModel m;
  m.config_ = config_;
  for (const auto& p : params_) {
    Tensor c = p.clone();
    c.set_requires_grad(true);
    m.params_.push_back(std::move(c));
  }
  m.velocity_ = velocity_;
  return m;
}

std::vector<std::uint8_t> SegModel::serialize() const {
  ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kFormatVersion);
  w.u64(config_.in_channels);
  w.u64(config_.widths.size());
  for (auto v : config_.widths) w.u64(v);
  w.u64(config_.num_classes);
  w.u64(config_.downsample_factor);
  w.u64(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& shape = params_[i].shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) w.u64(e);
    for (double v : params_[i].data()) w.f64(v);
    for (double v : velocity_[i]) w.f64(v);
  }
  return w.take();
}

SegModel SegModel::deserialize(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint (bad magic)");
  if (const auto version = r.u32(); version != kFormatVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  SegModel m;
  m.config_.in_channels = r.u64();
  m.config_.widths.resize(r.u64());
  for (auto& v : m.config_.widths) v = r.u64();
  m.config_.num_classes = r.u64();
  m.config_.downsample_factor = r.u64();
  try {
    m.config_.validate();
  } catch (const ContractViolation& e) {
    throw DataError(std::string("checkpoint holds invalid config: ") + e.what());
  }
  const SegModel reference(m.config_, 0);
  const auto count = r.u64();
  if (count != reference.params_.size()) throw DataError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < count; ++i) {
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u64();
    if (shape != reference.params_[i].shape()) throw DataError("checkpoint parameter shape mismatch");
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.f64();
    std::vector<double> vel(values.size());
    for (auto& v : vel) v = r.f64();
    m.params_.push_back(Tensor::from(std::move(shape), std::move(values), true));
    m.velocity_.push_back(std::move(vel));
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return m;
}

void SegModel::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

SegModel SegModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void sgd_step_fixed(SegModel& model, const OptimConfig& optim, double lr) {
  auto& params = model.parameters();
  auto& vel = model.momentum_buffers();
  double scale = 1.0;
  if (optim.grad_clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& t : params) {
      if (!t.has_grad()) continue;
      for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > optim.grad_clip_norm) scale = optim.grad_clip_norm / norm;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& v = vel[i];
    const bool has = params[i].has_grad();
    std::span<const double> g = has ? params[i].grad() : std::span<const double>{};
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = has ? scale * g[j] : 0.0;
      v[j] = optim.momentum * v[j] + gj + optim.weight_decay * p[j];
      p[j] -= lr * v[j];
      if (!std::isfinite(p[j])) throw NumericError("sgd_step: parameter became non-finite");
    }
  }
  model.zero_grad();
}

void sgd_step(SegModel& model, const OptimConfig& optim, std::size_t iter) {
  if (iter >= optim.max_iters) {
    throw ContractViolation("sgd_step: iteration " + std::to_string(iter) + " beyond schedule of " +
                            std::to_string(optim.max_iters));
  }
  sgd_step_fixed(model, optim, optim.lr(iter));
}

}  // namespace covalign
