#pragma once

// Procedural two-domain segmentation benchmark.
//
// Each image starts as class 0 (background). Every other class receives a
// per-image pixel budget of prior * H * W scaled by a jitter in [0.5, 1.5],
// and is painted as axis-aligned rectangles and ellipses that only cover
// still-background pixels, so painted shares track the priors. Pixel values
// are drawn from the class's per-channel normal distribution plus global
// background noise.
//
// Randomness: image i of a run seeded s uses Rng(Rng::substream(s, i)), so
// any image can be regenerated alone and in any order.
//
// On-disk layout of a domain directory:
//   manifest.json         samples, spec, seed, config hash
//   images/NNNNN.f64      "COVIMG1\n" header line, then "C H W\n", then
//                         C*H*W little-endian float64 values (channel-major)
//   labels/NNNNN.pgm      binary P5, maxval 255, value 255 = ignore

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "covalign/tensor.hpp"

namespace covalign {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct ScaleRange {
  double min = 1.0;
  double max = 1.0;
};

struct ChannelStats {
  double mean = 0.0;
  double sd = 0.0;
};

struct DomainSpec {
  std::string name = "domain";
  std::vector<double> class_priors;
  std::vector<ScaleRange> scale_range;            // per class; index 0 unused
  std::vector<std::vector<ChannelStats>> intensity;  // [class][channel]
  double background_noise_sd = 0.0;
  std::size_t image_size = 64;
  std::size_t channels = 3;

  std::size_t num_classes() const { return class_priors.size(); }
  /// Throws ConfigError on violated invariants.
  void validate() const;
};

nlohmann::json to_json(const DomainSpec& spec);
DomainSpec domain_spec_from_json(const nlohmann::json& j);

class SceneSample {
 public:
  SceneSample() = default;
  SceneSample(Tensor image, std::vector<std::uint8_t> labels, std::string domain, std::uint64_t seed);

  const Tensor& image() const { return image_; }
  /// Ground truth; every call is counted so training code can be audited.
  const std::vector<std::uint8_t>& labels() const {
    ++label_reads_;
    return labels_;
  }
  std::size_t label_reads() const { return label_reads_; }
  void reset_label_reads() const { label_reads_ = 0; }
  const std::string& domain() const { return domain_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t height() const { return image_.size(1); }
  std::size_t width() const { return image_.size(2); }

 private:
  Tensor image_;
  std::vector<std::uint8_t> labels_;
  std::string domain_;
  std::uint64_t seed_ = 0;
  mutable std::size_t label_reads_ = 0;
};

struct Dataset {
  DomainSpec spec;
  std::uint64_t seed = 0;
  std::vector<SceneSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t label_reads() const;
  void reset_label_reads() const;
};

/// Deterministic in (spec, count, seed). Image i is generated from its own substream.
std::vector<SceneSample> generate(const DomainSpec& spec, std::size_t count, std::uint64_t seed);
SceneSample generate_one(const DomainSpec& spec, std::uint64_t seed, std::size_t index);
Dataset make_dataset(const DomainSpec& spec, std::size_t count, std::uint64_t seed);

/// Source (agriculture-heavy, "rural") and target (building-heavy, "urban") specs.
std::pair<DomainSpec, DomainSpec> default_benchmark();

void write_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& config_hash);
Dataset read_dataset(const std::filesystem::path& dir);

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height,
               std::size_t width);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);
void write_image_f64(const std::filesystem::path& path, const Tensor& image);
Tensor read_image_f64(const std::filesystem::path& path);

}  // namespace covalign
