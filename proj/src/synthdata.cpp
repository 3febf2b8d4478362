#include "covalign/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "covalign/benchmark_constants.hpp"
#include "covalign/errors.hpp"
#include "covalign/rng.hpp"

namespace covalign {

namespace fs = std::filesystem;

void DomainSpec::validate() const {
  const std::size_t n = num_classes();
  if (n < 2) throw ConfigError("DomainSpec '" + name + "': need at least 2 classes");
  if (n > 255) throw ConfigError("DomainSpec '" + name + "': at most 255 classes fit the label format");
  if (image_size == 0 || channels == 0) throw ConfigError("DomainSpec '" + name + "': empty image geometry");
  if (scale_range.size() != n || intensity.size() != n) {
    throw ConfigError("DomainSpec '" + name + "': per-class tables must have one entry per class");
  }
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    if (!(class_priors[c] >= 0.0)) throw ConfigError("DomainSpec '" + name + "': negative class prior");
    total += class_priors[c];
    if (intensity[c].size() != channels) {
      throw ConfigError("DomainSpec '" + name + "': intensity table needs one entry per channel");
    }
    for (const auto& s : intensity[c]) {
      if (!(s.sd >= 0.0)) throw ConfigError("DomainSpec '" + name + "': negative intensity sd");
    }
    if (c == 0) continue;
    const auto& r = scale_range[c];
    if (!(r.min > 0.0 && r.min <= r.max && r.max <= static_cast<double>(image_size))) {
      throw ConfigError("DomainSpec '" + name + "': scale range of class " + std::to_string(c) +
                        " must lie in (0, image_size]");
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("DomainSpec '" + name + "': class priors must sum to 1");
  if (!(background_noise_sd >= 0.0)) throw ConfigError("DomainSpec '" + name + "': negative background noise");
}

nlohmann::json to_json(const DomainSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["class_priors"] = spec.class_priors;
  j["image_size"] = spec.image_size;
  j["channels"] = spec.channels;
  j["background_noise_sd"] = spec.background_noise_sd;
  auto& scales = j["scale_range"] = nlohmann::json::array();
  for (const auto& r : spec.scale_range) scales.push_back({r.min, r.max});
  auto& inten = j["intensity"] = nlohmann::json::array();
  for (const auto& cls : spec.intensity) {
    auto row = nlohmann::json::array();
    for (const auto& s : cls) row.push_back({{"mean", s.mean}, {"sd", s.sd}});
    inten.push_back(row);
  }
  return j;
}

DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  DomainSpec spec;
  try {
    spec.name = j.value("name", std::string("domain"));
    spec.class_priors = j.at("class_priors").get<std::vector<double>>();
    spec.image_size = j.value("image_size", std::size_t{64});
    spec.channels = j.value("channels", std::size_t{3});
    spec.background_noise_sd = j.value("background_noise_sd", 0.0);
    for (const auto& r : j.at("scale_range")) spec.scale_range.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
    for (const auto& cls : j.at("intensity")) {
      std::vector<ChannelStats> row;
      for (const auto& s : cls) row.push_back({s.at("mean").get<double>(), s.at("sd").get<double>()});
      spec.intensity.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed domain spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SceneSample::SceneSample(Tensor image, std::vector<std::uint8_t> labels, std::string domain, std::uint64_t seed)
    : image_(std::move(image)), labels_(std::move(labels)), domain_(std::move(domain)), seed_(seed) {
  if (image_.dim() != 3 || labels_.size() != image_.size(1) * image_.size(2)) {
    throw ContractViolation("SceneSample: label map does not match image extent");
  }
}

std::size_t Dataset::label_reads() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.label_reads();
  return n;
}

void Dataset::reset_label_reads() const {
  for (const auto& s : samples) s.reset_label_reads();
}

namespace {

void check_placeable(const DomainSpec& spec) {
  const double area = static_cast<double>(spec.image_size * spec.image_size);
  for (std::size_t c = 1; c < spec.num_classes(); ++c) {
    if (spec.class_priors[c] <= 0.0) continue;
    const double smallest = spec.scale_range[c].min * spec.scale_range[c].min;
    // One minimal object may not exceed twice the class's expected area.
    if (smallest > 2.0 * spec.class_priors[c] * area) {
      throw DataError("DomainSpec '" + spec.name + "': class " + std::to_string(c) + " with prior " +
                      std::to_string(spec.class_priors[c]) + " cannot place any object of minimum extent " +
                      std::to_string(spec.scale_range[c].min));
    }
  }
}

// Paints one shape of class c over background pixels; returns pixels painted.
std::size_t paint_shape(std::vector<std::uint8_t>& labels, std::size_t size, std::uint8_t c, double w, double h,
                        double cx, double cy, bool ellipse) {
  std::size_t painted = 0;
  const double hx = w / 2.0, hy = h / 2.0;
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - hy));
  const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + hy));
  const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - hx));
  const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + hx));
  const auto n = static_cast<std::ptrdiff_t>(size);
  for (auto y = std::max<std::ptrdiff_t>(y0, 0); y < std::min(y1, n); ++y) {
    for (auto x = std::max<std::ptrdiff_t>(x0, 0); x < std::min(x1, n); ++x) {
      const double px = static_cast<double>(x) + 0.5 - cx;
      const double py = static_cast<double>(y) + 0.5 - cy;
      const bool inside = ellipse ? (px * px) / (hx * hx) + (py * py) / (hy * hy) <= 1.0
                                  : std::abs(px) <= hx && std::abs(py) <= hy;
      auto& cell = labels[static_cast<std::size_t>(y * n + x)];
      if (inside && cell == 0) {
        cell = c;
        ++painted;
      }
    }
  }
  return painted;
}

}  // namespace

SceneSample generate_one(const DomainSpec& spec, std::uint64_t seed, std::size_t index) {
  const std::size_t size = spec.image_size, area = size * size, n = spec.num_classes();
  const std::uint64_t stream = Rng::substream(seed, index);
  Rng rng(stream);

  std::vector<double> deficit(n, 0.0);
  for (std::size_t c = 1; c < n; ++c) deficit[c] = spec.class_priors[c] * static_cast<double>(area) * rng.uniform(0.5, 1.5);

  std::vector<std::uint8_t> labels(area, 0);
  std::vector<std::size_t> order(n - 1);
  std::iota(order.begin(), order.end(), std::size_t{1});
  std::vector<int> misses(n, 0);
  constexpr int kMaxMisses = 64;
  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (const std::size_t c : order) {
      if (deficit[c] <= 0.0 || misses[c] >= kMaxMisses) continue;
      const auto& r = spec.scale_range[c];
      double w = rng.uniform(r.min, r.max);
      double h = rng.uniform(r.min, r.max);
      const bool ellipse = rng.uniform() < 0.5;
      const double shape_area = w * h * (ellipse ? 0.7853981633974483 : 1.0);
      if (shape_area > deficit[c]) {
        const double shrink = std::max(std::sqrt(deficit[c] / shape_area), r.min / std::min(w, h));
        w *= std::min(shrink, 1.0);
        h *= std::min(shrink, 1.0);
      }
      const double cx = rng.uniform(0.0, static_cast<double>(size));
      const double cy = rng.uniform(0.0, static_cast<double>(size));
      const std::size_t painted = paint_shape(labels, size, static_cast<std::uint8_t>(c), w, h, cx, cy, ellipse);
      if (painted == 0) {
        ++misses[c];
      } else {
        deficit[c] -= static_cast<double>(painted);
      }
      progress = true;
    }
  }

  std::vector<double> pixels(spec.channels * area);
  for (std::size_t k = 0; k < area; ++k) {
    const auto& stats = spec.intensity[labels[k]];
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      const double v = rng.normal(stats[ch].mean, stats[ch].sd);
      pixels[ch * area + k] = v + spec.background_noise_sd * rng.normal();
    }
  }
  return SceneSample(Tensor::from({spec.channels, size, size}, std::move(pixels)), std::move(labels), spec.name,
                     stream);
}

std::vector<SceneSample> generate(const DomainSpec& spec, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractViolation("generate: count must be at least 1");
  spec.validate();
  check_placeable(spec);
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(spec, seed, i));
  return out;
}

Dataset make_dataset(const DomainSpec& spec, std::size_t count, std::uint64_t seed) {
  return Dataset{spec, seed, generate(spec, count, seed)};
}

std::pair<DomainSpec, DomainSpec> default_benchmark() {
  using namespace benchmark;
  auto build = [](const char* name, const auto& priors, const auto& scale, const auto& means) {
    DomainSpec s;
    s.name = name;
    s.image_size = kImageSize;
    s.channels = kChannels;
    s.background_noise_sd = kNoiseSd;
    for (std::size_t c = 0; c < kClasses; ++c) {
      s.class_priors.push_back(priors[c]);
      s.scale_range.push_back({scale[c][0], scale[c][1]});
      std::vector<ChannelStats> row;
      for (std::size_t ch = 0; ch < kChannels; ++ch) row.push_back({means[c][ch], kClassSd});
      s.intensity.push_back(std::move(row));
    }
    return s;
  };
  return {build("source", kSourcePriors, kSourceScale, kSourceMeans),
          build("target", kTargetPriors, kTargetScale, kTargetMeans)};
}

// ---------------------------------------------------------------------------
// I/O

void write_pgm(const fs::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height, std::size_t width) {
  if (pixels.size() != height * width) throw ContractViolation("write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || width == 0 || height == 0) throw DataError("not an 8-bit P5 file: " + path.string());
  in.get();
  std::vector<std::uint8_t> pixels(width * height);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!in) throw DataError("truncated PGM: " + path.string());
  return pixels;
}

void write_image_f64(const fs::path& path, const Tensor& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "COVIMG1\n" << image.size(0) << ' ' << image.size(1) << ' ' << image.size(2) << '\n';
  std::vector<unsigned char> buf(image.numel() * 8);
  const auto d = image.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(d[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

Tensor read_image_f64(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  std::size_t c = 0, h = 0, w = 0;
  in >> magic >> c >> h >> w;
  if (magic != "COVIMG1" || c == 0 || h == 0 || w == 0) throw DataError("bad image header: " + path.string());
  in.get();
  std::vector<unsigned char> buf(c * h * w * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("truncated image: " + path.string());
  std::vector<double> values(c * h * w);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return Tensor::from({c, h, w}, std::move(values));
}

namespace {
std::string sample_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}
}  // namespace

void write_dataset(const Dataset& data, const fs::path& dir, const std::string& config_hash) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  nlohmann::json manifest;
  manifest["format"] = "covalign-dataset";
  manifest["version"] = 1;
  manifest["config_hash"] = config_hash;
  manifest["seed"] = data.seed;
  manifest["spec"] = to_json(data.spec);
  auto& list = manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const std::string stem = sample_stem(i);
    write_image_f64(dir / "images" / (stem + ".f64"), s.image());
    write_pgm(dir / "labels" / (stem + ".pgm"), s.labels(), s.height(), s.width());
    s.reset_label_reads();
    list.push_back({{"index", i},
                    {"image", "images/" + stem + ".f64"},
                    {"labels", "labels/" + stem + ".pgm"},
                    {"seed", s.seed()}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  Dataset data;
  try {
    data.spec = domain_spec_from_json(manifest.at("spec"));
    data.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& entry : manifest.at("samples")) {
      Tensor image = read_image_f64(dir / entry.at("image").get<std::string>());
      std::size_t h = 0, w = 0;
      auto labels = read_pgm(dir / entry.at("labels").get<std::string>(), h, w);
      if (h != image.size(1) || w != image.size(2)) throw DataError("label/image extent mismatch in " + dir.string());
      data.samples.emplace_back(std::move(image), std::move(labels), data.spec.name,
                                entry.at("seed").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest spec invalid: ") + e.what());
  }
  return data;
}

}  // namespace covalign
