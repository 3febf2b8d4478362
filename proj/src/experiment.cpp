#include "covalign/experiment.hpp"

#include <cstdio>
#include <fstream>

#include "covalign/benchmark_constants.hpp"
#include "covalign/errors.hpp"
#include "covalign/rng.hpp"

namespace covalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSourceDataStream = 0x50;
constexpr std::uint64_t kTargetDataStream = 0x7A;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_cell(const std::optional<double>& v) { return v ? fmt17(*v) : std::string(); }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json spec_json(const DomainSpec& s) { return covalign::to_json(s); }

DomainSpec spec_from(const json& j, const DomainSpec& fallback) {
  if (j.is_string()) {
    if (j.get<std::string>() != "default") throw ConfigError("unknown built-in domain spec '" + j.get<std::string>() + "'");
    return fallback;
  }
  return domain_spec_from_json(j);
}

Dataset slice(const Dataset& d, std::size_t begin, std::size_t end) {
  Dataset out{d.spec, d.seed, {}};
  out.samples.assign(d.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                     d.samples.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

void write_domain(const Dataset& all, std::size_t train_count, const fs::path& dir, const std::string& hash) {
  write_dataset(all, dir, hash);
  // Record the split point alongside the samples.
  std::ifstream in(dir / "manifest.json");
  json manifest;
  in >> manifest;
  in.close();
  manifest["train_count"] = train_count;
  for (std::size_t i = 0; i < manifest["samples"].size(); ++i) {
    manifest["samples"][i]["split"] = i < train_count ? "train" : "eval";
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
}

std::pair<Dataset, Dataset> read_domain(const fs::path& dir) {
  Dataset all = read_dataset(dir);
  std::ifstream in(dir / "manifest.json");
  json manifest;
  in >> manifest;
  const std::size_t train = manifest.value("train_count", all.size());
  if (train > all.size()) throw DataError("train_count exceeds sample count in " + dir.string());
  return {slice(all, 0, train), slice(all, train, all.size())};
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::source_only: return "source_only";
    case Method::st_baseline: return "st_baseline";
    case Method::mse_align: return "mse_align";
    case Method::triplet_align: return "triplet_align";
    case Method::dca: return "dca";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  for (Method m : all_methods()) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected source_only, st_baseline, mse_align, triplet_align, dca)");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::source_only, Method::st_baseline, Method::mse_align,
                                           Method::triplet_align, Method::dca};
  return methods;
}

std::vector<std::string> class_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) {
    names.push_back(n == benchmark::kClasses ? benchmark::kClassNames[i] : "class" + std::to_string(i));
  }
  return names;
}

ExperimentConfig::ExperimentConfig() {
  auto [src, tgt] = default_benchmark();
  data.source = std::move(src);
  data.target = std::move(tgt);
  train.model.num_classes = data.source.num_classes();
  train.model.in_channels = data.source.channels;
}

LossWeights ExperimentConfig::effective_weights() const {
  LossWeights w;
  switch (method) {
    case Method::source_only: w = {1, 0, 0, 0, 0, 0}; break;
    case Method::st_baseline: w = {1, 1, 0, 0, 0, 0}; break;
    case Method::mse_align: w = {1, 1, 0, 0, mse_weight, 0}; break;
    case Method::triplet_align: w = {1, 1, 0, 0, 0, triplet_weight}; break;
    case Method::dca: w = train.stage.weights; break;
  }
  return w;
}

TrainConfig ExperimentConfig::effective_train() const {
  TrainConfig t = train;
  t.stage.weights = effective_weights();
  return t;
}

json ExperimentConfig::to_json() const {
  const auto& m = train.model;
  const auto& o = train.optim;
  const auto& s = train.stage;
  const auto& w = s.weights;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = to_string(method);
  j["seed"] = train.seed;
  j["output_dir"] = output_dir.string();
  j["diag_batch"] = diag_batch;
  j["model"] = {{"in_channels", m.in_channels},
                {"widths", m.widths},
                {"num_classes", m.num_classes},
                {"downsample_factor", m.downsample_factor}};
  j["optim"] = {{"base_lr", o.base_lr}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay},
                {"poly_power", o.poly_power}, {"grad_clip_norm", o.grad_clip_norm}};
  j["stage"] = {{"max_stages", s.max_stages},
                {"iters_per_stage", s.iters_per_stage},
                {"pretrain_iters", s.pretrain_iters},
                {"batch_size", s.batch_size},
                {"pretrain_icr_weight", s.pretrain_icr_weight},
                {"pretrain_icr_warmup", s.pretrain_icr_warmup},
                {"pseudo_confidence_threshold",
                 s.pseudo_confidence_threshold ? json(*s.pseudo_confidence_threshold) : json(nullptr)},
                {"loss_weights",
                 {{"ce_source", w.ce_source},
                  {"ce_target", w.ce_target},
                  {"icr", w.icr},
                  {"ccr", w.ccr},
                  {"mse", w.mse},
                  {"triplet", w.triplet}}}};
  j["baseline_weights"] = {{"mse", mse_weight}, {"triplet", triplet_weight}};
  j["cr"] = {{"epsilon", train.cr.epsilon}, {"sigma_floor", train.cr.sigma_floor},
             {"triplet_margin", train.cr.triplet_margin}};
  j["data"] = {{"source_spec", spec_json(data.source)},
               {"target_spec", spec_json(data.target)},
               {"train_count", data.train_count},
               {"eval_count", data.eval_count},
               {"data_dir", data.data_dir.string()}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion) {
      throw ConfigError("unsupported config schema_version " + j.at("schema_version").dump());
    }
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    read_opt(j, "seed", c.train.seed);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read_opt(j, "diag_batch", c.diag_batch);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      const auto [src, tgt] = default_benchmark();
      if (d.contains("source_spec")) c.data.source = spec_from(d.at("source_spec"), src);
      if (d.contains("target_spec")) c.data.target = spec_from(d.at("target_spec"), tgt);
      read_opt(d, "train_count", c.data.train_count);
      read_opt(d, "eval_count", c.data.eval_count);
      if (d.contains("data_dir")) c.data.data_dir = d.at("data_dir").get<std::string>();
    }
    c.train.model.num_classes = c.data.source.num_classes();
    c.train.model.in_channels = c.data.source.channels;
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_opt(m, "in_channels", c.train.model.in_channels);
      read_opt(m, "widths", c.train.model.widths);
      read_opt(m, "num_classes", c.train.model.num_classes);
      read_opt(m, "downsample_factor", c.train.model.downsample_factor);
    }
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      read_opt(o, "base_lr", c.train.optim.base_lr);
      read_opt(o, "momentum", c.train.optim.momentum);
      read_opt(o, "weight_decay", c.train.optim.weight_decay);
      read_opt(o, "poly_power", c.train.optim.poly_power);
      read_opt(o, "grad_clip_norm", c.train.optim.grad_clip_norm);
    }
    if (j.contains("stage")) {
      const auto& s = j.at("stage");
      auto& st = c.train.stage;
      read_opt(s, "max_stages", st.max_stages);
      read_opt(s, "iters_per_stage", st.iters_per_stage);
      read_opt(s, "pretrain_iters", st.pretrain_iters);
      read_opt(s, "batch_size", st.batch_size);
      read_opt(s, "pretrain_icr_weight", st.pretrain_icr_weight);
      read_opt(s, "pretrain_icr_warmup", st.pretrain_icr_warmup);
      if (s.contains("pseudo_confidence_threshold") && !s.at("pseudo_confidence_threshold").is_null()) {
        st.pseudo_confidence_threshold = s.at("pseudo_confidence_threshold").get<double>();
      }
      if (s.contains("loss_weights")) {
        const auto& w = s.at("loss_weights");
        read_opt(w, "ce_source", st.weights.ce_source);
        read_opt(w, "ce_target", st.weights.ce_target);
        read_opt(w, "icr", st.weights.icr);
        read_opt(w, "ccr", st.weights.ccr);
        read_opt(w, "mse", st.weights.mse);
        read_opt(w, "triplet", st.weights.triplet);
      }
    }
    if (j.contains("baseline_weights")) {
      read_opt(j.at("baseline_weights"), "mse", c.mse_weight);
      read_opt(j.at("baseline_weights"), "triplet", c.triplet_weight);
    }
    if (j.contains("cr")) {
      const auto& r = j.at("cr");
      read_opt(r, "epsilon", c.train.cr.epsilon);
      read_opt(r, "sigma_floor", c.train.cr.sigma_floor);
      read_opt(r, "triplet_margin", c.train.cr.triplet_margin);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  j["data"].erase("data_dir");
  const std::string canon = j.dump();
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  try {
    train.model.validate();
    train.stage.validate();
    train.cr.validate();
    OptimConfig o = train.optim;
    o.max_iters = 1;
    o.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  if (!(mse_weight >= 0.0) || !(triplet_weight >= 0.0)) throw ConfigError("baseline weights must be non-negative");
  data.source.validate();
  data.target.validate();
  if (data.source.num_classes() != data.target.num_classes() || data.source.num_classes() != train.model.num_classes) {
    throw ConfigError("source spec, target spec and model must agree on the class count");
  }
  if (data.source.channels != train.model.in_channels || data.target.channels != train.model.in_channels) {
    throw ConfigError("domain channel count must equal model in_channels");
  }
  if (data.train_count == 0) throw ConfigError("data.train_count must be at least 1");
  if (diag_batch < 2) throw ConfigError("diag_batch must be at least 2");
}

BenchmarkData generate_benchmark(const ExperimentConfig& cfg) {
  const std::size_t total = cfg.data.train_count + cfg.data.eval_count;
  const Dataset src = make_dataset(cfg.data.source, total, Rng::substream(cfg.train.seed, kSourceDataStream));
  const Dataset tgt = make_dataset(cfg.data.target, total, Rng::substream(cfg.train.seed, kTargetDataStream));
  const std::size_t n = cfg.data.train_count;
  return {slice(src, 0, n), slice(src, n, total), slice(tgt, 0, n), slice(tgt, n, total)};
}

void cmd_gen(const ExperimentConfig& cfg, const fs::path& dir, bool overwrite) {
  cfg.validate();
  if (non_empty_dir(dir) && !overwrite) {
    throw ConfigError("output directory " + dir.string() + " is not empty (pass --overwrite)");
  }
  if (overwrite) {
    fs::remove_all(dir / "source");
    fs::remove_all(dir / "target");
  }
  const std::size_t total = cfg.data.train_count + cfg.data.eval_count;
  const std::string hash = cfg.hash();
  const Dataset src = make_dataset(cfg.data.source, total, Rng::substream(cfg.train.seed, kSourceDataStream));
  const Dataset tgt = make_dataset(cfg.data.target, total, Rng::substream(cfg.train.seed, kTargetDataStream));
  write_domain(src, cfg.data.train_count, dir / "source", hash);
  write_domain(tgt, cfg.data.train_count, dir / "target", hash);
}

BenchmarkData load_benchmark(const fs::path& dir) {
  auto [src_train, src_eval] = read_domain(dir / "source");
  auto [tgt_train, tgt_eval] = read_domain(dir / "target");
  return {std::move(src_train), std::move(src_eval), std::move(tgt_train), std::move(tgt_eval)};
}

void write_trace_csv(const std::vector<TraceRow>& trace, const fs::path& path, const std::string& config_hash) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "stage,iter,L_CE_s,L_CE_t,L_ICR,L_CCR,lr,L_MSE,L_triplet\n";
  for (const auto& r : trace) {
    out << r.stage << ',' << r.iter << ',' << opt_cell(r.ce_source) << ',' << opt_cell(r.ce_target) << ','
        << opt_cell(r.icr) << ',' << opt_cell(r.ccr) << ',' << fmt17(r.lr) << ',' << opt_cell(r.mse) << ','
        << opt_cell(r.triplet) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

void write_stages_csv(const std::vector<StageRecord>& records, const fs::path& path, const std::string& config_hash) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << '\n';
  out << "stage,mean_L_CE_s,mean_L_CE_t,mean_L_ICR,mean_L_CCR,source_mIoU,target_mIoU,pseudo_digest\n";
  for (const auto& r : records) {
    char digest[17];
    std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(r.pseudo_digest_start));
    out << r.stage << ',' << fmt17(r.mean_ce_source) << ',' << fmt17(r.mean_ce_target) << ',' << fmt17(r.mean_icr)
        << ',' << fmt17(r.mean_ccr) << ',' << opt_cell(r.source_miou) << ',' << opt_cell(r.target_miou) << ','
        << (r.stage == 0 ? "" : digest) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

RunSummary cmd_run(const ExperimentConfig& cfg, bool overwrite) {
  cfg.validate();
  const std::string hash = cfg.hash();
  const fs::path out = cfg.output_dir;
  if (non_empty_dir(out) && !overwrite) {
    throw ConfigError("output directory " + out.string() + " is not empty (pass --overwrite) [config " + hash + "]");
  }
  BenchmarkData data;
  try {
    data = load_benchmark(cfg.data.data_dir);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " [config " + hash + "]");
  }
  if (overwrite) fs::remove_all(out);
  fs::create_directories(out / "checkpoints");
  {
    auto cfg_out = open_out(out / "config.json");
    json j = cfg.to_json();
    j["config_hash"] = hash;
    cfg_out << j.dump(2) << '\n';
  }

  const TrainConfig train = cfg.effective_train();
  const EvalSets eval{&data.source_eval, data.target_eval.size() ? &data.target_eval : nullptr};
  auto hook = [&](std::size_t stage, const SegModel& model) {
    model.save(out / "checkpoints" / (stage == 0 ? std::string("pretrain.ckpt") : "stage_" + std::to_string(stage) + ".ckpt"));
  };
  RunResult result = [&] {
    try {
      return run_selftraining(data.source_train, data.target_train, train, eval, hook);
    } catch (const NumericError& e) {
      throw TrainingAborted(std::string(e.what()) + " [config " + hash + "]");
    }
  }();
  if (data.target_train.label_reads() != 0) {
    throw ContractViolation("target ground truth was read during training [config " + hash + "]");
  }

  RunSummary summary;
  summary.records = result.records;
  summary.final_checkpoint = out / "checkpoints" / "final.ckpt";
  result.model.save(summary.final_checkpoint);
  summary.source_eval = iou(evaluate(result.model, data.source_eval));
  if (data.target_eval.size()) summary.target_eval = iou(evaluate(result.model, data.target_eval));

  write_trace_csv(result.trace, out / "trace.csv", hash);
  write_stages_csv(result.records, out / "stages.csv", hash);
  const auto names = class_names(cfg.train.model.num_classes);
  const std::vector<ResultRow> rows{{to_string(cfg.method) + " (target)", summary.target_eval},
                                    {to_string(cfg.method) + " (source)", summary.source_eval}};
  write_results_csv(rows, names, out / "results.csv", hash);
  auto txt = open_out(out / "results.txt");
  txt << "# config_hash=" << hash << '\n' << results_table_text(rows, names);
  return summary;
}

std::string cmd_eval(const std::vector<fs::path>& run_dirs, const fs::path& data_dir, const fs::path& out_file) {
  if (run_dirs.empty()) throw ConfigError("eval: no run directories given");
  const BenchmarkData data = load_benchmark(data_dir);
  std::vector<ResultRow> rows;
  std::size_t n = 0;
  std::string hashes;
  for (const auto& dir : run_dirs) {
    const ExperimentConfig cfg = ExperimentConfig::load(dir / "config.json");
    const SegModel model = SegModel::load(dir / "checkpoints" / "final.ckpt");
    n = model.config().num_classes;
    const Dataset& target = data.target_eval.size() ? data.target_eval : data.target_train;
    rows.push_back({to_string(cfg.method), iou(evaluate(model, target))});
    hashes += (hashes.empty() ? "" : ";") + cfg.hash();
  }
  const auto names = class_names(n);
  const std::string table = results_table_text(rows, names);
  if (!out_file.empty()) {
    write_results_csv(rows, names, out_file, hashes);
    auto txt = open_out(fs::path(out_file).replace_extension(".txt"));
    txt << "# config_hash=" << hashes << '\n' << table;
  }
  return table;
}

DiagResult diagnose(const SegModel& model, const BenchmarkData& data, std::size_t batch) {
  const Dataset& src = data.source_eval.size() >= 2 * batch ? data.source_eval : data.source_train;
  const Dataset& tgt = data.target_eval.size() >= batch ? data.target_eval : data.target_train;
  if (src.size() < 2 * batch || tgt.size() < batch) throw DataError("diag: not enough images for the diagnostic batch");

  NoGradGuard no_grad;
  auto pool_range = [&](const Dataset& d, std::size_t begin, std::size_t end) {
    std::vector<Tensor> feats, probs;
    for (std::size_t i = begin; i < end; ++i) {
      const SegForward f = model.forward(d.samples[i].image());
      feats.push_back(f.features);
      probs.push_back(softmax_channel(f.low_logits));
    }
    return pool(feats, probs);
  };
  DiagResult out;
  const CategoryFeatures s1 = pool_range(src, 0, batch);
  const CategoryFeatures s2 = pool_range(src, batch, 2 * batch);
  const CategoryFeatures t1 = pool_range(tgt, 0, batch);
  out.source_source = pearson_matrix(s1, s2);
  out.source_target = pearson_matrix(s1, t1);

  // Per-image category features of both domains for the 2-D scatter.
  std::vector<std::vector<double>> vecs;
  std::vector<int> labels;
  auto collect = [&](const Dataset& d, std::size_t count, const char* domain) {
    for (std::size_t i = 0; i < count; ++i) {
      const CategoryFeatures f = pool_range(d, i, i + 1);
      const std::size_t c = f.f.size(1);
      for (std::size_t k = 0; k < f.num_categories(); ++k) {
        if (!f.valid[k]) continue;
        vecs.emplace_back(f.f.data().begin() + static_cast<std::ptrdiff_t>(k * c),
                          f.f.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * c));
        labels.push_back(static_cast<int>(k));
        out.projection_domains.emplace_back(domain);
      }
    }
  };
  collect(src, 2 * batch, "source");
  collect(tgt, batch, "target");
  if (vecs.size() >= 2) out.projection = feature_projection_2d(vecs, labels);
  return out;
}

void cmd_diag(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir, std::size_t batch,
              const std::string& config_hash) {
  const SegModel model = SegModel::load(checkpoint);
  const BenchmarkData data = load_benchmark(data_dir);
  const DiagResult d = diagnose(model, data, batch);
  const auto names = class_names(model.config().num_classes);
  fs::create_directories(out_dir);
  write_corr_csv(d.source_source, names, out_dir / "corr_source_source.csv", config_hash);
  write_corr_csv(d.source_target, names, out_dir / "corr_source_target.csv", config_hash);
  auto out = open_out(out_dir / "projection.csv");
  out << "# config_hash=" << config_hash << '\n';
  out << "x,y,label,domain\n";
  for (std::size_t i = 0; i < d.projection.points.size(); ++i) {
    const auto& p = d.projection.points[i];
    out << fmt17(p.x) << ',' << fmt17(p.y) << ',' << names[static_cast<std::size_t>(p.label)] << ','
        << d.projection_domains[i] << '\n';
  }
  if (!out) throw DataError("failed writing projection.csv");
}

}  // namespace covalign
