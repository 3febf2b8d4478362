#pragma once

// Experiment configuration and the command implementations behind the CLI.
//
// Config file: one JSON document, schema_version 1. Every key is optional and
// defaults to the values below. The config hash is FNV-1a 64 over the
// canonical JSON of everything except filesystem paths, printed as 16 hex
// digits; it is embedded in every artifact written by the commands.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "covalign/selftrain.hpp"

namespace covalign {

enum class Method { source_only, st_baseline, mse_align, triplet_align, dca };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
const std::vector<Method>& all_methods();

struct DataConfig {
  DomainSpec source;
  DomainSpec target;
  std::size_t train_count = 64;
  std::size_t eval_count = 32;
  std::filesystem::path data_dir = "data";
};

struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;

  Method method = Method::dca;
  TrainConfig train;
  DataConfig data;
  std::filesystem::path output_dir = "runs/experiment";
  std::size_t diag_batch = 8;
  // Alignment weights used by the mse_align and triplet_align selectors.
  double mse_weight = 1.0;
  double triplet_weight = 1.0;

  ExperimentConfig();

  /// Stage loss weights after applying the method selector. dca keeps the
  /// configured weights; the other methods override them.
  LossWeights effective_weights() const;
  TrainConfig effective_train() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string hash() const;
  void validate() const;
};

/// Both domains' datasets split into train and held-out eval parts.
struct BenchmarkData {
  Dataset source_train, source_eval, target_train, target_eval;
};

/// Generates in memory, deterministically from the config seed.
BenchmarkData generate_benchmark(const ExperimentConfig& cfg);
/// Writes <dir>/source and <dir>/target. Refuses a non-empty dir unless overwrite.
void cmd_gen(const ExperimentConfig& cfg, const std::filesystem::path& dir, bool overwrite);
BenchmarkData load_benchmark(const std::filesystem::path& dir);

struct RunSummary {
  std::vector<StageRecord> records;
  IouResult source_eval, target_eval;
  std::filesystem::path final_checkpoint;
};

/// Trains the selected method on the datasets under cfg.data.data_dir and
/// writes checkpoints, trace.csv, stages.csv, results.csv and results.txt.
RunSummary cmd_run(const ExperimentConfig& cfg, bool overwrite);

/// Evaluates each run directory's final checkpoint on the target eval split and
/// writes a per-method comparison table.
std::string cmd_eval(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_file);

struct DiagResult {
  CorrMatrix source_source;
  CorrMatrix source_target;
  Projection projection;
  std::vector<std::string> projection_domains;
};

/// Pools category features of two disjoint source groups and one target group
/// of `batch` eval images each, and projects per-batch category features.
DiagResult diagnose(const SegModel& model, const BenchmarkData& data, std::size_t batch);
void cmd_diag(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
              const std::filesystem::path& out_dir, std::size_t batch, const std::string& config_hash);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path,
                     const std::string& config_hash);
void write_stages_csv(const std::vector<StageRecord>& records, const std::filesystem::path& path,
                      const std::string& config_hash);

std::vector<std::string> class_names(std::size_t n);

}  // namespace covalign
