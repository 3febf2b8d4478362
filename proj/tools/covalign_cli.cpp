// covalign: gen | run | eval | diag
//
// Exit codes: 0 success, 1 internal error, 2 usage or config error,
// 3 data error (missing or malformed files), 4 numeric abort.

#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "covalign/errors.hpp"
#include "covalign/experiment.hpp"

namespace {

enum Exit : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  bool overwrite = false;
};

covalign::ExperimentConfig load_config(const Common& c) {
  covalign::ExperimentConfig cfg = c.config.empty() ? covalign::ExperimentConfig() : covalign::ExperimentConfig::load(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (!c.method.empty()) cfg.method = covalign::method_from_string(c.method);
  cfg.validate();
  return cfg;
}

void print_iou(const char* tag, const covalign::IouResult& r) { std::printf("%s mIoU %.2f\n", tag, 100.0 * r.miou); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep covariance alignment for domain-adaptive segmentation"};
  app.require_subcommand(1);

  Common gen_opts;
  auto* gen = app.add_subcommand("gen", "generate the source and target datasets");
  gen->add_option("--config", gen_opts.config, "experiment config JSON");
  gen->add_option("--seed", gen_opts.seed, "override the config seed");
  gen->add_option("--out", gen_opts.out, "dataset directory (default: config data.data_dir)");
  gen->add_flag("--overwrite", gen_opts.overwrite, "replace an existing dataset directory");

  Common run_opts;
  std::string run_data;
  auto* run = app.add_subcommand("run", "train one method and evaluate it");
  run->add_option("--config", run_opts.config, "experiment config JSON");
  run->add_option("--seed", run_opts.seed, "override the config seed");
  run->add_option("--method", run_opts.method, "source_only | st_baseline | mse_align | triplet_align | dca");
  run->add_option("--out", run_opts.out, "run output directory (default: config output_dir)");
  run->add_option("--data", run_data, "dataset directory (default: config data.data_dir)");
  run->add_flag("--overwrite", run_opts.overwrite, "replace an existing run directory");

  std::vector<std::string> eval_runs;
  std::string eval_data = "data";
  std::string eval_out;
  auto* eval = app.add_subcommand("eval", "compare finished runs on the target eval split");
  eval->add_option("runs", eval_runs, "run directories")->required();
  eval->add_option("--data", eval_data, "dataset directory");
  eval->add_option("--out", eval_out, "results CSV path (a .txt table is written next to it)");

  Common diag_opts;
  std::string diag_ckpt;
  std::string diag_data;
  auto* diag = app.add_subcommand("diag", "covariance heatmaps and feature projection for a checkpoint");
  diag->add_option("--checkpoint", diag_ckpt, "model checkpoint")->required();
  diag->add_option("--config", diag_opts.config, "experiment config JSON (for the hash and batch size)");
  diag->add_option("--data", diag_data, "dataset directory (default: config data.data_dir)");
  diag->add_option("--out", diag_opts.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      const auto cfg = load_config(gen_opts);
      const std::filesystem::path dir = gen_opts.out.empty() ? cfg.data.data_dir : std::filesystem::path(gen_opts.out);
      covalign::cmd_gen(cfg, dir, gen_opts.overwrite);
      std::printf("wrote %s (config %s)\n", dir.string().c_str(), cfg.hash().c_str());
    } else if (*run) {
      auto cfg = load_config(run_opts);
      if (!run_opts.out.empty()) cfg.output_dir = run_opts.out;
      if (!run_data.empty()) cfg.data.data_dir = run_data;
      std::printf("run %s seed %llu config %s\n", covalign::to_string(cfg.method).c_str(),
                  static_cast<unsigned long long>(cfg.train.seed), cfg.hash().c_str());
      const auto summary = covalign::cmd_run(cfg, run_opts.overwrite);
      for (const auto& r : summary.records) {
        std::printf("  stage %zu  target mIoU %s\n", r.stage,
                    r.target_miou ? std::to_string(100.0 * *r.target_miou).c_str() : "-");
      }
      print_iou("source", summary.source_eval);
      print_iou("target", summary.target_eval);
    } else if (*eval) {
      std::vector<std::filesystem::path> dirs(eval_runs.begin(), eval_runs.end());
      std::cout << covalign::cmd_eval(dirs, eval_data, eval_out);
    } else if (*diag) {
      const auto cfg = load_config(diag_opts);
      const std::filesystem::path data = diag_data.empty() ? cfg.data.data_dir : std::filesystem::path(diag_data);
      covalign::cmd_diag(diag_ckpt, data, diag_opts.out, cfg.diag_batch, cfg.hash());
      std::printf("wrote %s\n", diag_opts.out.c_str());
    }
  } catch (const covalign::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const covalign::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const covalign::NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInternal;
  }
  return kOk;
}
