#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smope/config.hpp"
#include "smope/continual.hpp"
#include "smope/theory.hpp"

namespace smope {

struct ExperimentConfig {
  std::string mode = "continual";  // continual | ablation | noise-sweep | rate
  std::vector<int> seeds{0};
  std::string out_dir = "runs/out";
  int threads = 2;

  ModelConfig model;
  StreamSpec stream;
  PretrainSpec pretrain;
  PipelineConfig pipeline;
  std::vector<double> sweep_epsilons{0.0, 0.4, 1.0};
  RateConfig rate;

  std::string raw_text;  // verbatim config, copied into the run directory
};

// Parses and validates; unknown keys are rejected with file:line anchors.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const ConfigFile& file);

void override_seed(ExperimentConfig& cfg, int seed);
void override_out(ExperimentConfig& cfg, const std::string& out);
void override_mode(ExperimentConfig& cfg, const std::string& mode);

// Result of one continual pipeline run (one seed, one variant).
struct ContinualRunResult {
  int seed = 0;
  std::string variant = "full";
  double epsilon = 0.0;
  AccuracyMatrix acc{0};
  std::vector<TaskTrainSummary> task_summaries;
  double faa = 0.0, caa = 0.0;
  // Usage-entropy snapshots after each task, flattened (layer * heads + head).
  std::vector<std::vector<double>> entropy_per_task;
  std::vector<Vector> final_frequencies;  // per (layer, head), layer-major
  int layers = 0, heads = 0;
};

ContinualRunResult run_continual_once(const ExperimentConfig& cfg, const PipelineConfig& pc,
                                      int seed, const std::string& variant, double epsilon_tag);

double mean_final_entropy(const ContinualRunResult& run);

// Executes the configured experiment, writes all artifact files under
// cfg.out_dir, and prints a one-screen summary. Throws on runtime failure.
void run_experiment(const ExperimentConfig& cfg);

// Rebuilds the human-readable report and plot-ready TSV files from a run
// directory. Deterministic and idempotent; missing inputs raise ConfigError
// naming every expected file.
void emit_report(const std::string& run_dir);

}  // namespace smope
