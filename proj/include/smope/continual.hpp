#pragma once

#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "smope/model.hpp"
#include "smope/objectives.hpp"

namespace smope {

struct StreamSpec {
  int tasks = 5;
  int classes_per_task = 2;
  int clusters_per_class = 2;
  int token_rows = 4;
  int token_cols = 2;
  int raw_dim = 8;
  double noise_scale = 0.5;
  double cluster_spread = 1.0;
  int train_per_class = 200;
  int val_per_class = 40;
  int test_per_class = 100;

  int tokens() const { return token_rows * token_cols; }
  int total_classes() const { return tasks * classes_per_task; }
  void validate() const;
};

struct TaskData {
  std::vector<int> classes;  // global ids, disjoint across tasks
  std::vector<Sample> train, val, test;
};

struct TaskStream {
  StreamSpec spec;
  std::vector<TaskData> tasks;
};

// Class-conditional Gaussian-mixture feature grids, deterministic per seed.
// Label spaces of different tasks are disjoint by construction.
TaskStream generate_task_stream(const StreamSpec& spec, std::uint64_t seed);

// Population mean/covariance of one class's representations plus a trace-
// scaled ridge (1e-4 * trace/dim, falling back to 1e-4 under zero scatter).
GaussianStats estimate_class_gaussian(const std::vector<Vector>& reps);
std::map<int, GaussianStats> estimate_class_gaussians(
    const std::map<int, std::vector<Vector>>& reps_by_class);

// Draws `count` pseudo-representations via a Cholesky factor; escalates the
// ridge (with a warning) if the covariance does not factor.
Matrix sample_pseudo_reps(const GaussianStats& stats, int count, Rng& rng);

// Lower-triangular accuracy bookkeeping: entry (t, i) holds the accuracy on
// task i after learning task t (both 1-based in the accessors).
struct AccuracyMatrix {
  explicit AccuracyMatrix(int tasks_total = 0)
      : tasks(tasks_total),
        s(Matrix::Constant(tasks_total, tasks_total, std::numeric_limits<double>::quiet_NaN())) {}
  int tasks;
  Matrix s;
  double at(int task_i, int stage_t) const { return s(stage_t - 1, task_i - 1); }
  void set(int task_i, int stage_t, double v) { s(stage_t - 1, task_i - 1) = v; }
  double average_at_stage(int stage_t) const;
};

// (FAA, CAA): final average accuracy and the mean of the per-stage averages.
std::pair<double, double> faa_caa(const AccuracyMatrix& acc);

struct PipelineConfig {
  int epochs = 10;  // E: sparse-phase epochs; warmup uses E/2, TAP uses E
  int batch = 32;
  double lr = 1e-3;
  AttentionMode attention = AttentionMode::kProxy;
  bool sparse = true;  // false: all experts stay active (dense proxy)
  NoiseConfig noise{0.4, NoiseMode::kAdaptive};
  double alpha_router = 1e-4;
  double alpha_proto = 1e-4;
  bool tap = true;
  int tap_samples = 64;  // pseudo-representations per class per epoch
  bool dense_warmup = true;
};

struct TaskTrainSummary {
  double ce = 0.0;      // final-epoch mean
  double router = 0.0;  // value-level router loss, final epoch
  double proto = 0.0;
};

// One full task pass: snapshot + prototype build (t > 1), dense warmup
// (t = 1), the main training phase, Gaussian estimation, task-adaptive head
// refinement, then the evaluation-mode usage pass. Only the current task's
// samples are ever visible here.
TaskTrainSummary train_task(LearnerState& state, const TaskData& task, const PipelineConfig& pc,
                            Rng& rng);

// Head-only refinement on pseudo-representations drawn in equal numbers per
// seen class; prompts are untouched.
void tap_refine(LearnerState& state, int epochs, int samples_per_class, double lr, int batch,
                Rng& rng);

// Fills row `stage_t` of the accuracy matrix (class-incremental: predictions
// over all seen classes, no task identity).
void evaluate(LearnerState& state, const TaskStream& stream, int stage_t, AccuracyMatrix& acc);

struct PretrainSpec {
  int classes = 8;
  int samples_per_class = 150;
  int clusters_per_class = 2;
  int epochs = 6;
  int batch = 32;
  double lr = 1e-3;
};

// Trains a fresh backbone on a held-out multi-class problem with prompting
// disabled, then freezes it and resets the head. The continual phase only
// ever updates prompts and the (regrown) head.
LearnerState make_pretrained_learner(const ModelConfig& cfg, const StreamSpec& geometry,
                                     const PretrainSpec& ps, std::uint64_t seed);

// Cumulative mechanism ladder used by the ablation experiment.
enum class LadderRung { kOnePrompt, kSparse, kNoise, kFull };
PipelineConfig ladder_config(const PipelineConfig& full, LadderRung rung);
const char* ladder_name(LadderRung rung);

}  // namespace smope
