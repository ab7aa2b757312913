#include "smope/continual.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "smope/optim.hpp"

namespace smope {

void StreamSpec::validate() const {
  if (tasks < 1 || classes_per_task < 1 || clusters_per_class < 1) {
    throw ConfigError("StreamSpec: tasks/classes/clusters must be positive");
  }
  if (token_rows < 1 || token_cols < 1 || raw_dim < 1) {
    throw ConfigError("StreamSpec: token grid and raw_dim must be positive");
  }
  if (noise_scale < 0.0 || cluster_spread <= 0.0) {
    throw ConfigError("StreamSpec: noise_scale must be >= 0, cluster_spread > 0");
  }
  if (train_per_class < 1 || val_per_class < 0 || test_per_class < 0) {
    throw ConfigError("StreamSpec: split sizes invalid");
  }
}

TaskStream generate_task_stream(const StreamSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  TaskStream stream;
  stream.spec = spec;
  stream.tasks.resize(static_cast<std::size_t>(spec.tasks));

  const int tokens = spec.tokens();
  int class_id = 0;
  for (int t = 0; t < spec.tasks; ++t) {
    TaskData& task = stream.tasks[static_cast<std::size_t>(t)];
    for (int c = 0; c < spec.classes_per_task; ++c, ++class_id) {
      task.classes.push_back(class_id);
      Rng rng = root.child(static_cast<std::uint64_t>(class_id) + 1);

      std::vector<Matrix> cluster_means;
      cluster_means.reserve(static_cast<std::size_t>(spec.clusters_per_class));
      for (int k = 0; k < spec.clusters_per_class; ++k) {
        cluster_means.push_back(
            rng.gaussian_matrix(tokens, spec.raw_dim, 0.0, spec.cluster_spread));
      }
      auto draw = [&](std::vector<Sample>& out, int count) {
        for (int i = 0; i < count; ++i) {
          const int k = rng.uniform_int(spec.clusters_per_class);
          Sample s;
          s.features = cluster_means[static_cast<std::size_t>(k)] +
                       rng.gaussian_matrix(tokens, spec.raw_dim, 0.0, spec.noise_scale);
          s.label = class_id;
          out.push_back(std::move(s));
        }
      };
      draw(task.train, spec.train_per_class);
      draw(task.val, spec.val_per_class);
      draw(task.test, spec.test_per_class);
    }
    // Interleave classes so minibatches mix them even without shuffling.
    Rng order_rng = root.child(0x5151 + static_cast<std::uint64_t>(t));
    order_rng.shuffle(task.train);
  }
  return stream;
}

GaussianStats estimate_class_gaussian(const std::vector<Vector>& reps) {
  if (reps.size() < 2) {
    throw DataError("estimate_class_gaussian: need at least 2 representations per class");
  }
  const Eigen::Index d = reps.front().size();
  Vector mean = Vector::Zero(d);
  for (const Vector& z : reps) {
    if (z.size() != d) {
      throw DimensionError("estimate_class_gaussian: inconsistent representation width");
    }
    mean += z;
  }
  mean /= static_cast<double>(reps.size());
  Matrix cov = Matrix::Zero(d, d);
  for (const Vector& z : reps) {
    const Vector centered = z - mean;
    cov += centered * centered.transpose();
  }
  cov /= static_cast<double>(reps.size());
  double ridge = 1e-4 * cov.trace() / static_cast<double>(d);
  if (ridge <= 0.0) {
    ridge = 1e-4;  // zero scatter: keep the distribution sampleable
  }
  cov += ridge * Matrix::Identity(d, d);
  return GaussianStats{std::move(mean), std::move(cov)};
}

std::map<int, GaussianStats> estimate_class_gaussians(
    const std::map<int, std::vector<Vector>>& reps_by_class) {
  std::map<int, GaussianStats> out;
  for (const auto& [cls, reps] : reps_by_class) {
    out.emplace(cls, estimate_class_gaussian(reps));
  }
  return out;
}

Matrix sample_pseudo_reps(const GaussianStats& stats, int count, Rng& rng) {
  const Eigen::Index d = stats.mean.size();
  Matrix cov = stats.cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  int attempts = 0;
  while (llt.info() != Eigen::Success && attempts < 6) {
    ++attempts;
    const double extra = std::pow(10.0, attempts) * 1e-8 * std::max(1.0, cov.trace());
    cov += extra * Matrix::Identity(d, d);
    llt.compute(cov);
    std::fprintf(stderr, "sample_pseudo_reps: ridge escalated (attempt %d)\n", attempts);
  }
  if (llt.info() != Eigen::Success) {
    throw NumericError("sample_pseudo_reps: covariance not factorizable");
  }
  const Eigen::MatrixXd chol = llt.matrixL();
  Matrix out(count, d);
  for (int i = 0; i < count; ++i) {
    out.row(i) = (stats.mean + chol * rng.gaussian_vector(d)).transpose();
  }
  return out;
}

double AccuracyMatrix::average_at_stage(int stage_t) const {
  double acc = 0.0;
  for (int i = 1; i <= stage_t; ++i) {
    acc += at(i, stage_t);
  }
  return acc / static_cast<double>(stage_t);
}

std::pair<double, double> faa_caa(const AccuracyMatrix& acc) {
  if (acc.tasks < 1) {
    throw DataError("faa_caa: empty accuracy matrix");
  }
  double caa = 0.0;
  for (int t = 1; t <= acc.tasks; ++t) {
    caa += acc.average_at_stage(t);
  }
  caa /= static_cast<double>(acc.tasks);
  return {acc.average_at_stage(acc.tasks), caa};
}

namespace {

std::vector<const Sample*> batch_pointers(const std::vector<Sample>& data,
                                          const std::vector<int>& order, std::size_t begin,
                                          std::size_t end) {
  std::vector<const Sample*> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    out.push_back(&data[static_cast<std::size_t>(order[i])]);
  }
  return out;
}

std::vector<Sample> copy_batch(const std::vector<const Sample*>& ptrs) {
  std::vector<Sample> out;
  out.reserve(ptrs.size());
  for (const Sample* p : ptrs) {
    out.push_back(*p);
  }
  return out;
}

struct PhaseStats {
  double ce = 0.0;
  double router = 0.0;
  double proto = 0.0;
  int batches = 0;
};

// One optimization phase over the task's training split.
PhaseStats run_phase(LearnerState& st, const std::vector<Sample>& data, int epochs,
                     const ForwardOptions& base_opts, const LossWeights& w,
                     const PrototypeSet* protos, int proto_k, double lr, int batch_size, Rng& rng,
                     const char* phase_name) {
  Adam opt(trainable_parameters(st), AdamConfig{lr, 0.9, 0.999, 1e-8});
  const int n = static_cast<int>(data.size());
  const int steps_per_epoch = (n + batch_size - 1) / batch_size;
  const int total_steps = epochs * steps_per_epoch;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  PhaseStats stats;
  int step = 0;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    const bool last_epoch = e == epochs - 1;
    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(batch_size);
      const std::size_t end = std::min(begin + static_cast<std::size_t>(batch_size),
                                       static_cast<std::size_t>(n));
      std::vector<Sample> batch = copy_batch(batch_pointers(data, order, begin, end));
      std::vector<int> labels;
      labels.reserve(batch.size());
      for (const Sample& s : batch) {
        labels.push_back(s.label);
      }

      ag::Graph g;
      ForwardResult fw = forward_batch(g, st, batch, base_opts);
      ag::Var logits = classify(g, st.head, fw.reps);
      ag::Var ce = ag::cross_entropy(logits, labels);
      ag::Var loss = ce;
      if (w.alpha_router > 0.0 && !fw.routed.empty()) {
        loss = ag::add(loss, ag::scale(router_loss_graph(g, fw.routed), w.alpha_router));
      }
      if (w.alpha_proto > 0.0 && protos != nullptr && !protos->empty()) {
        std::vector<ag::Var> key_vars;
        key_vars.reserve(st.prompts.size());
        for (PromptBlock& pb : st.prompts) {
          key_vars.push_back(g.param(pb.keys));
        }
        loss = ag::add(loss, ag::scale(prototype_loss_graph(g, *protos, key_vars, proto_k),
                                       w.alpha_proto));
      }
      const double loss_value = loss.scalar();
      if (!std::isfinite(loss_value)) {
        throw NumericError(std::string("train_task: non-finite loss in phase '") + phase_name +
                           "' at epoch " + std::to_string(e) + ", step " + std::to_string(b));
      }
      g.backward(loss);
      opt.step(cosine_decay(step, total_steps));

      if (last_epoch) {
        stats.ce += ce.scalar();
        if (!fw.decisions.empty()) {
          stats.router += router_loss(fw.decisions);
        }
        if (protos != nullptr && !protos->empty()) {
          std::vector<Matrix> keys;
          for (const PromptBlock& pb : st.prompts) {
            keys.push_back(pb.keys.value);
          }
          stats.proto += prototype_loss(*protos, keys, proto_k);
        }
        ++stats.batches;
      }
    }
  }
  if (stats.batches > 0) {
    stats.ce /= stats.batches;
    stats.router /= stats.batches;
    stats.proto /= stats.batches;
  }
  return stats;
}

}  // namespace

TaskTrainSummary train_task(LearnerState& st, const TaskData& task, const PipelineConfig& pc,
                            Rng& rng) {
  if (task.classes.empty() || task.train.empty()) {
    throw DataError("train_task: task has no classes or no training samples");
  }
  const int t = st.tasks_trained + 1;

  // New classes must extend the label space contiguously; row r of the head
  // is class id r.
  for (std::size_t i = 0; i < task.classes.size(); ++i) {
    if (task.classes[i] != st.head.classes() + static_cast<int>(i)) {
      throw ConfigError("train_task: task classes must extend the seen label space");
    }
  }
  Rng head_rng = rng.child(100);
  st.head.grow(static_cast<int>(task.classes.size()), st.cfg.embed_dim, head_rng);

  // Snapshot previous prefix keys and build the prototype set before any
  // update touches the prompts.
  PrototypeSet protos;
  if (t > 1 && !st.prompts.empty()) {
    st.prev_prefix_keys.clear();
    std::vector<Vector> mean_freqs;
    for (PromptBlock& pb : st.prompts) {
      st.prev_prefix_keys.push_back(pb.keys.value);
      Vector mean_f = Vector::Zero(pb.usage.experts);
      for (int h = 0; h < pb.usage.heads; ++h) {
        mean_f += pb.usage.frequencies(h);
      }
      mean_f /= static_cast<double>(pb.usage.heads);
      mean_freqs.push_back(std::move(mean_f));
    }
    protos = build_prototype_set(st.prev_prefix_keys, mean_freqs);
  }

  const int proto_k = st.cfg.select_k == kDenseSelect ? st.cfg.prompt_length : st.cfg.select_k;
  Rng phase_rng = rng.child(200);

  // Dense warmup on the first task: every expert active, no noise, plain
  // cross-entropy.
  if (t == 1 && pc.dense_warmup && pc.attention == AttentionMode::kProxy && !st.prompts.empty()) {
    ForwardOptions warm;
    warm.train = true;
    warm.attention = AttentionMode::kProxy;
    warm.select_k_override = kDenseSelect;
    run_phase(st, task.train, std::max(1, pc.epochs / 2), warm, LossWeights{}, nullptr, proto_k,
              pc.lr, pc.batch, phase_rng, "warmup");
  }

  // Main phase.
  Rng noise_rng = rng.child(300);
  ForwardOptions opts;
  opts.train = true;
  opts.attention = pc.attention;
  opts.select_k_override = pc.sparse ? 0 : kDenseSelect;
  opts.noise = pc.noise;
  opts.rng = &noise_rng;
  LossWeights w{pc.alpha_router, pc.alpha_proto};
  const PhaseStats main_stats = run_phase(st, task.train, pc.epochs, opts, w, &protos, proto_k,
                                          pc.lr, pc.batch, phase_rng, "main");

  // Per-class Gaussian statistics from evaluation-mode representations of the
  // final prompts.
  {
    ForwardOptions eval_opts;
    eval_opts.attention = pc.attention;
    eval_opts.select_k_override = pc.sparse ? 0 : kDenseSelect;
    std::map<int, std::vector<Vector>> by_class;
    const int chunk = 64;
    for (std::size_t begin = 0; begin < task.train.size(); begin += chunk) {
      const std::size_t end = std::min(begin + chunk, task.train.size());
      std::span<const Sample> batch(task.train.data() + begin, end - begin);
      const Matrix reps = forward_reps(st, batch, eval_opts);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        by_class[batch[i].label].push_back(reps.row(static_cast<Eigen::Index>(i)).transpose());
      }
    }
    for (auto& [cls, stats] : estimate_class_gaussians(by_class)) {
      st.class_stats[cls] = std::move(stats);
    }
  }

  // Task-adaptive prediction: refine the head over all seen classes.
  if (pc.tap) {
    Rng tap_rng = rng.child(400);
    tap_refine(st, pc.epochs, pc.tap_samples, pc.lr, pc.batch, tap_rng);
  }

  // Evaluation-mode usage pass with the final prompts.
  if (pc.attention == AttentionMode::kProxy && !st.prompts.empty()) {
    ForwardOptions usage_opts;
    usage_opts.attention = AttentionMode::kProxy;
    usage_opts.select_k_override = pc.sparse ? 0 : kDenseSelect;
    std::vector<std::vector<RoutingDecision>> per_layer(st.prompts.size());
    const int chunk = 64;
    for (std::size_t begin = 0; begin < task.train.size(); begin += chunk) {
      const std::size_t end = std::min(begin + chunk, task.train.size());
      std::span<const Sample> batch(task.train.data() + begin, end - begin);
      std::vector<RoutingDecision> decisions;
      forward_reps(st, batch, usage_opts, &decisions);
      for (RoutingDecision& d : decisions) {
        per_layer[static_cast<std::size_t>(d.layer)].push_back(std::move(d));
      }
    }
    for (std::size_t l = 0; l < st.prompts.size(); ++l) {
      update_usage(st.prompts[l], per_layer[l]);
    }
  }

  st.tasks_trained = t;
  return TaskTrainSummary{main_stats.ce, main_stats.router, main_stats.proto};
}

void tap_refine(LearnerState& st, int epochs, int samples_per_class, double lr, int batch,
                Rng& rng) {
  if (st.class_stats.empty()) {
    throw DataError("tap_refine: no class statistics available");
  }
  if (static_cast<int>(st.class_stats.size()) != st.head.classes()) {
    throw ConfigError("tap_refine: statistics must cover every seen class");
  }
  Adam opt({&st.head.weight, &st.head.bias}, AdamConfig{lr, 0.9, 0.999, 1e-8});
  const int classes = st.head.classes();
  const int pool = classes * samples_per_class;
  const int steps_per_epoch = (pool + batch - 1) / batch;
  const int total_steps = epochs * steps_per_epoch;
  int step = 0;
  for (int e = 0; e < epochs; ++e) {
    // Equal pseudo-sample counts per class in every epoch.
    Matrix reps(pool, st.cfg.embed_dim);
    std::vector<int> labels(static_cast<std::size_t>(pool));
    int row = 0;
    for (const auto& [cls, stats] : st.class_stats) {
      reps.middleRows(row, samples_per_class) = sample_pseudo_reps(stats, samples_per_class, rng);
      std::fill_n(labels.begin() + row, samples_per_class, cls);
      row += samples_per_class;
    }
    std::vector<int> order(static_cast<std::size_t>(pool));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      const int begin = b * batch;
      const int end = std::min(begin + batch, pool);
      Matrix z(end - begin, st.cfg.embed_dim);
      std::vector<int> y;
      y.reserve(static_cast<std::size_t>(end - begin));
      for (int i = begin; i < end; ++i) {
        z.row(i - begin) = reps.row(order[static_cast<std::size_t>(i)]);
        y.push_back(labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      }
      ag::Graph g;
      ag::Var logits = classify(g, st.head, g.constant(std::move(z)));
      ag::Var loss = ag::cross_entropy(logits, y);
      if (!std::isfinite(loss.scalar())) {
        throw NumericError("tap_refine: non-finite loss");
      }
      g.backward(loss);
      opt.step(cosine_decay(step, total_steps));
    }
  }
}

void evaluate(LearnerState& st, const TaskStream& stream, int stage_t, AccuracyMatrix& acc) {
  if (stage_t < 1 || stage_t > static_cast<int>(stream.tasks.size())) {
    throw ConfigError("evaluate: stage out of range");
  }
  for (int i = 1; i <= stage_t; ++i) {
    const std::vector<Sample>& test = stream.tasks[static_cast<std::size_t>(i - 1)].test;
    int correct = 0;
    const int chunk = 64;
    for (std::size_t begin = 0; begin < test.size(); begin += chunk) {
      const std::size_t end = std::min(begin + chunk, test.size());
      std::span<const Sample> batch(test.data() + begin, end - begin);
      const std::vector<int> preds = predict(st, batch);
      for (std::size_t k = 0; k < batch.size(); ++k) {
        correct += preds[k] == batch[k].label ? 1 : 0;
      }
    }
    acc.set(i, stage_t, static_cast<double>(correct) / static_cast<double>(test.size()));
  }
}

LearnerState make_pretrained_learner(const ModelConfig& cfg, const StreamSpec& geometry,
                                     const PretrainSpec& ps, std::uint64_t seed) {
  Rng root(seed);
  LearnerState st = make_learner(cfg, root.child(1).next_u64());

  StreamSpec pre = geometry;
  pre.tasks = 1;
  pre.classes_per_task = ps.classes;
  pre.clusters_per_class = ps.clusters_per_class;
  pre.train_per_class = ps.samples_per_class;
  pre.val_per_class = 0;
  pre.test_per_class = 0;
  TaskStream stream = generate_task_stream(pre, root.child(2).next_u64());

  Rng head_rng = root.child(3);
  st.head.grow(ps.classes, cfg.embed_dim, head_rng);

  std::vector<DifferentiableParam*> params = st.backbone.parameters();
  params.push_back(&st.head.weight);
  params.push_back(&st.head.bias);
  Adam opt(params, AdamConfig{ps.lr, 0.9, 0.999, 1e-8});

  const std::vector<Sample>& data = stream.tasks[0].train;
  const int n = static_cast<int>(data.size());
  const int steps_per_epoch = (n + ps.batch - 1) / ps.batch;
  const int total_steps = ps.epochs * steps_per_epoch;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = root.child(4);

  ForwardOptions opts;
  opts.train = true;
  opts.use_prompts = false;

  int step = 0;
  for (int e = 0; e < ps.epochs; ++e) {
    shuffle_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(ps.batch);
      const std::size_t end =
          std::min(begin + static_cast<std::size_t>(ps.batch), static_cast<std::size_t>(n));
      std::vector<Sample> batch = copy_batch(batch_pointers(data, order, begin, end));
      std::vector<int> labels;
      labels.reserve(batch.size());
      for (const Sample& s : batch) {
        labels.push_back(s.label);
      }
      ag::Graph g;
      ForwardResult fw = forward_batch(g, st, batch, opts);
      ag::Var loss = ag::cross_entropy(classify(g, st.head, fw.reps), labels);
      if (!std::isfinite(loss.scalar())) {
        throw NumericError("make_pretrained_learner: non-finite loss");
      }
      g.backward(loss);
      opt.step(cosine_decay(step, total_steps));
    }
  }

  st.backbone.set_frozen(true);
  st.head = ClassifierHead{};  // the continual head grows from scratch
  return st;
}

PipelineConfig ladder_config(const PipelineConfig& full, LadderRung rung) {
  PipelineConfig c = full;
  switch (rung) {
    case LadderRung::kOnePrompt:
      c.attention = AttentionMode::kPerToken;
      c.sparse = false;
      c.noise.epsilon = 0.0;
      c.alpha_router = 0.0;
      c.alpha_proto = 0.0;
      c.tap = false;
      c.dense_warmup = false;
      break;
    case LadderRung::kSparse:
      c.attention = AttentionMode::kProxy;
      c.sparse = true;
      c.noise.epsilon = 0.0;
      c.alpha_router = 0.0;
      c.alpha_proto = 0.0;
      c.tap = false;
      c.dense_warmup = false;
      break;
    case LadderRung::kNoise:
      c.attention = AttentionMode::kProxy;
      c.sparse = true;
      c.noise = full.noise;
      c.alpha_router = 0.0;
      c.alpha_proto = 0.0;
      c.tap = false;
      c.dense_warmup = false;
      break;
    case LadderRung::kFull:
      break;
  }
  return c;
}

const char* ladder_name(LadderRung rung) {
  switch (rung) {
    case LadderRung::kOnePrompt:
      return "one_prompt";
    case LadderRung::kSparse:
      return "sparse";
    case LadderRung::kNoise:
      return "noise";
    case LadderRung::kFull:
      return "full";
  }
  return "unknown";
}

}  // namespace smope
