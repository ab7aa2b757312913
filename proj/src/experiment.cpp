#include "smope/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace smope {

namespace {

const std::set<std::string> kModes{"continual", "ablation", "noise-sweep", "rate"};

std::uint64_t derived_seed(int seed, std::uint64_t tag) {
  return Rng(static_cast<std::uint64_t>(seed)).child(tag).next_u64();
}

void run_jobs(std::vector<std::function<void()>>& jobs, int threads) {
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) {
        return;
      }
      jobs[i]();
    }
  };
  const int count = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  if (count == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    pool.emplace_back(worker);
  }
  for (auto& t : pool) {
    t.join();
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

std::string median_str(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  const double med = v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  std::ostringstream os;
  os << med;
  return os.str();
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(ConfigFile::parse_file(path));
}

ExperimentConfig parse_experiment_config(const ConfigFile& f) {
  ExperimentConfig cfg;
  cfg.raw_text = f.text();

  cfg.mode = f.get_string("experiment", "mode", cfg.mode);
  if (kModes.count(cfg.mode) == 0) {
    throw ConfigError("config: [experiment] mode must be one of continual, ablation, "
                      "noise-sweep, rate (got '" +
                      cfg.mode + "')");
  }
  cfg.seeds = f.get_int_list("experiment", "seeds", cfg.seeds);
  cfg.out_dir = f.get_string("experiment", "out", cfg.out_dir);
  cfg.threads = f.get_int("experiment", "threads", cfg.threads);
  if (cfg.threads < 1) {
    throw ConfigError("config: [experiment] threads must be positive");
  }

  StreamSpec& s = cfg.stream;
  s.tasks = f.get_int("stream", "tasks", s.tasks);
  s.classes_per_task = f.get_int("stream", "classes_per_task", s.classes_per_task);
  s.clusters_per_class = f.get_int("stream", "clusters_per_class", s.clusters_per_class);
  s.token_rows = f.get_int("stream", "token_rows", s.token_rows);
  s.token_cols = f.get_int("stream", "token_cols", s.token_cols);
  s.raw_dim = f.get_int("stream", "raw_dim", s.raw_dim);
  s.noise_scale = f.get_double("stream", "noise_scale", s.noise_scale);
  s.cluster_spread = f.get_double("stream", "cluster_spread", s.cluster_spread);
  s.train_per_class = f.get_int("stream", "train_per_class", s.train_per_class);
  s.val_per_class = f.get_int("stream", "val_per_class", s.val_per_class);
  s.test_per_class = f.get_int("stream", "test_per_class", s.test_per_class);
  s.validate();

  ModelConfig& m = cfg.model;
  m.depth = f.get_int("model", "depth", m.depth);
  m.heads = f.get_int("model", "heads", m.heads);
  m.embed_dim = f.get_int("model", "embed_dim", m.embed_dim);
  m.prompt_layers = f.get_int("model", "prompt_layers", m.prompt_layers);
  m.prompt_length = f.get_int("model", "prompt_length", m.prompt_length);
  m.select_k = f.get_int("model", "select_k", m.select_k);
  m.mlp_ratio = f.get_double("model", "mlp_ratio", m.mlp_ratio);
  // Token geometry follows the stream.
  m.tokens = s.tokens() + 1;
  m.raw_dim = s.raw_dim;
  m.validate();

  PretrainSpec& p = cfg.pretrain;
  p.classes = f.get_int("pretrain", "classes", p.classes);
  p.samples_per_class = f.get_int("pretrain", "samples_per_class", p.samples_per_class);
  p.clusters_per_class = f.get_int("pretrain", "clusters_per_class", p.clusters_per_class);
  p.epochs = f.get_int("pretrain", "epochs", p.epochs);
  p.batch = f.get_int("pretrain", "batch", p.batch);
  p.lr = f.get_double("pretrain", "lr", p.lr);

  PipelineConfig& t = cfg.pipeline;
  t.epochs = f.get_int("train", "epochs", t.epochs);
  t.batch = f.get_int("train", "batch", t.batch);
  t.lr = f.get_double("train", "lr", t.lr);
  t.noise.epsilon = f.get_double("train", "epsilon", t.noise.epsilon);
  const std::string noise_mode = f.get_string("train", "noise_mode", "adaptive");
  if (noise_mode == "adaptive") {
    t.noise.mode = NoiseMode::kAdaptive;
  } else if (noise_mode == "fixed") {
    t.noise.mode = NoiseMode::kFixed;
  } else if (noise_mode == "uniform") {
    t.noise.mode = NoiseMode::kUniform;
  } else {
    throw ConfigError("config: [train] noise_mode must be adaptive, fixed or uniform");
  }
  if (t.noise.epsilon < 0.0 || t.noise.epsilon > 1.0) {
    throw ConfigError("config: [train] epsilon must lie in [0, 1]");
  }
  t.alpha_router = f.get_double("train", "alpha_router", t.alpha_router);
  t.alpha_proto = f.get_double("train", "alpha_proto", t.alpha_proto);
  t.tap = f.get_bool("train", "tap", t.tap);
  t.tap_samples = f.get_int("train", "tap_samples", t.tap_samples);
  t.dense_warmup = f.get_bool("train", "dense_warmup", t.dense_warmup);
  if (t.epochs < 1 || t.batch < 1 || t.lr <= 0.0 || t.tap_samples < 1) {
    throw ConfigError("config: [train] epochs/batch/lr/tap_samples invalid");
  }
  if (t.alpha_router < 0.0 || t.alpha_proto < 0.0) {
    throw ConfigError("config: [train] loss weights must be non-negative");
  }

  cfg.sweep_epsilons = f.get_double_list("sweep", "epsilons", cfg.sweep_epsilons);
  for (double e : cfg.sweep_epsilons) {
    if (e < 0.0 || e > 1.0) {
      throw ConfigError("config: [sweep] epsilons must lie in [0, 1]");
    }
  }

  RateConfig& r = cfg.rate;
  r.n_grid = f.get_int_list("rate", "n_grid", r.n_grid);
  r.seeds_per_n = f.get_int("rate", "seeds_per_n", r.seeds_per_n);
  r.noise_sigma = f.get_double("rate", "noise_sigma", r.noise_sigma);
  r.true_atoms = f.get_int("rate", "prompt_experts", r.true_atoms);
  r.fit_atoms = f.get_int("rate", "fit_experts", r.fit_atoms);
  r.pretrained_experts = f.get_int("rate", "pretrained_experts", r.pretrained_experts);
  r.tokens = f.get_int("rate", "tokens", r.tokens);
  r.token_dim = f.get_int("rate", "token_dim", r.token_dim);
  r.gate_dim = f.get_int("rate", "gate_dim", r.gate_dim);
  r.fit.restarts = f.get_int("rate", "restarts", r.fit.restarts);
  r.fit.steps = f.get_int("rate", "steps", r.fit.steps);
  r.fit.lr = f.get_double("rate", "fit_lr", r.fit.lr);
  r.master_seed = static_cast<std::uint64_t>(f.get_int("rate", "master_seed", 0));
  if (r.seeds_per_n < 1 || r.fit.restarts < 1 || r.fit.steps < 1) {
    throw ConfigError("config: [rate] seeds_per_n/restarts/steps must be positive");
  }
  if (r.fit_atoms < r.true_atoms) {
    throw ConfigError("config: [rate] fit_experts must be >= prompt_experts");
  }

  f.reject_unconsumed();
  return cfg;
}

void override_seed(ExperimentConfig& cfg, int seed) { cfg.seeds = {seed}; }
void override_out(ExperimentConfig& cfg, const std::string& out) { cfg.out_dir = out; }
void override_mode(ExperimentConfig& cfg, const std::string& mode) {
  if (kModes.count(mode) == 0) {
    throw ConfigError("mode override must be one of continual, ablation, noise-sweep, rate");
  }
  cfg.mode = mode;
}

ContinualRunResult run_continual_once(const ExperimentConfig& cfg, const PipelineConfig& pc,
                                      int seed, const std::string& variant, double epsilon_tag) {
  ContinualRunResult run;
  run.seed = seed;
  run.variant = variant;
  run.epsilon = epsilon_tag;

  LearnerState st = make_pretrained_learner(cfg.model, cfg.stream, cfg.pretrain,
                                            derived_seed(seed, 0xB0));
  TaskStream stream = generate_task_stream(cfg.stream, derived_seed(seed, 0xDA));
  Rng task_rng(derived_seed(seed, 0x7A));

  run.acc = AccuracyMatrix(cfg.stream.tasks);
  run.layers = static_cast<int>(st.prompts.size());
  run.heads = cfg.model.heads;
  for (int t = 1; t <= cfg.stream.tasks; ++t) {
    Rng rng = task_rng.child(static_cast<std::uint64_t>(t));
    run.task_summaries.push_back(
        train_task(st, stream.tasks[static_cast<std::size_t>(t - 1)], pc, rng));
    evaluate(st, stream, t, run.acc);

    std::vector<double> entropies;
    for (const PromptBlock& pb : st.prompts) {
      for (int h = 0; h < pb.usage.heads; ++h) {
        const Vector f = pb.usage.frequencies(h);
        entropies.push_back(f.sum() > 0.0 ? usage_entropy(f) : 0.0);
      }
    }
    run.entropy_per_task.push_back(std::move(entropies));
  }
  const auto [faa, caa] = faa_caa(run.acc);
  run.faa = faa;
  run.caa = caa;
  for (const PromptBlock& pb : st.prompts) {
    for (int h = 0; h < pb.usage.heads; ++h) {
      run.final_frequencies.push_back(pb.usage.frequencies(h));
    }
  }
  return run;
}

double mean_final_entropy(const ContinualRunResult& run) {
  if (run.entropy_per_task.empty()) {
    return 0.0;
  }
  const std::vector<double>& last = run.entropy_per_task.back();
  if (last.empty()) {
    return 0.0;
  }
  double acc = 0.0;
  for (double e : last) {
    acc += e;
  }
  return acc / static_cast<double>(last.size());
}

namespace {

json run_record(const ContinualRunResult& run, int task_index) {
  json rec;
  rec["seed"] = run.seed;
  rec["variant"] = run.variant;
  rec["epsilon"] = run.epsilon;
  rec["task"] = task_index;
  rec["A_t"] = run.acc.average_at_stage(task_index);
  json row = json::array();
  for (int i = 1; i <= task_index; ++i) {
    row.push_back(run.acc.at(i, task_index));
  }
  rec["S_row"] = row;
  const TaskTrainSummary& ts = run.task_summaries[static_cast<std::size_t>(task_index - 1)];
  rec["loss_ce"] = ts.ce;
  rec["loss_router"] = ts.router;
  rec["loss_proto"] = ts.proto;
  json ent = json::array();
  const auto& entropies = run.entropy_per_task[static_cast<std::size_t>(task_index - 1)];
  for (std::size_t i = 0; i < entropies.size(); ++i) {
    json e;
    e["layer"] = static_cast<int>(i) / std::max(1, run.heads);
    e["head"] = static_cast<int>(i) % std::max(1, run.heads);
    e["value"] = entropies[i];
    ent.push_back(e);
  }
  rec["entropy"] = ent;
  return rec;
}

json final_record(const ContinualRunResult& run) {
  json rec;
  rec["seed"] = run.seed;
  rec["variant"] = run.variant;
  rec["epsilon"] = run.epsilon;
  rec["faa"] = run.faa;
  rec["caa"] = run.caa;
  rec["final"] = true;
  return rec;
}

void append_metrics(std::ostream& out, const ContinualRunResult& run) {
  for (int t = 1; t <= run.acc.tasks; ++t) {
    out << run_record(run, t).dump() << "\n";
  }
  out << final_record(run).dump() << "\n";
}

void write_accuracy_csv(std::ostream& out, const std::vector<ContinualRunResult>& runs) {
  out << "variant,epsilon,seed,stage,task,accuracy\n";
  for (const ContinualRunResult& run : runs) {
    for (int t = 1; t <= run.acc.tasks; ++t) {
      for (int i = 1; i <= t; ++i) {
        out << run.variant << "," << run.epsilon << "," << run.seed << "," << t << "," << i << ","
            << run.acc.at(i, t) << "\n";
      }
    }
  }
}

void write_usage_csv(const fs::path& path, const std::vector<Vector>& freqs, int heads) {
  std::ofstream out(path);
  out << "layer,head,expert,frequency\n";
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const int layer = static_cast<int>(i) / std::max(1, heads);
    const int head = static_cast<int>(i) % std::max(1, heads);
    for (Eigen::Index e = 0; e < freqs[i].size(); ++e) {
      out << layer << "," << head << "," << e << "," << freqs[i](e) << "\n";
    }
  }
}

std::vector<Vector> mean_frequencies(const std::vector<const ContinualRunResult*>& runs) {
  std::vector<Vector> mean;
  if (runs.empty()) {
    return mean;
  }
  mean = runs.front()->final_frequencies;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] += runs[r]->final_frequencies[i];
    }
  }
  for (Vector& v : mean) {
    v /= static_cast<double>(runs.size());
  }
  return mean;
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "config.ini", cfg.raw_text);

  json summary;
  summary["mode"] = cfg.mode;

  if (cfg.mode == "rate") {
    RateConfig rc = cfg.rate;
    rc.threads = cfg.threads;
    const RateResult res = rate_experiment(rc);

    std::ofstream csv(fs::path(cfg.out_dir) / "rate.csv");
    csv << "n,seed,restart_best_loss,voronoi_loss\n";
    for (const RateCell& c : res.cells) {
      if (c.ok) {
        csv << c.n << "," << c.seed << "," << c.fit_loss << "," << c.voronoi << "\n";
      }
    }
    json medians = json::array();
    for (std::size_t i = 0; i < rc.n_grid.size(); ++i) {
      json m;
      m["n"] = rc.n_grid[i];
      m["median_voronoi"] = res.median_per_n[i];
      medians.push_back(m);
    }
    summary["medians"] = medians;
    if (res.slope.has_value()) {
      summary["slope"] = *res.slope;
    } else {
      summary["slope"] = nullptr;
      summary["degenerate"] = true;
    }
    summary["fit_failures"] = res.failures;
    write_text(fs::path(cfg.out_dir) / "summary.json", summary.dump(2) + "\n");

    std::printf("rate experiment: %zu cells, %d fit failures\n", res.cells.size(), res.failures);
    for (std::size_t i = 0; i < rc.n_grid.size(); ++i) {
      std::printf("  n = %6d   median Voronoi loss = %.6f\n", rc.n_grid[i], res.median_per_n[i]);
    }
    if (res.slope.has_value()) {
      std::printf("  log-log slope = %.3f\n", *res.slope);
    } else {
      std::printf("  log-log slope: degenerate (losses at numerical zero)\n");
    }
    return;
  }

  // Continual-style modes share the run machinery.
  struct Job {
    PipelineConfig pc;
    int seed;
    std::string variant;
    double epsilon;
  };
  std::vector<Job> jobs;
  if (cfg.mode == "continual") {
    for (int seed : cfg.seeds) {
      jobs.push_back({cfg.pipeline, seed, "full", cfg.pipeline.noise.epsilon});
    }
  } else if (cfg.mode == "ablation") {
    for (LadderRung rung : {LadderRung::kOnePrompt, LadderRung::kSparse, LadderRung::kNoise,
                            LadderRung::kFull}) {
      for (int seed : cfg.seeds) {
        const PipelineConfig pc = ladder_config(cfg.pipeline, rung);
        jobs.push_back({pc, seed, ladder_name(rung), pc.noise.epsilon});
      }
    }
  } else {  // noise-sweep
    for (double eps : cfg.sweep_epsilons) {
      for (int seed : cfg.seeds) {
        PipelineConfig pc = cfg.pipeline;
        pc.noise.epsilon = eps;
        std::ostringstream tag;
        tag << "eps_" << eps;
        jobs.push_back({pc, seed, tag.str(), eps});
      }
    }
  }

  std::vector<ContinualRunResult> results(jobs.size());
  std::vector<std::function<void()>> work;
  work.reserve(jobs.size());
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    work.push_back([&, i]() {
      const Job& j = jobs[i];
      results[i] = run_continual_once(cfg, j.pc, j.seed, j.variant, j.epsilon);
    });
  }
  run_jobs(work, cfg.threads);

  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl");
  for (const ContinualRunResult& run : results) {
    append_metrics(metrics, run);
  }
  std::ofstream acc_csv(fs::path(cfg.out_dir) / "accuracy.csv");
  write_accuracy_csv(acc_csv, results);

  if (cfg.mode == "continual") {
    std::vector<const ContinualRunResult*> all;
    for (const auto& r : results) {
      all.push_back(&r);
    }
    write_usage_csv(fs::path(cfg.out_dir) / "usage.csv", mean_frequencies(all), cfg.model.heads);

    std::vector<double> faas, caas;
    std::printf("continual: %zu seeds\n", results.size());
    for (const ContinualRunResult& run : results) {
      std::printf("  seed %2d   FAA = %.4f   CAA = %.4f\n", run.seed, run.faa, run.caa);
      faas.push_back(run.faa);
      caas.push_back(run.caa);
    }
    std::printf("  median    FAA = %s   CAA = %s\n", median_str(faas).c_str(),
                median_str(caas).c_str());
    summary["median_faa"] = median_of(faas);
    summary["median_caa"] = median_of(caas);
  } else if (cfg.mode == "ablation") {
    json ladder = json::array();
    std::printf("ablation ladder (median over %zu seeds):\n", cfg.seeds.size());
    for (const char* name : {"one_prompt", "sparse", "noise", "full"}) {
      std::vector<double> faas, caas;
      std::vector<const ContinualRunResult*> subset;
      for (const auto& r : results) {
        if (r.variant == name) {
          faas.push_back(r.faa);
          caas.push_back(r.caa);
          subset.push_back(&r);
        }
      }
      json row;
      row["variant"] = name;
      row["median_faa"] = median_of(faas);
      row["median_caa"] = median_of(caas);
      ladder.push_back(row);
      std::printf("  %-10s  FAA = %.4f   CAA = %.4f\n", name, median_of(faas), median_of(caas));
      if (std::string(name) != "one_prompt") {
        write_usage_csv(fs::path(cfg.out_dir) / ("usage_" + std::string(name) + ".csv"),
                        mean_frequencies(subset), cfg.model.heads);
      }
    }
    summary["ladder"] = ladder;
  } else {  // noise-sweep
    json sweep = json::array();
    std::printf("noise sweep:\n");
    for (double eps : cfg.sweep_epsilons) {
      std::ostringstream tag;
      tag << "eps_" << eps;
      const fs::path dir = fs::path(cfg.out_dir) / tag.str();
      fs::create_directories(dir);
      std::vector<const ContinualRunResult*> subset;
      json entry;
      entry["epsilon"] = eps;
      json per_seed = json::array();
      std::vector<double> entropies;
      for (const auto& r : results) {
        if (r.variant == tag.str()) {
          subset.push_back(&r);
          write_usage_csv(dir / ("usage_seed" + std::to_string(r.seed) + ".csv"),
                          r.final_frequencies, cfg.model.heads);
          json ps;
          ps["seed"] = r.seed;
          ps["mean_entropy"] = mean_final_entropy(r);
          per_seed.push_back(ps);
          entropies.push_back(mean_final_entropy(r));
        }
      }
      write_usage_csv(dir / "usage.csv", mean_frequencies(subset), cfg.model.heads);
      double mean_e = 0.0;
      for (double e : entropies) {
        mean_e += e;
      }
      mean_e /= std::max<std::size_t>(1, entropies.size());
      entry["mean_entropy"] = mean_e;
      entry["per_seed"] = per_seed;
      sweep.push_back(entry);
      std::printf("  epsilon = %.2f   mean usage entropy = %.4f\n", eps, mean_e);
    }
    summary["sweep"] = sweep;
  }

  write_text(fs::path(cfg.out_dir) / "summary.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Report emission.

namespace {

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      out.push_back(json::parse(line));
    }
  }
  return out;
}

void require_files(const fs::path& dir, const std::vector<std::string>& names) {
  std::vector<std::string> missing;
  for (const std::string& n : names) {
    if (!fs::exists(dir / n)) {
      missing.push_back(n);
    }
  }
  if (!missing.empty()) {
    std::string msg = "report: missing expected files in " + dir.string() + ":";
    for (const std::string& n : missing) {
      msg += " " + n;
    }
    throw ConfigError(msg);
  }
}

}  // namespace

void emit_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  require_files(dir, {"summary.json", "config.ini"});
  std::ifstream sj(dir / "summary.json");
  json summary = json::parse(sj);
  const std::string mode = summary.value("mode", "");

  std::ostringstream report;
  report << "run directory: " << run_dir << "\n";
  report << "mode: " << mode << "\n\n";

  if (mode == "rate") {
    require_files(dir, {"rate.csv"});
    std::ostringstream tsv;
    tsv << "n\tmedian_voronoi\n";
    report << "per-n median Voronoi losses:\n";
    for (const json& m : summary["medians"]) {
      report << "  n = " << m["n"] << "   median = " << m["median_voronoi"] << "\n";
      tsv << m["n"] << "\t" << m["median_voronoi"] << "\n";
    }
    if (summary.contains("slope") && !summary["slope"].is_null()) {
      report << "log-log slope: " << summary["slope"] << "\n";
    } else {
      report << "log-log slope: degenerate\n";
    }
    report << "fit failures: " << summary.value("fit_failures", 0) << "\n";
    write_text(dir / "rate_medians.tsv", tsv.str());
    write_text(dir / "report.txt", report.str());
    return;
  }

  require_files(dir, {"metrics.jsonl", "accuracy.csv"});
  const std::vector<json> records = read_jsonl(dir / "metrics.jsonl");

  // Accuracy curves: stage-average accuracy per (variant, epsilon, seed).
  std::ostringstream curves;
  curves << "variant\tepsilon\tseed\ttask\tavg_accuracy\n";
  for (const json& r : records) {
    if (r.contains("task")) {
      curves << r["variant"].get<std::string>() << "\t" << r["epsilon"] << "\t" << r["seed"]
             << "\t" << r["task"] << "\t" << r["A_t"] << "\n";
    }
  }
  write_text(dir / "accuracy_curves.tsv", curves.str());

  if (mode == "continual") {
    require_files(dir, {"usage.csv"});
    report << "final metrics per seed:\n";
    for (const json& r : records) {
      if (r.value("final", false)) {
        report << "  seed " << r["seed"] << ": FAA = " << r["faa"] << ", CAA = " << r["caa"]
               << "\n";
      }
    }
    report << "median FAA: " << summary["median_faa"] << "\n";
    report << "median CAA: " << summary["median_caa"] << "\n";
    // Usage heatmap data.
    std::ifstream usage(dir / "usage.csv");
    std::ostringstream heat;
    std::string line;
    std::getline(usage, line);
    heat << "layer\thead\texpert\tfrequency\n";
    while (std::getline(usage, line)) {
      std::replace(line.begin(), line.end(), ',', '\t');
      heat << line << "\n";
    }
    write_text(dir / "usage_heatmap.tsv", heat.str());
  } else if (mode == "ablation") {
    report << "mechanism ladder (cumulative, medians):\n";
    std::ostringstream tsv;
    tsv << "variant\tmedian_faa\tmedian_caa\n";
    for (const json& row : summary["ladder"]) {
      report << "  " << row["variant"].get<std::string>() << ": FAA = " << row["median_faa"]
             << ", CAA = " << row["median_caa"] << "\n";
      tsv << row["variant"].get<std::string>() << "\t" << row["median_faa"] << "\t"
          << row["median_caa"] << "\n";
    }
    write_text(dir / "ladder.tsv", tsv.str());
  } else if (mode == "noise-sweep") {
    report << "usage entropy by epsilon:\n";
    std::ostringstream tsv;
    tsv << "epsilon\tseed\tmean_entropy\n";
    for (const json& entry : summary["sweep"]) {
      report << "  epsilon = " << entry["epsilon"] << ": mean entropy = " << entry["mean_entropy"]
             << "\n";
      for (const json& ps : entry["per_seed"]) {
        tsv << entry["epsilon"] << "\t" << ps["seed"] << "\t" << ps["mean_entropy"] << "\n";
      }
    }
    write_text(dir / "entropy_by_epsilon.tsv", tsv.str());
  } else {
    throw ConfigError("report: unknown mode '" + mode + "' in summary.json");
  }

  write_text(dir / "report.txt", report.str());
}

}  // namespace smope
