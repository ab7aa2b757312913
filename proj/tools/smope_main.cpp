#include <climits>
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "smope/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"sparse mixture-of-prompt-experts laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::string mode_override;
  int seed_override = INT_MIN;
  CLI::App* run = app.add_subcommand("run", "execute an experiment described by a config file");
  run->add_option("config", config_path, "key = value config file")->required();
  run->add_option("--seed", seed_override, "run a single seed, overriding the config list");
  run->add_option("--out", out_override, "output directory override");
  run->add_option("--mode", mode_override, "mode override (continual|ablation|noise-sweep|rate)");

  std::string report_dir;
  CLI::App* report = app.add_subcommand("report", "rebuild report files from a run directory");
  report->add_option("dir", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (run->parsed()) {
      smope::ExperimentConfig cfg = smope::load_experiment_config(config_path);
      if (seed_override != INT_MIN) {
        smope::override_seed(cfg, seed_override);
      }
      if (!out_override.empty()) {
        smope::override_out(cfg, out_override);
      }
      if (!mode_override.empty()) {
        smope::override_mode(cfg, mode_override);
      }
      smope::run_experiment(cfg);
    } else {
      smope::emit_report(report_dir);
    }
  } catch (const smope::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 0;
}
