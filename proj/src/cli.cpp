#include "rlscale/cli.hpp"

#include "rlscale/config.hpp"
#include "rlscale/experiment.hpp"
#include "rlscale/telemetry.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <optional>

namespace rlscale {

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> steps;

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Override the experiment seed");
    cmd->add_option("--out", out, "Override the output directory");
    cmd->add_option("--steps", steps, "Override the total environment steps");
  }

  config::ExperimentConfig load(const std::string& path) const {
    auto cfg = config::load(path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out_dir = *out;
    if (steps) cfg.total_steps = *steps;
    cfg.validate();
    return cfg;
  }
};

std::string opt_fmt(const std::optional<double>& v) { return v ? telemetry::fmt(*v) : "n/a"; }

}  // namespace

int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scaled synchronous/asynchronous deep RL experiments"};
  app.require_subcommand(1);

  std::string config_path, run_dir, plot_path;
  Overrides ov;

  auto* train = app.add_subcommand("train", "Train an agent");
  train->add_option("config", config_path, "Experiment config file")->required();
  ov.attach(train);

  auto* bench = app.add_subcommand("sample-bench", "Sampling throughput sweep over workers, simulators and groups");
  bench->add_option("config", config_path, "Experiment config file")->required();
  ov.attach(bench);

  auto* cosine = app.add_subcommand("probe-cosine", "A2C run recording full/half-batch gradient cosine similarity");
  cosine->add_option("config", config_path, "Experiment config file")->required();
  ov.attach(cosine);

  std::optional<std::size_t> secondary_batch;
  bool shared_rng = false;
  auto* secondary = app.add_subcommand("secondary", "Train a secondary learner from a primary agent's replay");
  secondary->add_option("config", config_path, "Experiment config file")->required();
  secondary->add_option("--secondary-batch", secondary_batch, "Secondary learner batch size");
  secondary->add_flag("--shared-rng", shared_rng, "Share the primary's minibatch sampling stream");
  ov.attach(secondary);

  auto* report = app.add_subcommand("report", "Summarize a run directory");
  report->add_option("run_dir", run_dir, "Run directory")->required();
  report->add_option("--plot", plot_path, "Write an SVG score plot to this path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      const auto cfg = ov.load(config_path);
      const auto res = experiment::run_experiment(cfg);
      out << "run " << res.run_dir.string() << "\n" << telemetry::format_summary(res.summary);
    } else if (*bench) {
      const auto cfg = ov.load(config_path);
      const auto pts = experiment::sample_bench(cfg);
      out << "n_workers,m_per_worker,groups,steps_per_second\n";
      for (const auto& p : pts)
        out << p.n_workers << ',' << p.m_per_worker << ',' << p.groups << ',' << telemetry::fmt(p.steps_per_second)
            << '\n';
    } else if (*cosine) {
      auto cfg = ov.load(config_path);
      cfg.telemetry.cosine_probe = true;
      const auto res = experiment::run_experiment(cfg);
      out << "cos_full_half_mean " << telemetry::fmt(res.cos_full_half_mean) << "\ncos_half_half_mean "
          << telemetry::fmt(res.cos_half_half_mean) << "\nupdates " << res.cosine_samples << "\n";
    } else if (*secondary) {
      auto cfg = ov.load(config_path);
      if (secondary_batch) cfg.secondary.batch_size = *secondary_batch;
      if (shared_rng) cfg.secondary.shared_minibatch_rng = true;
      cfg.validate();
      const auto res = experiment::run_secondary_learner(cfg);
      out << "run " << res.run_dir.string() << "\nprimary_updates " << res.primary_updates
          << "\nsecondary_updates " << res.secondary_updates << "\n";
      if (!res.primary_evals.empty())
        out << "primary_last_eval " << opt_fmt(res.primary_evals.back().score) << "\nsecondary_last_eval "
            << opt_fmt(res.secondary_evals.back().score) << "\n";
    } else if (*report) {
      if (!std::filesystem::is_directory(run_dir)) throw ConfigError("no run directory " + run_dir);
      out << telemetry::format_summary(telemetry::summarize(run_dir));
      if (!plot_path.empty()) telemetry::write_score_plot(run_dir, plot_path);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace rlscale
