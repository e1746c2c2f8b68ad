#pragma once

#include "rlscale/config.hpp"
#include "rlscale/telemetry.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rlscale::experiment {

struct ScorePoint {
  std::size_t env_steps = 0;
  std::size_t learner = 0;
  double episode_return = 0.0;
  double online_score = 0.0;
};

struct EvalPoint {
  std::size_t env_steps = 0;
  std::optional<double> score;
  std::size_t episodes = 0;
};

struct PullRecord {
  std::size_t learner = 0;
  std::size_t cycle = 0;
  std::size_t t = 0;
  std::vector<std::uint64_t> versions;
};

struct RunResult {
  std::filesystem::path run_dir;  // empty when nothing was written
  ParamVector final_params;
  std::size_t env_steps = 0;
  std::size_t updates = 0;      // summed over learners
  std::size_t transitions = 0;  // sampled env steps feeding updates
  std::size_t samples_used = 0; // sum over updates of the update batch size
  double measured_intensity = 0.0;
  std::vector<ScorePoint> scores;
  std::vector<EvalPoint> evals;
  std::optional<double> final_online_score;  // learner 0, last 100 episodes
  double cos_full_half_mean = 0.0;
  double cos_half_half_mean = 0.0;
  std::size_t cosine_samples = 0;
  std::vector<PullRecord> pulls;
  telemetry::Summary summary;  // in-run values of the report statistics
};

struct RunOptions {
  bool write_files = true;
};

// Trains one experiment: single learner, K synchronous learners or K asynchronous learners.
RunResult run_experiment(const config::ExperimentConfig& cfg, const RunOptions& opts = {});

struct SecondaryResult {
  std::filesystem::path run_dir;
  std::vector<telemetry::NormRecord> primary_norms;
  std::vector<telemetry::NormRecord> secondary_norms;
  std::vector<EvalPoint> primary_evals;
  std::vector<EvalPoint> secondary_evals;
  ParamVector primary_params;
  ParamVector secondary_params;
  std::size_t primary_updates = 0;
  std::size_t secondary_updates = 0;
};

// A DQN-family primary agent fills replay; a secondary network of batch size L_s trains only
// from that replay with L_s * updates_s = L_p * updates_p per cycle.
SecondaryResult run_secondary_learner(const config::ExperimentConfig& cfg, const RunOptions& opts = {});

struct BenchPoint {
  std::size_t n_workers = 0;
  std::size_t m_per_worker = 0;
  std::size_t groups = 0;
  std::size_t horizon = 0;
  double steps_per_second = 0.0;  // median over repeats
  double server_idle_fraction = 0.0;
  double worker_idle_fraction = 0.0;
};

// Sampling throughput over the configured (n, m, groups) sweep with network inference on
// the server. Geometries that are invalid (2 groups with m = 1) are skipped.
std::vector<BenchPoint> sample_bench(const config::ExperimentConfig& cfg, const RunOptions& opts = {});

// Names of the metric families written into a run directory, with their columns.
const std::vector<std::pair<std::string, std::vector<std::string>>>& metric_schemas();

}  // namespace rlscale::experiment
