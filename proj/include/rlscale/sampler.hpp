#pragma once

#include "rlscale/envs.hpp"
#include "rlscale/types.hpp"

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace rlscale::sampler {

struct SamplerConfig {
  std::size_t n_workers = 1;
  std::size_t m_per_worker = 2;
  std::size_t groups = 2;
  std::size_t horizon = 5;
  std::uint64_t seed = 0;
  std::size_t max_decorrelation_steps = 0;

  std::size_t num_envs() const { return n_workers * m_per_worker; }
  void validate() const;
  bool operator==(const SamplerConfig&) const = default;
};

// What the action server returns for one group batch. `values` and `action_probs`
// may be left empty by algorithms that do not need them.
struct InferenceOutput {
  std::vector<int> actions;
  std::vector<double> values;
  std::vector<double> action_probs;
};

// Called on the server thread with the observations of one group at local time t.
using InferenceFn = std::function<InferenceOutput(std::size_t group, std::size_t t, const Matrix& obs)>;
using EnvFactory = std::function<std::unique_ptr<envs::Env>()>;

// Time-major arrays; entry (t, b) lives at row/index t * num_envs + b.
struct SampleBatch {
  std::size_t horizon = 0;
  std::size_t num_envs = 0;
  std::size_t obs_dim = 0;
  Matrix obs;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<std::uint8_t> timeouts;
  std::vector<double> values;
  std::vector<double> action_probs;
  std::vector<double> episode_returns;  // NaN unless an episode ended at (t, b)
  Matrix timeout_obs;                   // final observation where timeouts(t, b) is set
  Matrix bootstrap_obs;                 // num_envs x obs_dim, observation after the last step

  std::size_t size() const { return horizon * num_envs; }
  std::size_t index(std::size_t t, std::size_t b) const { return t * num_envs + b; }
  void allocate(std::size_t horizon, std::size_t num_envs, std::size_t obs_dim);
  bool operator==(const SampleBatch&) const;
};

struct ThroughputStats {
  double steps_per_second = 0.0;
  double server_idle_fraction = 0.0;
  double worker_idle_fraction = 0.0;
  double elapsed_seconds = 0.0;
  std::size_t steps = 0;
  // Env step latency histogram; bin i counts steps in [edges[i], edges[i+1]) microseconds.
  std::vector<double> latency_edges_us;
  std::vector<std::size_t> latency_counts;
};

// Simulator layout shared by the parallel sampler and the serial reference.
struct Layout {
  std::size_t groups = 1;
  std::vector<std::size_t> group_offset;  // first batch column of each group
  std::vector<std::size_t> group_size;
  std::vector<std::size_t> env_group;     // by global env index (worker * m + slot)
  std::vector<std::size_t> env_column;    // batch column of each global env

  static Layout make(const SamplerConfig& cfg);
};

struct EnvSet {
  std::vector<std::unique_ptr<envs::Env>> envs;  // global index order
  std::vector<std::size_t> decorrelation_steps;
};

// Constructs, seeds and decorrelates the simulators of a sampler.
EnvSet build_envs(const SamplerConfig& cfg, const EnvFactory& factory);

class Sampler {
 public:
  Sampler(SamplerConfig cfg, const EnvFactory& factory, InferenceFn inference);
  ~Sampler();
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

  SampleBatch collect() { return collect(cfg_.horizon); }
  SampleBatch collect(std::size_t horizon);

  const ThroughputStats& throughput_stats() const { return stats_; }
  const SamplerConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  std::size_t num_envs() const { return cfg_.num_envs(); }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t action_count() const { return action_count_; }
  const std::vector<std::size_t>& decorrelation_steps() const { return decorrelation_steps_; }
  // Sequence of groups served by the action server during the last collection.
  const std::vector<std::size_t>& inference_order() const { return inference_order_; }

 private:
  void worker_loop(std::size_t w);
  void wait_group_done(std::size_t g, double& idle);
  void check_failure();

  SamplerConfig cfg_;
  Layout layout_;
  InferenceFn inference_;
  std::vector<std::unique_ptr<envs::Env>> envs_;
  std::vector<std::size_t> decorrelation_steps_;
  std::size_t obs_dim_ = 0;
  std::size_t action_count_ = 0;

  // Shared step buffers, one per group.
  std::vector<Matrix> group_obs_;
  std::vector<std::vector<int>> group_actions_;
  std::vector<std::size_t> group_row_;
  SampleBatch* batch_ = nullptr;

  std::unique_ptr<std::atomic<std::uint64_t>[]> published_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> completed_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> failed_{false};
  std::mutex error_mutex_;
  std::exception_ptr error_;

  std::chrono::steady_clock::time_point collection_start_{};
  std::vector<double> worker_idle_;
  std::vector<std::vector<std::size_t>> worker_hist_;
  ThroughputStats stats_;
  std::vector<std::size_t> inference_order_;
  std::vector<std::thread> workers_;
};

// Single-threaded loop with identical seeding and stepping order.
SampleBatch serial_reference_collect(const SamplerConfig& cfg, const EnvFactory& factory, const InferenceFn& inference,
                                     std::size_t horizon);

std::vector<double> latency_bin_edges_us();

}  // namespace rlscale::sampler
