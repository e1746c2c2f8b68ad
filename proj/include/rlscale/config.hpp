#pragma once

#include "rlscale/algos.hpp"
#include "rlscale/envs.hpp"
#include "rlscale/nn.hpp"
#include "rlscale/sampler.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rlscale::config {

inline constexpr int kConfigVersion = 1;

enum class Topology { Single, Sync, Async };
std::string to_string(Topology t);
Topology topology_from_string(const std::string& s);

struct TopologyConfig {
  Topology kind = Topology::Single;
  std::size_t learners = 1;
  std::size_t chunks = 3;
  // Async only: local steps folded into the store per synchronization (1 = plain async Adam).
  int local_steps = 1;
  // Async only: refresh acting parameters from the store every this many sampling steps (0 = never).
  std::size_t pull_horizon = 0;
  bool operator==(const TopologyConfig&) const = default;
};

struct OptimConfig {
  std::string kind = "adam";  // adam | rmsprop
  double lr = 1e-3;
  // When lr_base_batch > 0 the learning rate is lr * sqrt(B / lr_base_batch), B the update batch.
  std::size_t lr_base_batch = 0;
  double eps = 1e-8;
  // When > 0 overrides eps with eps_coef / B (distributional Adam epsilon).
  double eps_coef = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double decay = 0.99;
  double max_grad_norm = 0.0;
  bool operator==(const OptimConfig&) const = default;
};

struct EvalConfig {
  std::size_t interval_steps = 50000;  // 0 disables evaluation pauses
  std::size_t eval_steps = 5000;
  std::size_t max_path_len = 1000;
  double epsilon = 0.001;
  bool operator==(const EvalConfig&) const = default;
};

struct TelemetryConfig {
  std::size_t norm_interval = 0;  // updates between norm records, 0 disables
  bool cosine_probe = false;
  bool operator==(const TelemetryConfig&) const = default;
};

struct SecondaryConfig {
  std::size_t batch_size = 32;
  bool shared_minibatch_rng = false;
  bool operator==(const SecondaryConfig&) const = default;
};

struct BenchConfig {
  std::vector<std::size_t> n_workers{1, 2, 4, 8};
  std::vector<std::size_t> m_per_worker{1, 2, 4, 8};
  std::vector<std::size_t> groups{1, 2};
  std::size_t cycles = 20;
  std::size_t repeats = 3;
  double inference_delay_us = 0.0;  // extra server time per inference call
  bool operator==(const BenchConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "run";
  envs::EnvSpec env;
  sampler::SamplerConfig sampler;  // seed is derived from `seed`
  algos::AlgoConfig algo;
  std::vector<nn::HiddenLayer> hidden{{64, nn::Activation::Tanh}, {64, nn::Activation::Tanh}};
  OptimConfig optim;
  TopologyConfig topology;
  std::size_t total_steps = 100000;
  EvalConfig eval;
  TelemetryConfig telemetry;
  SecondaryConfig secondary;
  BenchConfig bench;
  std::uint64_t seed = 0;
  std::string out_dir = "runs";

  void validate() const;
  nn::NetSpec net_spec() const;
  // Samples per gradient update: B*T/minibatches (PPO), B*T (A2C), L (DQN family).
  std::size_t update_batch() const;
  double resolved_lr() const;
  double resolved_eps() const;
  // Steps of one sampling cycle, B * T.
  std::size_t cycle_steps() const { return sampler.num_envs() * sampler.horizon; }
  bool operator==(const ExperimentConfig&) const = default;
};

std::string serialize(const ExperimentConfig& cfg);
ExperimentConfig parse(const std::string& text);
ExperimentConfig load(const std::filesystem::path& path);
void save(const ExperimentConfig& cfg, const std::filesystem::path& path);

}  // namespace rlscale::config
