#pragma once

#include "rlscale/nn.hpp"
#include "rlscale/replay.hpp"
#include "rlscale/sampler.hpp"
#include "rlscale/types.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlscale::algos {

enum class Algo { A2C, PPO, DQN, CatDQN };

std::string to_string(Algo a);
Algo algo_from_string(const std::string& s);
bool is_policy_gradient(Algo a);

struct PpoConfig {
  double clip = 0.1;
  std::size_t epochs = 4;
  std::size_t minibatches = 4;
  bool operator==(const PpoConfig&) const = default;
};

struct DqnConfig {
  std::size_t batch_size = 32;
  std::size_t target_period = 500;  // updates between target copies
  std::size_t n_step = 1;
  bool double_q = true;
  double eps_start = 1.0;
  double eps_end = 0.01;
  double eps_fraction = 0.1;  // of total steps, linear decay
  std::size_t replay_capacity = 100000;
  std::size_t min_history_factor = 10;  // learning starts after factor * batch_size transitions
  std::size_t max_updates_per_cycle = 64;
  bool operator==(const DqnConfig&) const = default;
};

struct CatDqnConfig {
  std::size_t atoms = 51;
  // When set, the support spans the environment's return bounds.
  bool auto_support = true;
  double z_min = 0.0;
  double z_max = 1.0;
  bool operator==(const CatDqnConfig&) const = default;
};

struct AlgoConfig {
  Algo algo = Algo::A2C;
  double gamma = 0.99;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  PpoConfig ppo;
  DqnConfig dqn;
  CatDqnConfig cat;
  double training_intensity = 1.0;

  void validate() const;
  bool operator==(const AlgoConfig&) const = default;
};

// Reference training intensities: 1 (A2C), 4 (PPO), 8 (DQN family).
double reference_intensity(Algo a);

struct ReturnsAdvantages {
  std::vector<double> returns;
  std::vector<double> advantages;
};

// Backward recursion from the bootstrap values. Failure/success terminations cut the
// bootstrap; time-limit terminations bootstrap from timeout_values (treated as terminal
// when timeout_values is empty).
ReturnsAdvantages compute_returns_advantages(const sampler::SampleBatch& batch, std::span<const double> bootstrap_values,
                                             std::span<const double> timeout_values, double gamma);

struct LossResult {
  double loss = 0.0;
  GradVector grad;
  double clip_fraction = 0.0;
};

// Mean over the batch of  -log pi(a|s) A + value_coef (R - V)^2 - entropy_coef H(pi).
LossResult a2c_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> returns, std::span<const double> advantages, const AlgoConfig& cfg);

// Mean over the batch of  -min(rho A, clip(rho, 1-e, 1+e) A) + value_coef (R - V)^2 - entropy_coef H.
LossResult ppo_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> returns, std::span<const double> advantages,
                    std::span<const double> old_probs, const AlgoConfig& cfg);

struct PolicyData {
  Matrix obs;
  std::vector<int> actions;
  std::vector<double> returns;
  std::vector<double> advantages;
  std::vector<double> old_probs;
  std::size_t size() const { return actions.size(); }
};

// Receives each minibatch gradient and updates params in place.
using ApplyGradFn = std::function<void(ParamVector& params, const GradVector& grad)>;

struct PpoUpdateStats {
  std::size_t updates = 0;
  double mean_loss = 0.0;
  double mean_clip_fraction = 0.0;
};

// epochs x minibatches clipped-objective updates over disjoint shuffled partitions,
// advantages normalized per minibatch.
PpoUpdateStats ppo_update(const nn::Network& net, ParamVector& params, const PolicyData& data, const AlgoConfig& cfg,
                          Rng& rng, const ApplyGradFn& apply);

// Rows of data selected by `rows`.
PolicyData select_rows(const PolicyData& data, std::span<const std::size_t> rows);
void normalize_advantages(std::vector<double>& adv);

// y = R + discount * Q_target(s', a*) with a* from the target (or online, when double_q) net.
std::vector<double> dqn_target(const nn::Network& net, const ParamVector& target_params,
                               const ParamVector& online_params, const ReplayMinibatch& mb, bool double_q);

// Mean squared error on the taken-action entries.
LossResult dqn_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> targets);

Vector make_support(std::size_t atoms, double z_min, double z_max);

// Projects r + discount * z onto the fixed support, splitting mass linearly between
// neighbouring atoms. Rows with done set ignore next_dist and project r alone.
Matrix categorical_project(std::span<const double> rewards, std::span<const std::uint8_t> dones,
                           std::span<const double> discounts, const Matrix& next_dist, const Vector& support);

// Target distributions for the taken actions of a replay minibatch.
Matrix catdqn_target(const nn::Network& net, const ParamVector& target_params, const ParamVector& online_params,
                     const ReplayMinibatch& mb, const Vector& support, bool double_q);

// Mean cross-entropy between target distributions and predicted taken-action distributions.
LossResult catdqn_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs,
                       std::span<const int> actions, const Matrix& target_dists);

// Expected values per action from atom distributions: batch x A.
Matrix expected_q(const Matrix& dists, const Vector& support);

int argmax_lowest(std::span<const double> row);
int epsilon_greedy(std::span<const double> q_row, double epsilon, Rng& rng);
double linear_epsilon(std::size_t step, std::size_t total_steps, const DqnConfig& cfg);

// Updates per sampling cycle keeping (batch * updates) / (sims * horizon) = intensity.
std::size_t updates_per_cycle(std::size_t sims, std::size_t horizon, std::size_t batch, double intensity,
                              std::size_t cap = 0);

}  // namespace rlscale::algos
