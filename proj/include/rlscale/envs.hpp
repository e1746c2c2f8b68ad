#pragma once

#include "rlscale/types.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlscale::envs {

using Observation = std::vector<double>;

enum class EnvKind { Catch, PoleBalance, Latency };
enum class LatencyDist { Constant, LogNormal };

std::string to_string(EnvKind k);
EnvKind env_kind_from_string(const std::string& s);
std::string to_string(LatencyDist d);
LatencyDist latency_dist_from_string(const std::string& s);

struct EnvSpec {
  EnvKind kind = EnvKind::Catch;
  std::size_t max_episode_len = 1000;

  // catch
  std::size_t width = 5;
  std::size_t height = 10;

  // polebalance
  double reset_noise = 0.05;

  // latency: constant uses latency_us; lognormal draws exp(N(mu, sigma)) microseconds.
  LatencyDist latency_dist = LatencyDist::Constant;
  double latency_us = 0.0;
  double lognormal_mu = 5.0;
  double lognormal_sigma = 1.0;
  std::size_t latency_obs_dim = 4;
  std::size_t latency_actions = 2;

  std::size_t obs_dim() const;
  std::size_t action_count() const;
  void validate() const;
  bool operator==(const EnvSpec&) const = default;
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool done = false;
  // Episode ended because max_episode_len was hit rather than by failure/success.
  bool time_limit = false;
  std::optional<double> episode_return;
};

class Env {
 public:
  virtual ~Env() = default;

  // Reseeds the episode generator and starts a new episode.
  const Observation& reset(std::uint64_t seed);
  // Starts a new episode continuing the current generator stream.
  const Observation& reset();
  StepResult step(int action);

  const Observation& observation() const { return obs_; }
  bool needs_reset() const { return terminal_; }
  std::size_t episode_steps() const { return steps_; }
  double episode_return() const { return return_; }
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t action_count() const = 0;

 protected:
  explicit Env(std::size_t max_len) : max_len_(max_len) {}

  struct Transition {
    double reward = 0.0;
    bool terminal = false;
  };
  virtual void start_episode(Observation& obs) = 0;
  virtual Transition advance(int action, Observation& obs) = 0;
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
  Observation obs_;
  std::size_t max_len_;
  std::size_t steps_ = 0;
  double return_ = 0.0;
  bool terminal_ = true;
};

// Ball falls one row per step from a random column of the top row; the paddle on the
// bottom row moves left/stay/right. Reward 1 for a catch. Observation is the one-hot
// width*height grid with ball and paddle cells set.
class CatchEnv final : public Env {
 public:
  CatchEnv(std::size_t width, std::size_t height, std::size_t max_len);
  std::size_t obs_dim() const override { return width_ * height_; }
  std::size_t action_count() const override { return 3; }

  std::size_t ball_col() const { return ball_col_; }
  std::size_t ball_row() const { return ball_row_; }
  std::size_t paddle_col() const { return paddle_col_; }

 protected:
  void start_episode(Observation& obs) override;
  Transition advance(int action, Observation& obs) override;

 private:
  void render(Observation& obs) const;
  std::size_t width_, height_;
  std::size_t ball_col_ = 0, ball_row_ = 0, paddle_col_ = 0;
};

// Cart-pole with explicit Euler integration at dt = 0.02.
class PoleBalanceEnv final : public Env {
 public:
  PoleBalanceEnv(double reset_noise, std::size_t max_len);
  std::size_t obs_dim() const override { return 4; }
  std::size_t action_count() const override { return 2; }

 protected:
  void start_episode(Observation& obs) override;
  Transition advance(int action, Observation& obs) override;

 private:
  double noise_;
  double x_ = 0, x_dot_ = 0, theta_ = 0, theta_dot_ = 0;
};

// Placeholder observation, zero reward, sleeps a sampled duration per step.
class LatencyEnv final : public Env {
 public:
  explicit LatencyEnv(const EnvSpec& spec);
  std::size_t obs_dim() const override { return obs_dim_; }
  std::size_t action_count() const override { return actions_; }
  double last_latency_us() const { return last_latency_us_; }

 protected:
  void start_episode(Observation& obs) override;
  Transition advance(int action, Observation& obs) override;

 private:
  LatencyDist dist_;
  double constant_us_, mu_, sigma_;
  std::size_t obs_dim_, actions_;
  double last_latency_us_ = 0.0;
};

std::unique_ptr<Env> make_env(const EnvSpec& spec);

struct DecorrelationResult {
  std::vector<Observation> observations;
  std::vector<std::size_t> random_steps;
};

// Advances each (freshly reset) env by an independent uniform count in [0, max_random_steps]
// of uniform-random actions. Episodes ending meanwhile are reset and stepping continues.
DecorrelationResult decorrelate_starts(std::span<const std::unique_ptr<Env>> envs, std::size_t max_random_steps,
                                       Rng& rng);

// Exact values of the catch MDP from its initial-state distribution, by enumeration.
struct CatchValues {
  double optimal_mean_return = 0.0;
  double random_mean_return = 0.0;
  double min_return = 0.0;
  double max_return = 1.0;
};
CatchValues catch_values(std::size_t width, std::size_t height);

// Return range used to place categorical atoms.
std::pair<double, double> return_bounds(const EnvSpec& spec);

}  // namespace rlscale::envs
