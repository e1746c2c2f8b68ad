#include "rlscale/envs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

namespace rlscale::envs {

std::string to_string(EnvKind k) {
  switch (k) {
    case EnvKind::Catch:
      return "catch";
    case EnvKind::PoleBalance:
      return "polebalance";
    case EnvKind::Latency:
      return "latency";
  }
  return "?";
}

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "catch") return EnvKind::Catch;
  if (s == "polebalance") return EnvKind::PoleBalance;
  if (s == "latency") return EnvKind::Latency;
  throw ConfigError("unknown env kind '" + s + "'");
}

std::string to_string(LatencyDist d) { return d == LatencyDist::Constant ? "constant" : "lognormal"; }

LatencyDist latency_dist_from_string(const std::string& s) {
  if (s == "constant") return LatencyDist::Constant;
  if (s == "lognormal") return LatencyDist::LogNormal;
  throw ConfigError("unknown latency distribution '" + s + "'");
}

std::size_t EnvSpec::obs_dim() const {
  switch (kind) {
    case EnvKind::Catch:
      return width * height;
    case EnvKind::PoleBalance:
      return 4;
    case EnvKind::Latency:
      return latency_obs_dim;
  }
  return 0;
}

std::size_t EnvSpec::action_count() const {
  switch (kind) {
    case EnvKind::Catch:
      return 3;
    case EnvKind::PoleBalance:
      return 2;
    case EnvKind::Latency:
      return latency_actions;
  }
  return 0;
}

void EnvSpec::validate() const {
  require_config(max_episode_len >= 1, "max_episode_len must be >= 1");
  require_config(action_count() >= 2, "environments need at least two actions");
  if (kind == EnvKind::Catch) require_config(width >= 1 && height >= 2, "catch grid must be at least 1x2");
  if (kind == EnvKind::Latency) {
    require_config(latency_obs_dim >= 1, "latency env obs dim must be >= 1");
    require_config(latency_us >= 0.0 && lognormal_sigma >= 0.0, "latency parameters must be nonnegative");
  }
}

// ---- Env ----

const Observation& Env::reset(std::uint64_t seed) {
  rng_.seed(seed);
  return reset();
}

const Observation& Env::reset() {
  steps_ = 0;
  return_ = 0.0;
  terminal_ = false;
  obs_.assign(obs_dim(), 0.0);
  start_episode(obs_);
  return obs_;
}

StepResult Env::step(int action) {
  if (terminal_) throw RuntimeError("step() on a terminal environment; reset first");
  if (action < 0 || static_cast<std::size_t>(action) >= action_count())
    throw RuntimeError("action " + std::to_string(action) + " out of range");
  const Transition tr = advance(action, obs_);
  steps_ += 1;
  return_ += tr.reward;
  StepResult r;
  r.reward = tr.reward;
  r.done = tr.terminal;
  if (!tr.terminal && steps_ >= max_len_) {
    r.done = true;
    r.time_limit = true;
  }
  if (r.done) {
    terminal_ = true;
    r.episode_return = return_;
  }
  r.obs = obs_;
  return r;
}

// ---- Catch ----

CatchEnv::CatchEnv(std::size_t width, std::size_t height, std::size_t max_len)
    : Env(max_len), width_(width), height_(height) {}

void CatchEnv::render(Observation& obs) const {
  std::fill(obs.begin(), obs.end(), 0.0);
  obs[ball_row_ * width_ + ball_col_] = 1.0;
  obs[(height_ - 1) * width_ + paddle_col_] = 1.0;
}

void CatchEnv::start_episode(Observation& obs) {
  std::uniform_int_distribution<std::size_t> col(0, width_ - 1);
  ball_col_ = col(rng());
  ball_row_ = 0;
  paddle_col_ = width_ / 2;
  render(obs);
}

Env::Transition CatchEnv::advance(int action, Observation& obs) {
  if (action == 0 && paddle_col_ > 0) paddle_col_ -= 1;
  if (action == 2 && paddle_col_ + 1 < width_) paddle_col_ += 1;
  ball_row_ += 1;
  Transition t;
  if (ball_row_ == height_ - 1) {
    t.terminal = true;
    t.reward = ball_col_ == paddle_col_ ? 1.0 : 0.0;
  }
  render(obs);
  return t;
}

// ---- PoleBalance ----

namespace {
constexpr double kGravity = 9.8;
constexpr double kCartMass = 1.0;
constexpr double kPoleMass = 0.1;
constexpr double kPoleHalfLength = 0.5;
constexpr double kForce = 10.0;
constexpr double kDt = 0.02;
constexpr double kThetaLimit = 12.0 * 3.14159265358979323846 / 180.0;
constexpr double kXLimit = 2.4;
}  // namespace

PoleBalanceEnv::PoleBalanceEnv(double reset_noise, std::size_t max_len) : Env(max_len), noise_(reset_noise) {}

void PoleBalanceEnv::start_episode(Observation& obs) {
  std::uniform_real_distribution<double> u(-noise_, noise_);
  x_ = u(rng());
  x_dot_ = u(rng());
  theta_ = u(rng());
  theta_dot_ = u(rng());
  obs = {x_, x_dot_, theta_, theta_dot_};
}

Env::Transition PoleBalanceEnv::advance(int action, Observation& obs) {
  const double force = action == 1 ? kForce : -kForce;
  const double total_mass = kCartMass + kPoleMass;
  const double pole_ml = kPoleMass * kPoleHalfLength;
  const double c = std::cos(theta_);
  const double s = std::sin(theta_);
  const double temp = (force + pole_ml * theta_dot_ * theta_dot_ * s) / total_mass;
  const double theta_acc =
      (kGravity * s - c * temp) / (kPoleHalfLength * (4.0 / 3.0 - kPoleMass * c * c / total_mass));
  const double x_acc = temp - pole_ml * theta_acc * c / total_mass;
  x_ += kDt * x_dot_;
  x_dot_ += kDt * x_acc;
  theta_ += kDt * theta_dot_;
  theta_dot_ += kDt * theta_acc;
  obs = {x_, x_dot_, theta_, theta_dot_};
  Transition t;
  t.reward = 1.0;
  t.terminal = std::abs(x_) > kXLimit || std::abs(theta_) > kThetaLimit;
  return t;
}

// ---- Latency ----

LatencyEnv::LatencyEnv(const EnvSpec& spec)
    : Env(spec.max_episode_len),
      dist_(spec.latency_dist),
      constant_us_(spec.latency_us),
      mu_(spec.lognormal_mu),
      sigma_(spec.lognormal_sigma),
      obs_dim_(spec.latency_obs_dim),
      actions_(spec.latency_actions) {}

void LatencyEnv::start_episode(Observation& obs) { std::fill(obs.begin(), obs.end(), 0.0); }

Env::Transition LatencyEnv::advance(int, Observation&) {
  double us = constant_us_;
  if (dist_ == LatencyDist::LogNormal) {
    std::lognormal_distribution<double> d(mu_, sigma_);
    us = d(rng());
  }
  last_latency_us_ = us;
  if (us > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::micro>(us));
  return {};
}

std::unique_ptr<Env> make_env(const EnvSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case EnvKind::Catch:
      return std::make_unique<CatchEnv>(spec.width, spec.height, spec.max_episode_len);
    case EnvKind::PoleBalance:
      return std::make_unique<PoleBalanceEnv>(spec.reset_noise, spec.max_episode_len);
    case EnvKind::Latency:
      return std::make_unique<LatencyEnv>(spec);
  }
  throw ConfigError("unknown env kind");
}

DecorrelationResult decorrelate_starts(std::span<const std::unique_ptr<Env>> envs, std::size_t max_random_steps,
                                       Rng& rng) {
  DecorrelationResult out;
  out.observations.reserve(envs.size());
  out.random_steps.reserve(envs.size());
  std::uniform_int_distribution<std::size_t> count(0, max_random_steps);
  for (const auto& env : envs) {
    const std::size_t n = count(rng);
    std::uniform_int_distribution<int> action(0, static_cast<int>(env->action_count()) - 1);
    for (std::size_t i = 0; i < n; ++i) {
      if (env->step(action(rng)).done) env->reset();
    }
    out.random_steps.push_back(n);
    out.observations.push_back(env->observation());
  }
  return out;
}

CatchValues catch_values(std::size_t width, std::size_t height) {
  require_config(width >= 1 && height >= 2, "catch grid must be at least 1x2");
  // value[row][ball][paddle] for rows 0..height-2 (the ball is still falling).
  const std::size_t rows = height - 1;
  std::vector<double> opt(rows * width * width), rnd(rows * width * width);
  auto at = [&](std::size_t r, std::size_t b, std::size_t p) { return (r * width + b) * width + p; };
  for (std::size_t r = rows; r-- > 0;) {
    for (std::size_t b = 0; b < width; ++b) {
      for (std::size_t p = 0; p < width; ++p) {
        double best = -1.0, sum = 0.0;
        for (int a = 0; a < 3; ++a) {
          std::size_t np = p;
          if (a == 0 && np > 0) np -= 1;
          if (a == 2 && np + 1 < width) np += 1;
          double vo, vr;
          if (r + 1 == height - 1) {
            vo = vr = (b == np) ? 1.0 : 0.0;
          } else {
            vo = opt[at(r + 1, b, np)];
            vr = rnd[at(r + 1, b, np)];
          }
          best = std::max(best, vo);
          sum += vr;
        }
        opt[at(r, b, p)] = best;
        rnd[at(r, b, p)] = sum / 3.0;
      }
    }
  }
  CatchValues v;
  for (std::size_t b = 0; b < width; ++b) {
    v.optimal_mean_return += opt[at(0, b, width / 2)] / static_cast<double>(width);
    v.random_mean_return += rnd[at(0, b, width / 2)] / static_cast<double>(width);
  }
  return v;
}

std::pair<double, double> return_bounds(const EnvSpec& spec) {
  switch (spec.kind) {
    case EnvKind::Catch: {
      const auto v = catch_values(spec.width, spec.height);
      return {v.min_return, v.max_return};
    }
    case EnvKind::PoleBalance:
      return {0.0, static_cast<double>(spec.max_episode_len)};
    case EnvKind::Latency:
      return {-1.0, 1.0};
  }
  return {0.0, 1.0};
}

}  // namespace rlscale::envs
