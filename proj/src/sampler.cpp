#include "rlscale/sampler.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>

namespace rlscale::sampler {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0);
}

std::size_t latency_bin(double us, const std::vector<double>& edges) {
  const auto it = std::upper_bound(edges.begin(), edges.end(), us);
  const auto i = static_cast<std::size_t>(std::distance(edges.begin(), it));
  return std::clamp<std::size_t>(i == 0 ? 0 : i - 1, 0, edges.size() - 2);
}

void check_inference(const InferenceOutput& out, std::size_t rows, std::size_t actions) {
  if (out.actions.size() != rows) throw ShapeError("inference returned wrong number of actions");
  if (!out.values.empty() && out.values.size() != rows) throw ShapeError("inference returned wrong number of values");
  if (!out.action_probs.empty() && out.action_probs.size() != rows)
    throw ShapeError("inference returned wrong number of action probabilities");
  for (int a : out.actions)
    if (a < 0 || static_cast<std::size_t>(a) >= actions) throw ShapeError("inference produced out-of-range action");
}

void store_inference(SampleBatch& batch, const InferenceOutput& out, std::size_t t, std::size_t offset) {
  for (std::size_t i = 0; i < out.actions.size(); ++i) {
    const std::size_t idx = batch.index(t, offset + i);
    batch.actions[idx] = out.actions[i];
    if (!out.values.empty()) {
      if (batch.values.empty()) batch.values.assign(batch.size(), 0.0);
      batch.values[idx] = out.values[i];
    }
    if (!out.action_probs.empty()) {
      if (batch.action_probs.empty()) batch.action_probs.assign(batch.size(), 0.0);
      batch.action_probs[idx] = out.action_probs[i];
    }
  }
}

}  // namespace

std::vector<double> latency_bin_edges_us() {
  return {0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1e3, 2e3, 5e3, 1e4, 1e5, 1e6,
          std::numeric_limits<double>::infinity()};
}

void SamplerConfig::validate() const {
  require_config(n_workers >= 1, "sampler needs at least one worker");
  require_config(m_per_worker >= 1, "sampler needs at least one simulator per worker");
  require_config(groups == 1 || groups == 2, "sampler groups must be 1 or 2");
  require_config(groups == 1 || m_per_worker >= 2, "two alternating groups need at least 2 simulators per worker");
  require_config(horizon >= 1, "sampling horizon must be >= 1");
}

void SampleBatch::allocate(std::size_t h, std::size_t b, std::size_t d) {
  horizon = h;
  num_envs = b;
  obs_dim = d;
  obs = Matrix::Zero(static_cast<Eigen::Index>(h * b), static_cast<Eigen::Index>(d));
  actions.assign(h * b, 0);
  rewards.assign(h * b, 0.0);
  dones.assign(h * b, 0);
  timeouts.assign(h * b, 0);
  values.clear();
  action_probs.clear();
  episode_returns.assign(h * b, std::numeric_limits<double>::quiet_NaN());
  timeout_obs = Matrix::Zero(static_cast<Eigen::Index>(h * b), static_cast<Eigen::Index>(d));
  bootstrap_obs = Matrix::Zero(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d));
}

bool SampleBatch::operator==(const SampleBatch& o) const {
  return horizon == o.horizon && num_envs == o.num_envs && obs_dim == o.obs_dim && bitwise_equal(obs, o.obs) &&
         actions == o.actions && bitwise_equal(rewards, o.rewards) && dones == o.dones && timeouts == o.timeouts &&
         bitwise_equal(values, o.values) && bitwise_equal(action_probs, o.action_probs) &&
         bitwise_equal(episode_returns, o.episode_returns) && bitwise_equal(timeout_obs, o.timeout_obs) &&
         bitwise_equal(bootstrap_obs, o.bootstrap_obs);
}

Layout Layout::make(const SamplerConfig& cfg) {
  cfg.validate();
  Layout l;
  l.groups = cfg.groups;
  l.group_size.assign(cfg.groups, 0);
  l.env_group.resize(cfg.num_envs());
  l.env_column.resize(cfg.num_envs());
  // Slot j of every worker belongs to group j % groups; columns ordered (group, worker, slot).
  for (std::size_t j = 0; j < cfg.m_per_worker; ++j) l.group_size[j % cfg.groups] += cfg.n_workers;
  l.group_offset.assign(cfg.groups, 0);
  for (std::size_t g = 1; g < cfg.groups; ++g) l.group_offset[g] = l.group_offset[g - 1] + l.group_size[g - 1];
  std::vector<std::size_t> next = l.group_offset;
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    for (std::size_t w = 0; w < cfg.n_workers; ++w) {
      for (std::size_t j = g; j < cfg.m_per_worker; j += cfg.groups) {
        const std::size_t e = w * cfg.m_per_worker + j;
        l.env_group[e] = g;
        l.env_column[e] = next[g]++;
      }
    }
  }
  return l;
}

EnvSet build_envs(const SamplerConfig& cfg, const EnvFactory& factory) {
  cfg.validate();
  EnvSet set;
  set.envs.reserve(cfg.num_envs());
  for (std::size_t e = 0; e < cfg.num_envs(); ++e) {
    auto env = factory();
    if (!env) throw RuntimeError("environment factory returned null");
    env->reset(mix_seed(cfg.seed, e));
    set.envs.push_back(std::move(env));
  }
  Rng rng(mix_seed(cfg.seed, 0xdec0ULL));
  auto res = envs::decorrelate_starts(set.envs, cfg.max_decorrelation_steps, rng);
  set.decorrelation_steps = std::move(res.random_steps);
  return set;
}

// ---- Sampler ----

Sampler::Sampler(SamplerConfig cfg, const EnvFactory& factory, InferenceFn inference)
    : cfg_(cfg), layout_(Layout::make(cfg)), inference_(std::move(inference)) {
  auto set = build_envs(cfg_, factory);
  envs_ = std::move(set.envs);
  decorrelation_steps_ = std::move(set.decorrelation_steps);
  obs_dim_ = envs_.front()->obs_dim();
  action_count_ = envs_.front()->action_count();
  for (const auto& e : envs_)
    require_config(e->obs_dim() == obs_dim_ && e->action_count() == action_count_,
                   "all simulators of a sampler must share obs/action dims");

  group_obs_.resize(cfg_.groups);
  group_actions_.resize(cfg_.groups);
  group_row_.assign(cfg_.groups, 0);
  for (std::size_t g = 0; g < cfg_.groups; ++g) {
    group_obs_[g] = Matrix::Zero(static_cast<Eigen::Index>(layout_.group_size[g]), static_cast<Eigen::Index>(obs_dim_));
    group_actions_[g].assign(layout_.group_size[g], 0);
  }
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    const auto& o = envs_[e]->observation();
    const auto row = static_cast<Eigen::Index>(layout_.env_column[e] - layout_.group_offset[layout_.env_group[e]]);
    for (std::size_t k = 0; k < obs_dim_; ++k) group_obs_[layout_.env_group[e]](row, static_cast<Eigen::Index>(k)) = o[k];
  }

  published_ = std::make_unique<std::atomic<std::uint64_t>[]>(cfg_.groups);
  completed_ = std::make_unique<std::atomic<std::uint64_t>[]>(cfg_.groups);
  for (std::size_t g = 0; g < cfg_.groups; ++g) {
    published_[g].store(0);
    completed_[g].store(0);
  }
  worker_idle_.assign(cfg_.n_workers, 0.0);
  worker_hist_.assign(cfg_.n_workers, std::vector<std::size_t>(latency_bin_edges_us().size() - 1, 0));
  workers_.reserve(cfg_.n_workers);
  for (std::size_t w = 0; w < cfg_.n_workers; ++w) workers_.emplace_back([this, w] { worker_loop(w); });
}

Sampler::~Sampler() {
  stop_.store(true);
  for (std::size_t g = 0; g < cfg_.groups; ++g) {
    published_[g].fetch_add(1);
    published_[g].notify_all();
  }
  for (auto& t : workers_) t.join();
}

void Sampler::worker_loop(std::size_t w) {
  const auto edges = latency_bin_edges_us();
  std::uint64_t step = 0;
  while (true) {
    ++step;
    for (std::size_t g = 0; g < cfg_.groups; ++g) {
      const auto wait_start = Clock::now();
      std::uint64_t seen = published_[g].load(std::memory_order_acquire);
      while (seen < step) {
        published_[g].wait(seen, std::memory_order_acquire);
        seen = published_[g].load(std::memory_order_acquire);
      }
      if (stop_.load()) return;
      worker_idle_[w] += seconds_since(std::max(wait_start, collection_start_));

      if (!failed_.load()) {
        try {
          SampleBatch& batch = *batch_;
          const std::size_t t = group_row_[g];
          const std::size_t offset = layout_.group_offset[g];
          for (std::size_t j = g; j < cfg_.m_per_worker; j += cfg_.groups) {
            const std::size_t e = w * cfg_.m_per_worker + j;
            const std::size_t col = layout_.env_column[e];
            const auto row = static_cast<Eigen::Index>(col - offset);
            auto& env = *envs_[e];
            const auto step_start = Clock::now();
            auto res = env.step(group_actions_[g][col - offset]);
            worker_hist_[w][latency_bin(seconds_since(step_start) * 1e6, edges)] += 1;
            const std::size_t idx = batch.index(t, col);
            batch.rewards[idx] = res.reward;
            batch.dones[idx] = res.done ? 1 : 0;
            batch.timeouts[idx] = res.time_limit ? 1 : 0;
            if (res.done) {
              batch.episode_returns[idx] = *res.episode_return;
              if (res.time_limit)
                for (std::size_t k = 0; k < obs_dim_; ++k)
                  batch.timeout_obs(static_cast<Eigen::Index>(idx), static_cast<Eigen::Index>(k)) = res.obs[k];
              env.reset();
            }
            const auto& o = env.observation();
            for (std::size_t k = 0; k < obs_dim_; ++k) group_obs_[g](row, static_cast<Eigen::Index>(k)) = o[k];
          }
        } catch (...) {
          std::lock_guard lock(error_mutex_);
          if (!error_) error_ = std::current_exception();
          failed_.store(true);
        }
      }
      completed_[g].fetch_add(1, std::memory_order_acq_rel);
      completed_[g].notify_all();
    }
  }
}

void Sampler::wait_group_done(std::size_t g, double& idle) {
  const std::uint64_t target = published_[g].load(std::memory_order_relaxed) * cfg_.n_workers;
  const auto start = Clock::now();
  std::uint64_t seen = completed_[g].load(std::memory_order_acquire);
  while (seen < target) {
    completed_[g].wait(seen, std::memory_order_acquire);
    seen = completed_[g].load(std::memory_order_acquire);
  }
  idle += seconds_since(start);
}

void Sampler::check_failure() {
  if (!failed_.load()) return;
  std::lock_guard lock(error_mutex_);
  try {
    std::rethrow_exception(error_);
  } catch (const std::exception& e) {
    throw RuntimeError(std::string("sampler worker failed: ") + e.what());
  }
}

SampleBatch Sampler::collect(std::size_t horizon) {
  require_config(horizon >= 1, "collect horizon must be >= 1");
  check_failure();
  SampleBatch batch;
  batch.allocate(horizon, num_envs(), obs_dim_);
  batch_ = &batch;
  std::fill(worker_idle_.begin(), worker_idle_.end(), 0.0);
  for (auto& h : worker_hist_) std::fill(h.begin(), h.end(), 0);
  inference_order_.clear();

  double server_idle = 0.0;
  const auto start = Clock::now();
  collection_start_ = start;
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t g = 0; g < cfg_.groups; ++g) {
      wait_group_done(g, server_idle);
      check_failure();
      const std::size_t offset = layout_.group_offset[g];
      batch.obs.middleRows(static_cast<Eigen::Index>(batch.index(t, offset)),
                           static_cast<Eigen::Index>(layout_.group_size[g])) = group_obs_[g];
      InferenceOutput out = inference_(g, t, group_obs_[g]);
      check_inference(out, layout_.group_size[g], action_count_);
      store_inference(batch, out, t, offset);
      group_actions_[g] = std::move(out.actions);
      group_row_[g] = t;
      inference_order_.push_back(g);
      published_[g].fetch_add(1, std::memory_order_release);
      published_[g].notify_all();
    }
  }
  for (std::size_t g = 0; g < cfg_.groups; ++g) {
    wait_group_done(g, server_idle);
    batch.bootstrap_obs.middleRows(static_cast<Eigen::Index>(layout_.group_offset[g]),
                                   static_cast<Eigen::Index>(layout_.group_size[g])) = group_obs_[g];
  }
  const double elapsed = seconds_since(start);
  batch_ = nullptr;
  check_failure();

  stats_ = ThroughputStats{};
  stats_.elapsed_seconds = elapsed;
  stats_.steps = horizon * num_envs();
  stats_.steps_per_second = elapsed > 0 ? static_cast<double>(stats_.steps) / elapsed : 0.0;
  stats_.server_idle_fraction = elapsed > 0 ? std::clamp(server_idle / elapsed, 0.0, 1.0) : 0.0;
  double idle = 0.0;
  for (double v : worker_idle_) idle += v;
  stats_.worker_idle_fraction =
      elapsed > 0 ? std::clamp(idle / (elapsed * static_cast<double>(cfg_.n_workers)), 0.0, 1.0) : 0.0;
  stats_.latency_edges_us = latency_bin_edges_us();
  stats_.latency_counts.assign(stats_.latency_edges_us.size() - 1, 0);
  for (const auto& h : worker_hist_)
    for (std::size_t i = 0; i < h.size(); ++i) stats_.latency_counts[i] += h[i];
  return batch;
}

// ---- serial reference ----

SampleBatch serial_reference_collect(const SamplerConfig& cfg, const EnvFactory& factory, const InferenceFn& inference,
                                     std::size_t horizon) {
  const Layout layout = Layout::make(cfg);
  EnvSet set = build_envs(cfg, factory);
  const std::size_t dim = set.envs.front()->obs_dim();
  const std::size_t nenv = cfg.num_envs();

  // Per-column env index.
  std::vector<std::size_t> env_at(nenv);
  for (std::size_t e = 0; e < nenv; ++e) env_at[layout.env_column[e]] = e;

  SampleBatch batch;
  batch.allocate(horizon, nenv, dim);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t g = 0; g < cfg.groups; ++g) {
      const std::size_t off = layout.group_offset[g];
      const std::size_t size = layout.group_size[g];
      Matrix obs(static_cast<Eigen::Index>(size), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < size; ++i) {
        const auto& o = set.envs[env_at[off + i]]->observation();
        for (std::size_t k = 0; k < dim; ++k) obs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = o[k];
      }
      batch.obs.middleRows(static_cast<Eigen::Index>(batch.index(t, off)), static_cast<Eigen::Index>(size)) = obs;
      const InferenceOutput out = inference(g, t, obs);
      check_inference(out, size, set.envs.front()->action_count());
      store_inference(batch, out, t, off);
      for (std::size_t i = 0; i < size; ++i) {
        auto& env = *set.envs[env_at[off + i]];
        const std::size_t idx = batch.index(t, off + i);
        const auto res = env.step(out.actions[i]);
        batch.rewards[idx] = res.reward;
        batch.dones[idx] = res.done;
        batch.timeouts[idx] = res.time_limit;
        if (res.done) {
          batch.episode_returns[idx] = *res.episode_return;
          if (res.time_limit)
            for (std::size_t k = 0; k < dim; ++k)
              batch.timeout_obs(static_cast<Eigen::Index>(idx), static_cast<Eigen::Index>(k)) = res.obs[k];
          env.reset();
        }
      }
    }
  }
  for (std::size_t b = 0; b < nenv; ++b) {
    const auto& o = set.envs[env_at[b]]->observation();
    for (std::size_t k = 0; k < dim; ++k) batch.bootstrap_obs(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = o[k];
  }
  return batch;
}

}  // namespace rlscale::sampler
