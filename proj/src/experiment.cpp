#include "rlscale/experiment.hpp"

#include "rlscale/algos.hpp"
#include "rlscale/learner.hpp"
#include "rlscale/optim.hpp"
#include "rlscale/replay.hpp"
#include "rlscale/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

namespace rlscale::experiment {

using config::ExperimentConfig;
using config::Topology;
using telemetry::fmt;

const std::vector<std::pair<std::string, std::vector<std::string>>>& metric_schemas() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> schemas{
      {"scores", {"env_steps", "learner", "episode_return", "online_score"}},
      {"evals", {"env_steps", "eval_score", "episodes"}},
      {"updates", {"cycle", "learner", "env_steps", "transitions", "updates", "batch_size", "samples_used"}},
      {"norms", {"update", "learner", "layer", "param_norm", "grad_norm", "step_norm"}},
      {"cosine", {"update", "env_steps", "cos_full_half", "cos_half_half", "running_mean"}},
      {"pulls", {"learner", "cycle", "t", "versions"}},
  };
  return schemas;
}

namespace {

// Metric sinks of one run directory; learners may write from several threads.
class Sinks {
 public:
  Sinks(const std::filesystem::path& dir, bool enabled) : enabled_(enabled) {
    if (!enabled_) return;
    std::filesystem::create_directories(dir);
    for (const auto& [name, cols] : metric_schemas()) writers_.emplace(name, telemetry::CsvWriter(dir / (name + ".csv"), cols));
  }

  void row(const std::string& family, const std::vector<std::string>& fields) {
    if (!enabled_) return;
    std::lock_guard lock(mutex_);
    writers_.at(family).row(fields);
  }

  void flush() {
    if (!enabled_) return;
    std::lock_guard lock(mutex_);
    for (auto& [name, w] : writers_) w.flush();
  }

 private:
  bool enabled_;
  std::mutex mutex_;
  std::map<std::string, telemetry::CsvWriter> writers_;
};

// Where a learner's parameters live and how an update reaches them.
class ParamBackend {
 public:
  virtual ~ParamBackend() = default;
  virtual const ParamVector& params() const = 0;
  // Applies one gradient; returns the parameter step.
  virtual Vector apply(const GradVector& grad) = 0;
  virtual void end_optimization() {}
  virtual std::optional<std::vector<std::uint64_t>> pull() { return std::nullopt; }
};

class SingleBackend final : public ParamBackend {
 public:
  SingleBackend(ParamVector init, optim::Optimizer opt, double max_norm)
      : params_(std::move(init)), opt_(std::move(opt)), max_norm_(max_norm) {}
  const ParamVector& params() const override { return params_; }
  Vector apply(const GradVector& grad) override {
    GradVector g = grad;
    optim::clip_grad_norm(g, max_norm_);
    return opt_.step(params_, g);
  }

 private:
  ParamVector params_;
  optim::Optimizer opt_;
  double max_norm_;
};

// All-reduce through a barrier: the last learner to arrive reduces and steps the group.
class SyncHub {
 public:
  SyncHub(std::size_t k, const ParamVector& init, const optim::Optimizer& proto, double max_norm)
      : group_(k, init, proto, max_norm), grads_(k), barrier_(static_cast<std::ptrdiff_t>(k), Completion{this}) {}

  Vector apply(std::size_t k, const GradVector& grad) {
    grads_[k] = grad;
    barrier_.arrive_and_wait();
    if (failed_.load()) throw RuntimeError("a synchronous learner failed");
    return step_;
  }

  // Releases the other learners when one of them stops early with an error.
  void fail() {
    failed_.store(true);
    barrier_.arrive_and_drop();
  }

  const ParamVector& params(std::size_t k) const { return group_.params(k); }
  double max_divergence() const { return group_.max_divergence(); }

 private:
  struct Completion {
    SyncHub* hub;
    void operator()() noexcept {
      if (hub->failed_.load()) return;
      try {
        hub->step_ = hub->group_.apply(hub->grads_).step;
      } catch (...) {
        hub->failed_.store(true);
      }
    }
  };

  learner::SyncGroup group_;
  std::vector<GradVector> grads_;
  Vector step_;
  std::atomic<bool> failed_{false};
  std::barrier<Completion> barrier_;
};

class SyncBackend final : public ParamBackend {
 public:
  SyncBackend(SyncHub& hub, std::size_t k) : hub_(hub), k_(k) {}
  const ParamVector& params() const override { return hub_.params(k_); }
  Vector apply(const GradVector& grad) override { return hub_.apply(k_, grad); }

 private:
  SyncHub& hub_;
  std::size_t k_;
};

class AsyncBackend final : public ParamBackend {
 public:
  AsyncBackend(learner::CentralStore& store, double max_norm, int local_steps)
      : store_(store), learner_(store, max_norm), local_steps_(local_steps) {}
  const ParamVector& params() const override { return learner_.params(); }
  Vector apply(const GradVector& grad) override {
    if (local_steps_ == 1) return learner_.async_step(store_, grad);
    return learner_.multi_step(store_, grad, local_steps_);
  }
  void end_optimization() override { learner_.synchronize(store_); }
  std::optional<std::vector<std::uint64_t>> pull() override { return learner_.pull(store_); }

 private:
  learner::CentralStore& store_;
  learner::AsyncLearner learner_;
  int local_steps_;
};

sampler::EnvFactory env_factory(const envs::EnvSpec& spec) {
  return [spec] { return envs::make_env(spec); };
}

Vector support_for(const ExperimentConfig& cfg) {
  if (cfg.algo.algo != algos::Algo::CatDQN) return {};
  double lo = cfg.algo.cat.z_min, hi = cfg.algo.cat.z_max;
  if (cfg.algo.cat.auto_support) std::tie(lo, hi) = envs::return_bounds(cfg.env);
  return algos::make_support(cfg.algo.cat.atoms, lo, hi);
}

optim::Optimizer make_optimizer(const ExperimentConfig& cfg, std::size_t n_params) {
  return optim::Optimizer::make(cfg.optim.kind, n_params, cfg.resolved_lr(), cfg.resolved_eps(), cfg.optim.beta1,
                                cfg.optim.beta2, cfg.optim.decay);
}

// Seed streams derived from the experiment seed.
enum SeedSlot : std::uint64_t {
  kInitSeed = 1,
  kSamplerSeed = 100,
  kActSeed = 200,
  kTrainSeed = 300,
  kEvalSeed = 400,
  kSecondarySeed = 500,
};

// Replay-driven Q-learning state of one network (used by primary and secondary learners).
struct QLearner {
  const nn::Network* net = nullptr;
  Vector support;
  ParamVector target;
  std::size_t batch = 0;
  std::size_t updates = 0;
  Rng rng;

  GradVector gradient(const algos::AlgoConfig& a, const ParamVector& params, const algos::ReplayMinibatch& mb) const {
    if (a.algo == algos::Algo::DQN) {
      const auto y = algos::dqn_target(*net, target, params, mb, a.dqn.double_q);
      return algos::dqn_loss(*net, params, mb.obs, mb.actions, y).grad;
    }
    const Matrix tgt = algos::catdqn_target(*net, target, params, mb, support, a.dqn.double_q);
    return algos::catdqn_loss(*net, params, mb.obs, mb.actions, tgt).grad;
  }
};

struct Shared {
  const ExperimentConfig& cfg;
  Sinks& sinks;
  std::atomic<std::size_t> claimed{0};  // async: env steps handed out so far
  std::size_t cycles = 0;               // single/sync: cycles per learner
};

class LearnerUnit {
 public:
  // Called after each cycle's optimization phase (secondary-learner harness).
  using CycleHook = std::function<void(LearnerUnit&, std::size_t cycle_updates, std::size_t env_steps)>;

  LearnerUnit(Shared& shared, std::size_t index, ParamBackend& backend)
      : shared_(shared),
        cfg_(shared.cfg),
        index_(index),
        backend_(backend),
        net_(cfg_.net_spec()),
        support_(support_for(cfg_)),
        act_rng_(mix_seed(cfg_.seed, kActSeed + index)),
        train_seed_(mix_seed(cfg_.seed, kTrainSeed + index)),
        train_rng_(train_seed_),
        norms_(net_.layers()) {
    if (!algos::is_policy_gradient(cfg_.algo.algo)) {
      replay_ = std::make_unique<algos::ReplayBuffer>(cfg_.algo.dqn.replay_capacity, cfg_.sampler.num_envs(),
                                                      cfg_.env.obs_dim());
      q_.net = &net_;
      q_.support = support_;
      q_.target = backend_.params();
      q_.batch = cfg_.algo.dqn.batch_size;
    }
    sampler::SamplerConfig sc = cfg_.sampler;
    sc.seed = mix_seed(cfg_.seed, kSamplerSeed + index);
    sampler_ = std::make_unique<sampler::Sampler>(
        sc, env_factory(cfg_.env),
        [this](std::size_t group, std::size_t t, const Matrix& obs) { return infer(group, t, obs); });
  }

  void set_hook(CycleHook hook) { hook_ = std::move(hook); }

  void run() {
    const std::size_t bt = cfg_.cycle_steps();
    const std::size_t k = cfg_.topology.learners;
    std::size_t last_end = 0;
    for (std::size_t cycle = 0;; ++cycle) {
      std::size_t start = 0;
      if (cfg_.topology.kind == Topology::Async) {
        start = shared_.claimed.fetch_add(bt);
        if (start + bt > cfg_.total_steps) break;
      } else {
        if (cycle >= shared_.cycles) break;
        start = cycle * bt * k;
      }
      const std::size_t end = start + (cfg_.topology.kind == Topology::Async ? bt : bt * k);
      cycle_ = cycle;
      step_clock_ = start;
      run_cycle(cycle, start, end);
      last_end = end;
    }
    if (index_ == 0 && cfg_.eval.interval_steps > 0 && last_end > 0 &&
        (eval_log.empty() || eval_log.back().env_steps != last_end))
      run_eval(last_end);
  }

  // Evaluation of arbitrary parameters with this learner's network.
  telemetry::EvalResult evaluate(const ParamVector& params, std::size_t eval_index) const {
    const double eps = algos::is_policy_gradient(cfg_.algo.algo) ? 0.0 : cfg_.eval.epsilon;
    return telemetry::eval_pause(telemetry::network_policy(net_, params, eps, support_), env_factory(cfg_.env),
                                 cfg_.eval.eval_steps, cfg_.eval.max_path_len,
                                 mix_seed(cfg_.seed, kEvalSeed + eval_index));
  }

  const nn::Network& net() const { return net_; }
  const Vector& support() const { return support_; }
  ParamBackend& backend() { return backend_; }
  algos::ReplayBuffer* replay() { return replay_.get(); }
  std::uint64_t train_seed() const { return train_seed_; }
  bool learning() const { return learning_; }

  telemetry::ScoreTracker scores;
  std::vector<ScorePoint> score_log;
  std::vector<EvalPoint> eval_log;
  std::vector<PullRecord> pulls;
  std::size_t updates = 0;
  std::size_t transitions = 0;
  std::size_t samples_used = 0;
  std::size_t max_env_steps = 0;
  double cos_fh_sum = 0.0, cos_hh_sum = 0.0;
  std::size_t cos_count = 0;

 private:
  sampler::InferenceOutput infer(std::size_t group, std::size_t t, const Matrix& obs) {
    if (cfg_.topology.pull_horizon > 0 && group == 0 && t % cfg_.topology.pull_horizon == 0) {
      if (auto v = backend_.pull()) pulls.push_back({index_, cycle_, t, std::move(*v)});
    }
    const ParamVector& params = backend_.params();
    const auto rows = static_cast<std::size_t>(obs.rows());
    sampler::InferenceOutput out;
    out.actions.resize(rows);
    if (algos::is_policy_gradient(cfg_.algo.algo)) {
      const auto pv = net_.forward_policy_value(params, obs);
      out.values.resize(rows);
      out.action_probs.resize(rows);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double x = u(act_rng_);
        Eigen::Index a = 0;
        double c = pv.probs(r, 0);
        while (x >= c && a + 1 < pv.probs.cols()) c += pv.probs(r, ++a);
        out.actions[i] = static_cast<int>(a);
        out.values[i] = pv.values[r];
        out.action_probs[i] = pv.probs(r, a);
      }
      return out;
    }
    const Matrix q = cfg_.algo.algo == algos::Algo::DQN ? net_.forward_q(params, obs)
                                                         : algos::expected_q(net_.forward_q_dist(params, obs), support_);
    // The schedule advances with this learner's share of the step budget.
    const std::size_t k = cfg_.topology.kind == Topology::Async ? 1 : cfg_.topology.learners;
    const double eps =
        algos::linear_epsilon(step_clock_ + t * cfg_.sampler.num_envs() * k, cfg_.total_steps, cfg_.algo.dqn);
    for (std::size_t i = 0; i < rows; ++i)
      out.actions[i] = algos::epsilon_greedy({q.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(q.cols())},
                                             eps, act_rng_);
    return out;
  }

  Vector update(const GradVector& grad) {
    Vector step = backend_.apply(grad);
    ++updates;
    if (cfg_.telemetry.norm_interval > 0) {
      norms_.observe(grad, step);
      if (norms_.pending() >= cfg_.telemetry.norm_interval) {
        const auto rec = norms_.emit(backend_.params(), updates);
        for (std::size_t l = 0; l < rec.layers.size(); ++l)
          shared_.sinks.row("norms", {fmt(rec.step), fmt(index_), rec.layers[l], fmt(rec.param_norms[l]),
                                      fmt(rec.grad_norms[l]), fmt(rec.step_norms[l])});
        shared_.sinks.row("norms", {fmt(rec.step), fmt(index_), "total", fmt(rec.total_param_norm),
                                    fmt(rec.total_grad_norm), fmt(rec.total_step_norm)});
      }
    }
    return step;
  }

  void run_eval(std::size_t env_steps) {
    const auto res = evaluate(backend_.params(), eval_log.size());
    eval_log.push_back({env_steps, res.mean_return, res.episodes});
    shared_.sinks.row("evals", {fmt(env_steps), res.mean_return ? fmt(*res.mean_return) : "nan", fmt(res.episodes)});
    shared_.sinks.flush();
  }

  void run_cycle(std::size_t cycle, std::size_t start, std::size_t end_steps) {
    const sampler::SampleBatch batch = sampler_->collect();
    const std::size_t bt = batch.size();
    for (std::size_t t = 0; t < batch.horizon; ++t)
      for (std::size_t b = 0; b < batch.num_envs; ++b) {
        const double r = batch.episode_returns[batch.index(t, b)];
        if (std::isnan(r)) continue;
        const double s = scores.record(r);
        const std::size_t at = start + (t + 1) * batch.num_envs;
        score_log.push_back({at, index_, r, s});
        shared_.sinks.row("scores", {fmt(at), fmt(index_), fmt(r), fmt(s)});
      }

    const std::size_t updates_before = updates, used_before = samples_used;
    std::size_t batch_size = 0;
    if (algos::is_policy_gradient(cfg_.algo.algo))
      batch_size = policy_gradient_cycle(batch, end_steps);
    else
      batch_size = q_learning_cycle(batch);
    backend_.end_optimization();

    transitions += bt;
    max_env_steps = std::max(max_env_steps, end_steps);
    const std::size_t cycle_updates = updates - updates_before;
    shared_.sinks.row("updates", {fmt(cycle), fmt(index_), fmt(end_steps), fmt(bt), fmt(cycle_updates),
                                  fmt(batch_size), fmt(samples_used - used_before)});
    for (const auto& p : pulls) {
      if (p.cycle != cycle) continue;
      std::string v;
      for (std::size_t i = 0; i < p.versions.size(); ++i) v += (i ? ";" : "") + std::to_string(p.versions[i]);
      shared_.sinks.row("pulls", {fmt(p.learner), fmt(p.cycle), fmt(p.t), v});
    }
    if (hook_) hook_(*this, cycle_updates, end_steps);

    const std::size_t iv = cfg_.eval.interval_steps;
    if (index_ == 0 && iv > 0 && end_steps / iv > eval_bucket_) {
      eval_bucket_ = end_steps / iv;
      run_eval(end_steps);
    }
  }

  std::size_t policy_gradient_cycle(const sampler::SampleBatch& batch, std::size_t end_steps) {
    const ParamVector& params = backend_.params();
    const auto boot = net_.forward_policy_value(params, batch.bootstrap_obs).values;
    std::vector<double> timeout_values;
    if (std::any_of(batch.timeouts.begin(), batch.timeouts.end(), [](auto x) { return x != 0; })) {
      const auto v = net_.forward_policy_value(params, batch.timeout_obs).values;
      timeout_values.assign(v.data(), v.data() + v.size());
    }
    const auto ra = algos::compute_returns_advantages(
        batch, {boot.data(), static_cast<std::size_t>(boot.size())}, timeout_values, cfg_.algo.gamma);

    if (cfg_.algo.algo == algos::Algo::A2C) {
      if (cfg_.telemetry.cosine_probe && index_ == 0) probe(batch, ra, end_steps);
      const auto loss = algos::a2c_loss(net_, params, batch.obs, batch.actions, ra.returns, ra.advantages, cfg_.algo);
      update(loss.grad);
      samples_used += batch.size();
      return batch.size();
    }
    algos::PolicyData data{batch.obs, batch.actions, ra.returns, ra.advantages, batch.action_probs};
    ParamVector p = params;
    const auto stats = algos::ppo_update(net_, p, data, cfg_.algo, train_rng_, [&](ParamVector& pp, const GradVector& g) {
      update(g);
      pp = backend_.params();
    });
    const std::size_t mb = batch.size() / cfg_.algo.ppo.minibatches;
    samples_used += stats.updates * mb;
    return mb;
  }

  // Halves split by simulator column so that each half holds whole trajectories.
  void probe(const sampler::SampleBatch& batch, const algos::ReturnsAdvantages& ra, std::size_t end_steps) {
    std::vector<std::size_t> rows;
    const std::size_t half = batch.num_envs / 2;
    for (int side = 0; side < 2; ++side)
      for (std::size_t b = side ? half : 0; b < (side ? batch.num_envs : half); ++b)
        for (std::size_t t = 0; t < batch.horizon; ++t) rows.push_back(batch.index(t, b));
    const ParamVector& params = backend_.params();
    const auto res = telemetry::cosine_probe(rows, [&](std::span<const std::size_t> sel) {
      Matrix obs(static_cast<Eigen::Index>(sel.size()), batch.obs.cols());
      std::vector<int> a;
      std::vector<double> r, adv;
      for (std::size_t i = 0; i < sel.size(); ++i) {
        obs.row(static_cast<Eigen::Index>(i)) = batch.obs.row(static_cast<Eigen::Index>(sel[i]));
        a.push_back(batch.actions[sel[i]]);
        r.push_back(ra.returns[sel[i]]);
        adv.push_back(ra.advantages[sel[i]]);
      }
      return algos::a2c_loss(net_, params, obs, a, r, adv, cfg_.algo).grad;
    });
    cos_fh_sum += res.cos_full_half;
    cos_hh_sum += res.cos_half_half;
    ++cos_count;
    shared_.sinks.row("cosine", {fmt(updates + 1), fmt(end_steps), fmt(res.cos_full_half), fmt(res.cos_half_half),
                                 fmt(cos_fh_sum / static_cast<double>(cos_count))});
  }

  std::size_t q_learning_cycle(const sampler::SampleBatch& batch) {
    const auto& d = cfg_.algo.dqn;
    // Time-limit endings are stored as terminal.
    replay_->append_batch(batch);
    learning_ = replay_->total_appended() >= d.min_history_factor * d.batch_size && replay_->valid_count(d.n_step) > 0;
    if (!learning_) return d.batch_size;
    const std::size_t n = algos::updates_per_cycle(batch.num_envs, batch.horizon, d.batch_size,
                                                   cfg_.algo.training_intensity, d.max_updates_per_cycle);
    for (std::size_t i = 0; i < n; ++i) {
      const auto mb = replay_->sample(d.batch_size, d.n_step, cfg_.algo.gamma, train_rng_);
      update(q_.gradient(cfg_.algo, backend_.params(), mb));
      samples_used += d.batch_size;
      if (updates % d.target_period == 0) q_.target = backend_.params();
    }
    return d.batch_size;
  }

  Shared& shared_;
  const ExperimentConfig& cfg_;
  std::size_t index_;
  ParamBackend& backend_;
  nn::Network net_;
  Vector support_;
  Rng act_rng_;
  std::uint64_t train_seed_;
  Rng train_rng_;
  telemetry::NormTracker norms_;
  std::unique_ptr<algos::ReplayBuffer> replay_;
  QLearner q_;
  bool learning_ = false;
  std::unique_ptr<sampler::Sampler> sampler_;
  CycleHook hook_;
  std::size_t cycle_ = 0;
  std::size_t step_clock_ = 0;
  std::size_t eval_bucket_ = 0;
};

std::filesystem::path run_dir_of(const ExperimentConfig& cfg) { return std::filesystem::path(cfg.out_dir) / cfg.name; }

void write_summary(const std::filesystem::path& path, const telemetry::Summary& s) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << telemetry::format_summary(s);
}

template <typename Body>
void run_threads(std::size_t k, Body body) {
  std::vector<std::exception_ptr> errors(k);
  {
    std::vector<std::jthread> threads;
    for (std::size_t i = 1; i < k; ++i)
      threads.emplace_back([&, i] {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    try {
      body(0);
    } catch (...) {
      errors[0] = std::current_exception();
    }
  }
  // Report the root cause ahead of follow-on failures.
  for (auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const RuntimeError& re) {
      if (std::string(re.what()) == "a synchronous learner failed") continue;
      throw;
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  if (cfg.telemetry.cosine_probe)
    require_config(cfg.algo.algo == algos::Algo::A2C && cfg.sampler.num_envs() % 2 == 0,
                   "the cosine probe runs on A2C with an even number of simulators");
  const auto dir = run_dir_of(cfg);
  Sinks sinks(dir, opts.write_files);
  if (opts.write_files) config::save(cfg, dir / "config.json");

  const nn::Network net(cfg.net_spec());
  const ParamVector init = net.init(mix_seed(cfg.seed, kInitSeed));
  const std::size_t k = cfg.topology.learners;
  Shared shared{cfg, sinks};
  const std::size_t per_cycle = cfg.cycle_steps() * (cfg.topology.kind == Topology::Async ? 1 : k);
  shared.cycles = std::max<std::size_t>(1, cfg.total_steps / per_cycle);

  std::vector<std::unique_ptr<ParamBackend>> backends;
  std::unique_ptr<SyncHub> hub;
  std::unique_ptr<learner::CentralStore> store;
  switch (cfg.topology.kind) {
    case Topology::Single:
      backends.push_back(std::make_unique<SingleBackend>(init, make_optimizer(cfg, net.num_params()), cfg.optim.max_grad_norm));
      break;
    case Topology::Sync:
      hub = std::make_unique<SyncHub>(k, init, make_optimizer(cfg, net.num_params()), cfg.optim.max_grad_norm);
      for (std::size_t i = 0; i < k; ++i) backends.push_back(std::make_unique<SyncBackend>(*hub, i));
      break;
    case Topology::Async:
      store = std::make_unique<learner::CentralStore>(
          init, cfg.topology.chunks, optim::AdamHyper{cfg.resolved_lr(), cfg.optim.beta1, cfg.optim.beta2, cfg.resolved_eps()});
      for (std::size_t i = 0; i < k; ++i)
        backends.push_back(std::make_unique<AsyncBackend>(*store, cfg.optim.max_grad_norm, cfg.topology.local_steps));
      break;
  }

  std::vector<std::unique_ptr<LearnerUnit>> units;
  for (std::size_t i = 0; i < k; ++i) units.push_back(std::make_unique<LearnerUnit>(shared, i, *backends[i]));
  run_threads(k, [&](std::size_t i) {
    try {
      units[i]->run();
    } catch (...) {
      if (hub) hub->fail();
      throw;
    }
  });

  RunResult res;
  res.run_dir = opts.write_files ? dir : std::filesystem::path{};
  res.final_params = store ? store->snapshot() : backends[0]->params();
  for (const auto& u : units) {
    res.updates += u->updates;
    res.transitions += u->transitions;
    res.samples_used += u->samples_used;
    res.env_steps = std::max(res.env_steps, u->max_env_steps);
    res.scores.insert(res.scores.end(), u->score_log.begin(), u->score_log.end());
    res.pulls.insert(res.pulls.end(), u->pulls.begin(), u->pulls.end());
  }
  const auto& u0 = *units[0];
  res.evals = u0.eval_log;
  res.final_online_score = u0.scores.score();
  res.measured_intensity =
      res.transitions ? static_cast<double>(res.samples_used) / static_cast<double>(res.transitions) : 0.0;
  res.cosine_samples = u0.cos_count;
  if (u0.cos_count) {
    res.cos_full_half_mean = u0.cos_fh_sum / static_cast<double>(u0.cos_count);
    res.cos_half_half_mean = u0.cos_hh_sum / static_cast<double>(u0.cos_count);
  }

  auto& s = res.summary;
  s["episodes"] = static_cast<double>(res.scores.size());
  if (res.final_online_score) s["final_online_score"] = *res.final_online_score;
  s["updates"] = static_cast<double>(res.updates);
  s["env_steps"] = static_cast<double>(res.env_steps);
  if (res.transitions) s["measured_intensity"] = res.measured_intensity;
  for (auto it = res.evals.rbegin(); it != res.evals.rend(); ++it)
    if (it->score) {
      s["last_eval_score"] = *it->score;
      break;
    }
  if (u0.cos_count) {
    s["cos_full_half_mean"] = res.cos_full_half_mean;
    s["cos_half_half_mean"] = res.cos_half_half_mean;
  }

  sinks.flush();
  if (opts.write_files) {
    telemetry::save_params(dir / "params.bin", cfg.net_spec(), res.final_params);
    write_summary(dir / "summary.txt", s);
  }
  return res;
}

SecondaryResult run_secondary_learner(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  require_config(!algos::is_policy_gradient(cfg.algo.algo), "the secondary learner needs a replay-based algorithm");
  require_config(cfg.topology.kind == Topology::Single, "the secondary learner runs beside a single primary learner");
  const auto dir = run_dir_of(cfg);
  Sinks sinks(dir, opts.write_files);
  std::unique_ptr<telemetry::CsvWriter> sec_scores, sec_norms;
  if (opts.write_files) {
    config::save(cfg, dir / "config.json");
    sec_scores = std::make_unique<telemetry::CsvWriter>(dir / "secondary_scores.csv",
                                                        std::vector<std::string>{"env_steps", "learner", "eval_score", "episodes"});
    sec_norms = std::make_unique<telemetry::CsvWriter>(
        dir / "secondary_norms.csv",
        std::vector<std::string>{"env_steps", "learner", "layer", "param_norm", "grad_norm", "step_norm"});
  }

  const nn::Network net(cfg.net_spec());
  const ParamVector init = net.init(mix_seed(cfg.seed, kInitSeed));
  Shared shared{cfg, sinks};
  shared.cycles = std::max<std::size_t>(1, cfg.total_steps / cfg.cycle_steps());

  // The primary's optimizer runs through a single backend; the secondary owns an identical
  // construction for its own batch size.
  SingleBackend primary_backend(init, make_optimizer(cfg, net.num_params()), cfg.optim.max_grad_norm);
  ExperimentConfig sec_cfg = cfg;
  sec_cfg.algo.dqn.batch_size = cfg.secondary.batch_size;
  SingleBackend secondary_backend(init, make_optimizer(sec_cfg, net.num_params()), cfg.optim.max_grad_norm);

  // Primary gradients and steps are observed by wrapping its backend.
  class Observed final : public ParamBackend {
   public:
    Observed(ParamBackend& inner, telemetry::NormTracker& tracker) : inner_(inner), tracker_(tracker) {}
    const ParamVector& params() const override { return inner_.params(); }
    Vector apply(const GradVector& grad) override {
      Vector s = inner_.apply(grad);
      tracker_.observe(grad, s);
      return s;
    }

   private:
    ParamBackend& inner_;
    telemetry::NormTracker& tracker_;
  };
  telemetry::NormTracker p_norms(net.layers()), s_norms(net.layers());
  Observed observed(primary_backend, p_norms);
  LearnerUnit unit(shared, 0, observed);

  QLearner sec;
  sec.net = &unit.net();
  sec.support = unit.support();
  sec.target = init;
  sec.batch = cfg.secondary.batch_size;
  sec.rng.seed(cfg.secondary.shared_minibatch_rng ? unit.train_seed() : mix_seed(cfg.seed, kSecondarySeed));

  SecondaryResult res;
  std::size_t learning_cycles = 0;
  const std::size_t norm_every = std::max<std::size_t>(1, cfg.telemetry.norm_interval);
  const auto& d = cfg.algo.dqn;

  auto emit = [&](const char* who, telemetry::NormTracker& tracker, const ParamVector& params, std::size_t env_steps,
                  std::vector<telemetry::NormRecord>& log) {
    auto rec = tracker.emit(params, env_steps);
    if (sec_norms) {
      for (std::size_t l = 0; l < rec.layers.size(); ++l)
        sec_norms->row({fmt(env_steps), who, rec.layers[l], fmt(rec.param_norms[l]), fmt(rec.grad_norms[l]),
                        fmt(rec.step_norms[l])});
      sec_norms->row({fmt(env_steps), who, "total", fmt(rec.total_param_norm), fmt(rec.total_grad_norm),
                      fmt(rec.total_step_norm)});
    }
    log.push_back(std::move(rec));
  };

  unit.set_hook([&](LearnerUnit& u, std::size_t primary_updates, std::size_t env_steps) {
    if (u.learning() && primary_updates > 0) {
      // Matched consumption: L_s * n_s = L_p * n_p (rounded).
      const double exact = static_cast<double>(primary_updates * d.batch_size) / static_cast<double>(sec.batch);
      const std::size_t n_s = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(exact)));
      for (std::size_t i = 0; i < n_s; ++i) {
        const auto mb = u.replay()->sample(sec.batch, d.n_step, cfg.algo.gamma, sec.rng);
        const GradVector g = sec.gradient(cfg.algo, secondary_backend.params(), mb);
        const Vector s = secondary_backend.apply(g);
        s_norms.observe(g, s);
        ++sec.updates;
        if (sec.updates % d.target_period == 0) sec.target = secondary_backend.params();
      }
      if (++learning_cycles % norm_every == 0) {
        emit("primary", p_norms, observed.params(), env_steps, res.primary_norms);
        emit("secondary", s_norms, secondary_backend.params(), env_steps, res.secondary_norms);
      }
    }
    const std::size_t iv = cfg.eval.interval_steps;
    const std::size_t start = env_steps - cfg.cycle_steps();
    if (iv > 0 && env_steps / iv > start / iv) {
      const std::size_t idx = res.primary_evals.size();
      const auto pe = u.evaluate(observed.params(), idx);
      const auto se = u.evaluate(secondary_backend.params(), idx);
      res.primary_evals.push_back({env_steps, pe.mean_return, pe.episodes});
      res.secondary_evals.push_back({env_steps, se.mean_return, se.episodes});
      if (sec_scores) {
        sec_scores->row({fmt(env_steps), "primary", pe.mean_return ? fmt(*pe.mean_return) : "nan", fmt(pe.episodes)});
        sec_scores->row({fmt(env_steps), "secondary", se.mean_return ? fmt(*se.mean_return) : "nan", fmt(se.episodes)});
        sec_scores->flush();
        sec_norms->flush();
      }
    }
  });
  unit.run();

  res.run_dir = opts.write_files ? dir : std::filesystem::path{};
  res.primary_params = observed.params();
  res.secondary_params = secondary_backend.params();
  res.primary_updates = unit.updates;
  res.secondary_updates = sec.updates;
  sinks.flush();
  if (sec_scores) {
    sec_scores->flush();
    sec_norms->flush();
    telemetry::save_params(dir / "params.bin", cfg.net_spec(), res.primary_params);
    telemetry::save_params(dir / "secondary_params.bin", cfg.net_spec(), res.secondary_params);
  }
  return res;
}

std::vector<BenchPoint> sample_bench(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const auto dir = run_dir_of(cfg);
  std::unique_ptr<telemetry::CsvWriter> csv;
  if (opts.write_files) {
    std::filesystem::create_directories(dir);
    config::save(cfg, dir / "config.json");
    csv = std::make_unique<telemetry::CsvWriter>(
        dir / "bench.csv", std::vector<std::string>{"n_workers", "m_per_worker", "groups", "num_envs", "horizon",
                                                    "steps_per_second", "server_idle_fraction", "worker_idle_fraction"});
  }
  ExperimentConfig pg = cfg;
  pg.algo.algo = algos::Algo::A2C;
  const nn::Network net(pg.net_spec());
  const ParamVector params = net.init(mix_seed(cfg.seed, kInitSeed));

  std::vector<BenchPoint> out;
  for (std::size_t n : cfg.bench.n_workers)
    for (std::size_t m : cfg.bench.m_per_worker)
      for (std::size_t g : cfg.bench.groups) {
        if (n == 0 || m == 0 || (g != 1 && g != 2) || (g == 2 && m < 2)) continue;
        std::vector<double> sps, server_idle, worker_idle;
        for (std::size_t r = 0; r < cfg.bench.repeats; ++r) {
          sampler::SamplerConfig sc = cfg.sampler;
          sc.n_workers = n;
          sc.m_per_worker = m;
          sc.groups = g;
          sc.seed = mix_seed(cfg.seed, kSamplerSeed + r);
          Rng rng(mix_seed(cfg.seed, kActSeed + r));
          const auto delay = std::chrono::duration<double, std::micro>(cfg.bench.inference_delay_us);
          sampler::Sampler sampler(sc, env_factory(cfg.env), [&](std::size_t, std::size_t, const Matrix& obs) {
            const auto pv = net.forward_policy_value(params, obs);
            if (cfg.bench.inference_delay_us > 0) std::this_thread::sleep_for(delay);
            sampler::InferenceOutput o;
            std::uniform_real_distribution<double> u(0.0, 1.0);
            for (Eigen::Index i = 0; i < pv.probs.rows(); ++i) {
              const double x = u(rng);
              Eigen::Index a = 0;
              double c = pv.probs(i, 0);
              while (x >= c && a + 1 < pv.probs.cols()) c += pv.probs(i, ++a);
              o.actions.push_back(static_cast<int>(a));
            }
            return o;
          });
          sampler.collect();  // warm-up
          double elapsed = 0.0, sidle = 0.0, widle = 0.0;
          std::size_t steps = 0;
          for (std::size_t c = 0; c < cfg.bench.cycles; ++c) {
            sampler.collect();
            const auto& st = sampler.throughput_stats();
            elapsed += st.elapsed_seconds;
            steps += st.steps;
            sidle += st.server_idle_fraction * st.elapsed_seconds;
            widle += st.worker_idle_fraction * st.elapsed_seconds;
          }
          sps.push_back(elapsed > 0 ? static_cast<double>(steps) / elapsed : 0.0);
          server_idle.push_back(elapsed > 0 ? sidle / elapsed : 0.0);
          worker_idle.push_back(elapsed > 0 ? widle / elapsed : 0.0);
        }
        auto median = [](std::vector<double> v) {
          std::sort(v.begin(), v.end());
          const std::size_t h = v.size() / 2;
          return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
        };
        BenchPoint p{n, m, g, cfg.sampler.horizon, median(sps), median(server_idle), median(worker_idle)};
        out.push_back(p);
        if (csv) {
          csv->row({fmt(n), fmt(m), fmt(g), fmt(n * m), fmt(p.horizon), fmt(p.steps_per_second),
                    fmt(p.server_idle_fraction), fmt(p.worker_idle_fraction)});
          csv->flush();
        }
      }
  return out;
}

}  // namespace rlscale::experiment
