#include "rlscale/algos.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlscale::algos {

std::string to_string(Algo a) {
  switch (a) {
    case Algo::A2C:
      return "a2c";
    case Algo::PPO:
      return "ppo";
    case Algo::DQN:
      return "dqn";
    case Algo::CatDQN:
      return "catdqn";
  }
  return "?";
}

Algo algo_from_string(const std::string& s) {
  if (s == "a2c") return Algo::A2C;
  if (s == "ppo") return Algo::PPO;
  if (s == "dqn") return Algo::DQN;
  if (s == "catdqn") return Algo::CatDQN;
  throw ConfigError("unknown algorithm '" + s + "'");
}

bool is_policy_gradient(Algo a) { return a == Algo::A2C || a == Algo::PPO; }

double reference_intensity(Algo a) {
  switch (a) {
    case Algo::A2C:
      return 1.0;
    case Algo::PPO:
      return 4.0;
    case Algo::DQN:
    case Algo::CatDQN:
      return 8.0;
  }
  return 1.0;
}

void AlgoConfig::validate() const {
  require_config(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
  require_config(training_intensity > 0.0, "training intensity must be positive");
  require_config(entropy_coef >= 0.0 && value_coef >= 0.0, "loss coefficients must be nonnegative");
  if (algo == Algo::PPO) {
    require_config(ppo.clip > 0.0 && ppo.clip < 1.0, "ppo clip must be in (0, 1)");
    require_config(ppo.epochs >= 1 && ppo.minibatches >= 1, "ppo epochs and minibatches must be >= 1");
  }
  if (algo == Algo::DQN || algo == Algo::CatDQN) {
    require_config(dqn.batch_size >= 1, "dqn batch size must be >= 1");
    require_config(dqn.target_period >= 1, "target period must be >= 1");
    require_config(dqn.n_step >= 1, "n_step must be >= 1");
    require_config(dqn.eps_fraction > 0.0, "epsilon decay fraction must be positive");
  }
  if (algo == Algo::CatDQN) {
    require_config(cat.atoms >= 2, "categorical DQN needs at least 2 atoms");
    require_config(cat.auto_support || cat.z_min < cat.z_max, "z_min must be < z_max");
  }
}

ReturnsAdvantages compute_returns_advantages(const sampler::SampleBatch& batch, std::span<const double> bootstrap_values,
                                             std::span<const double> timeout_values, double gamma) {
  require_shape(batch.values.size() == batch.size(), "batch is missing agent values");
  require_shape(bootstrap_values.size() == batch.num_envs, "bootstrap values length != num envs");
  require_shape(timeout_values.empty() || timeout_values.size() == batch.size(), "timeout values length");
  ReturnsAdvantages out;
  out.returns.assign(batch.size(), 0.0);
  out.advantages.assign(batch.size(), 0.0);
  for (std::size_t b = 0; b < batch.num_envs; ++b) {
    double next = bootstrap_values[b];
    for (std::size_t t = batch.horizon; t-- > 0;) {
      const std::size_t i = batch.index(t, b);
      if (batch.dones[i]) next = (batch.timeouts[i] && !timeout_values.empty()) ? timeout_values[i] : 0.0;
      const double r = batch.rewards[i] + gamma * next;
      out.returns[i] = r;
      out.advantages[i] = r - batch.values[i];
      next = r;
    }
  }
  return out;
}

namespace {

void check_batch(const Matrix& obs, std::size_t n, const std::string& what) {
  require_shape(static_cast<std::size_t>(obs.rows()) == n, what + ": batch length mismatch");
  require_shape(n >= 1, what + ": empty batch");
}

// Shared policy-value loss; `old_probs` empty selects the A2C objective.
LossResult policy_value_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs,
                             std::span<const int> actions, std::span<const double> returns,
                             std::span<const double> advantages, std::span<const double> old_probs,
                             const AlgoConfig& cfg) {
  const std::size_t n = actions.size();
  check_batch(obs, n, "policy loss");
  require_shape(returns.size() == n && advantages.size() == n, "policy loss: returns/advantages length");
  require_shape(old_probs.empty() || old_probs.size() == n, "policy loss: old probs length");
  const auto na = static_cast<Eigen::Index>(net.num_actions());
  nn::ForwardCache cache;
  const Matrix raw = net.forward(params, obs, &cache);
  const nn::PolicyValue pv = nn::split_policy_value(raw, net.num_actions());

  Matrix head = Matrix::Zero(raw.rows(), raw.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult res;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int a = actions[i];
    require_shape(a >= 0 && a < na, "policy loss: action out of range");
    const double adv = advantages[i];
    const double v = pv.values[r];
    double entropy = 0.0;
    for (Eigen::Index j = 0; j < na; ++j) entropy -= pv.probs(r, j) * std::log(pv.probs(r, j));
    const double pa = pv.probs(r, a);

    double policy_term = 0.0;  // loss contribution
    double dlogit_scale = 0.0; // d(policy_term)/dz_j = dlogit_scale * (onehot_j - p_j)
    if (old_probs.empty()) {
      policy_term = -std::log(pa) * adv;
      dlogit_scale = -adv;
    } else {
      const double rho = pa / old_probs[i];
      const double unclipped = rho * adv;
      const double clipped_obj = std::clamp(rho, 1.0 - cfg.ppo.clip, 1.0 + cfg.ppo.clip) * adv;
      if (unclipped <= clipped_obj) {
        policy_term = -unclipped;
        dlogit_scale = -adv * rho;
      } else {
        policy_term = -clipped_obj;
        clipped += 1;
      }
    }
    const double value_err = returns[i] - v;
    res.loss += inv_n * (policy_term + cfg.value_coef * value_err * value_err - cfg.entropy_coef * entropy);
    for (Eigen::Index j = 0; j < na; ++j) {
      const double p = pv.probs(r, j);
      const double onehot = j == a ? 1.0 : 0.0;
      // -entropy_coef * dH/dz_j with dH/dz_j = -p_j (log p_j + H)
      head(r, j) = inv_n * (dlogit_scale * (onehot - p) + cfg.entropy_coef * p * (std::log(p) + entropy));
    }
    head(r, na) = inv_n * (-2.0 * cfg.value_coef * value_err);
  }
  res.grad = net.backward(params, cache, head);
  res.clip_fraction = static_cast<double>(clipped) * inv_n;
  return res;
}

}  // namespace

LossResult a2c_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> returns, std::span<const double> advantages, const AlgoConfig& cfg) {
  return policy_value_loss(net, params, obs, actions, returns, advantages, {}, cfg);
}

LossResult ppo_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> returns, std::span<const double> advantages,
                    std::span<const double> old_probs, const AlgoConfig& cfg) {
  require_shape(old_probs.size() == actions.size(), "ppo loss: old probs required");
  return policy_value_loss(net, params, obs, actions, returns, advantages, old_probs, cfg);
}

PolicyData select_rows(const PolicyData& data, std::span<const std::size_t> rows) {
  PolicyData out;
  out.obs.resize(static_cast<Eigen::Index>(rows.size()), data.obs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    out.obs.row(static_cast<Eigen::Index>(i)) = data.obs.row(static_cast<Eigen::Index>(r));
    out.actions.push_back(data.actions[r]);
    out.returns.push_back(data.returns[r]);
    out.advantages.push_back(data.advantages[r]);
    if (!data.old_probs.empty()) out.old_probs.push_back(data.old_probs[r]);
  }
  return out;
}

void normalize_advantages(std::vector<double>& adv) {
  if (adv.size() < 2) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double stdev = std::sqrt(var / n);
  for (double& a : adv) a = (a - mean) / (stdev + 1e-8);
}

PpoUpdateStats ppo_update(const nn::Network& net, ParamVector& params, const PolicyData& data, const AlgoConfig& cfg,
                          Rng& rng, const ApplyGradFn& apply) {
  const std::size_t n = data.size();
  const std::size_t mbs = cfg.ppo.minibatches;
  require_config(mbs >= 1 && n % mbs == 0,
                 "ppo minibatch count " + std::to_string(mbs) + " does not divide batch size " + std::to_string(n));
  require_shape(data.old_probs.size() == n, "ppo update needs recorded old probabilities");
  const std::size_t mb_size = n / mbs;
  std::vector<std::size_t> perm(n);
  PpoUpdateStats stats;
  for (std::size_t epoch = 0; epoch < cfg.ppo.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t k = 0; k < mbs; ++k) {
      PolicyData mb = select_rows(data, std::span<const std::size_t>(perm).subspan(k * mb_size, mb_size));
      normalize_advantages(mb.advantages);
      const LossResult lr = ppo_loss(net, params, mb.obs, mb.actions, mb.returns, mb.advantages, mb.old_probs, cfg);
      apply(params, lr.grad);
      stats.updates += 1;
      stats.mean_loss += lr.loss;
      stats.mean_clip_fraction += lr.clip_fraction;
    }
  }
  if (stats.updates) {
    stats.mean_loss /= static_cast<double>(stats.updates);
    stats.mean_clip_fraction /= static_cast<double>(stats.updates);
  }
  return stats;
}

int argmax_lowest(std::span<const double> row) {
  require_shape(!row.empty(), "argmax of empty row");
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

std::vector<double> dqn_target(const nn::Network& net, const ParamVector& target_params,
                               const ParamVector& online_params, const ReplayMinibatch& mb, bool double_q) {
  const std::size_t n = mb.size();
  const Matrix q_target = net.forward_q(target_params, mb.next_obs);
  Matrix q_online;
  if (double_q) q_online = net.forward_q(online_params, mb.next_obs);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    double boot = 0.0;
    if (!mb.dones[i]) {
      const Matrix& sel = double_q ? q_online : q_target;
      const int a = argmax_lowest({sel.row(r).data(), static_cast<std::size_t>(sel.cols())});
      boot = mb.discounts[i] * q_target(r, a);
    }
    y[i] = mb.returns[i] + boot;
  }
  return y;
}

LossResult dqn_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs, std::span<const int> actions,
                    std::span<const double> targets) {
  const std::size_t n = actions.size();
  check_batch(obs, n, "dqn loss");
  require_shape(targets.size() == n, "dqn loss: targets length");
  require_config(net.spec().head == nn::HeadKind::Q, "dqn loss needs a q head");
  nn::ForwardCache cache;
  const Matrix q = net.forward(params, obs, &cache);
  Matrix head = Matrix::Zero(q.rows(), q.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult res;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    require_shape(actions[i] >= 0 && actions[i] < q.cols(), "dqn loss: action out of range");
    const double err = targets[i] - q(r, actions[i]);
    res.loss += inv_n * err * err;
    head(r, actions[i]) = -2.0 * inv_n * err;
  }
  res.grad = net.backward(params, cache, head);
  return res;
}

Vector make_support(std::size_t atoms, double z_min, double z_max) {
  require_config(atoms >= 1, "support needs at least one atom");
  Vector z(static_cast<Eigen::Index>(atoms));
  if (atoms == 1) {
    z[0] = z_min;
    return z;
  }
  require_config(z_min < z_max, "z_min must be < z_max");
  const double dz = (z_max - z_min) / static_cast<double>(atoms - 1);
  for (std::size_t j = 0; j < atoms; ++j) z[static_cast<Eigen::Index>(j)] = z_min + dz * static_cast<double>(j);
  z[static_cast<Eigen::Index>(atoms - 1)] = z_max;
  return z;
}

namespace {

// Adds `mass` at position x, split linearly between the two support atoms around it.
void deposit(Eigen::Ref<Eigen::RowVectorXd> row, const Vector& z, double x, double mass) {
  const Eigen::Index k = z.size();
  if (x <= z[0]) {
    row[0] += mass;
    return;
  }
  if (x >= z[k - 1]) {
    row[k - 1] += mass;
    return;
  }
  const double* begin = z.data();
  const double* hi = std::upper_bound(begin, begin + k, x);
  const Eigen::Index u = hi - begin;
  const Eigen::Index l = u - 1;
  const double w_u = (x - z[l]) / (z[u] - z[l]);
  row[l] += mass * (1.0 - w_u);
  row[u] += mass * w_u;
}

}  // namespace

Matrix categorical_project(std::span<const double> rewards, std::span<const std::uint8_t> dones,
                           std::span<const double> discounts, const Matrix& next_dist, const Vector& support) {
  const Eigen::Index k = support.size();
  require_config(k >= 1, "categorical support needs at least one atom");
  for (Eigen::Index j = 1; j < k; ++j) require_config(support[j] > support[j - 1], "support must be strictly increasing");
  const std::size_t n = rewards.size();
  require_shape(dones.size() == n && discounts.size() == n, "projection input lengths");
  require_shape(static_cast<std::size_t>(next_dist.rows()) == n && next_dist.cols() == k, "next_dist shape");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(n), k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (dones[i]) {
      deposit(out.row(r), support, rewards[i], 1.0);
      continue;
    }
    for (Eigen::Index j = 0; j < k; ++j) deposit(out.row(r), support, rewards[i] + discounts[i] * support[j], next_dist(r, j));
  }
  return out;
}

Matrix expected_q(const Matrix& dists, const Vector& support) {
  const Eigen::Index k = support.size();
  require_shape(dists.cols() % k == 0, "distribution width not a multiple of atoms");
  const Eigen::Index actions = dists.cols() / k;
  Matrix q(dists.rows(), actions);
  for (Eigen::Index r = 0; r < dists.rows(); ++r)
    for (Eigen::Index a = 0; a < actions; ++a) q(r, a) = dists.row(r).segment(a * k, k).dot(support.transpose());
  return q;
}

Matrix catdqn_target(const nn::Network& net, const ParamVector& target_params, const ParamVector& online_params,
                     const ReplayMinibatch& mb, const Vector& support, bool double_q) {
  const auto k = support.size();
  const Matrix dist_target = net.forward_q_dist(target_params, mb.next_obs);
  const Matrix q_select = double_q ? expected_q(net.forward_q_dist(online_params, mb.next_obs), support)
                                   : expected_q(dist_target, support);
  Matrix next(static_cast<Eigen::Index>(mb.size()), k);
  for (Eigen::Index r = 0; r < next.rows(); ++r) {
    const int a = argmax_lowest({q_select.row(r).data(), static_cast<std::size_t>(q_select.cols())});
    next.row(r) = dist_target.row(r).segment(a * k, k);
  }
  return categorical_project(mb.returns, mb.dones, mb.discounts, next, support);
}

LossResult catdqn_loss(const nn::Network& net, const ParamVector& params, const Matrix& obs,
                       std::span<const int> actions, const Matrix& target_dists) {
  const std::size_t n = actions.size();
  check_batch(obs, n, "catdqn loss");
  const auto k = static_cast<Eigen::Index>(net.spec().atoms);
  require_shape(target_dists.rows() == obs.rows() && target_dists.cols() == k, "catdqn target shape");
  nn::ForwardCache cache;
  const Matrix raw = net.forward(params, obs, &cache);
  const Matrix dist = nn::softmax_blocks(raw, net.spec().atoms);
  Matrix head = Matrix::Zero(raw.rows(), raw.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  LossResult res;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::Index off = actions[i] * k;
    require_shape(actions[i] >= 0 && off + k <= raw.cols(), "catdqn loss: action out of range");
    const double mass = target_dists.row(r).sum();
    for (Eigen::Index j = 0; j < k; ++j) {
      const double m = target_dists(r, j);
      const double p = dist(r, off + j);
      if (m > 0.0) res.loss -= inv_n * m * std::log(p);
      head(r, off + j) = inv_n * (p * mass - m);
    }
  }
  res.grad = net.backward(params, cache, head);
  return res;
}

int epsilon_greedy(std::span<const double> q_row, double epsilon, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (epsilon > 0.0 && u(rng) < epsilon) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(q_row.size()) - 1);
    return pick(rng);
  }
  return argmax_lowest(q_row);
}

double linear_epsilon(std::size_t step, std::size_t total_steps, const DqnConfig& cfg) {
  const double horizon = cfg.eps_fraction * static_cast<double>(std::max<std::size_t>(total_steps, 1));
  const double frac = std::min(1.0, static_cast<double>(step) / horizon);
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac;
}

std::size_t updates_per_cycle(std::size_t sims, std::size_t horizon, std::size_t batch, double intensity,
                              std::size_t cap) {
  require_config(batch >= 1, "training batch must be >= 1");
  const double exact = intensity * static_cast<double>(sims * horizon) / static_cast<double>(batch);
  const auto n = static_cast<std::size_t>(std::llround(exact));
  require_config(n >= 1, "training intensity schedule yields zero updates per cycle");
  return cap > 0 ? std::min(n, cap) : n;
}

}  // namespace rlscale::algos
