#include "rlscale/replay.hpp"

#include <algorithm>
#include <mutex>

namespace rlscale::algos {

ReplayBuffer::ReplayBuffer(std::size_t total_capacity, std::size_t num_sims, std::size_t obs_dim)
    : num_sims_(num_sims), seg_capacity_(num_sims ? total_capacity / num_sims : 0), obs_dim_(obs_dim) {
  require_config(num_sims >= 1, "replay needs at least one simulator");
  require_config(seg_capacity_ >= 2, "replay capacity per simulator must be >= 2");
  require_config(obs_dim >= 1, "replay obs dim must be >= 1");
  obs_.assign(num_sims_ * seg_capacity_ * obs_dim_, 0.0);
  actions_.assign(num_sims_ * seg_capacity_, 0);
  rewards_.assign(num_sims_ * seg_capacity_, 0.0);
  dones_.assign(num_sims_ * seg_capacity_, 0);
  count_.assign(num_sims_, 0);
}

void ReplayBuffer::append(std::size_t sim, std::span<const double> obs, int action, double reward, bool done) {
  require_shape(sim < num_sims_, "replay simulator index out of range");
  require_shape(obs.size() == obs_dim_, "replay observation dim mismatch");
  std::unique_lock lock(mutex_);
  const std::size_t base = sim * seg_capacity_ + slot(count_[sim]);
  std::copy(obs.begin(), obs.end(), obs_.begin() + static_cast<std::ptrdiff_t>(base * obs_dim_));
  actions_[base] = action;
  rewards_[base] = reward;
  dones_[base] = done ? 1 : 0;
  count_[sim] += 1;
  total_appended_.fetch_add(1);
}

void ReplayBuffer::append_batch(const sampler::SampleBatch& batch) {
  require_shape(batch.num_envs == num_sims_, "batch width does not match replay simulator count");
  for (std::size_t t = 0; t < batch.horizon; ++t) {
    for (std::size_t b = 0; b < batch.num_envs; ++b) {
      const std::size_t i = batch.index(t, b);
      append(b, {batch.obs.row(static_cast<Eigen::Index>(i)).data(), obs_dim_}, batch.actions[i], batch.rewards[i],
             batch.dones[i] != 0);
    }
  }
}

std::size_t ReplayBuffer::segment_size(std::size_t sim) const {
  std::shared_lock lock(mutex_);
  return static_cast<std::size_t>(std::min<std::uint64_t>(count_.at(sim), seg_capacity_));
}

std::uint64_t ReplayBuffer::appended(std::size_t sim) const {
  std::shared_lock lock(mutex_);
  return count_.at(sim);
}

std::uint64_t ReplayBuffer::first_valid(std::size_t sim) const {
  return count_[sim] > seg_capacity_ ? count_[sim] - seg_capacity_ : 0;
}

// Index a is valid when a is still stored and s_{a+n} has been appended: a + n <= count - 1.
std::size_t ReplayBuffer::valid_in_sim(std::size_t sim, std::size_t n_step) const {
  const std::uint64_t lo = first_valid(sim);
  if (count_[sim] < n_step + 1) return 0;
  const std::uint64_t hi = count_[sim] - 1 - n_step;
  return hi >= lo ? static_cast<std::size_t>(hi - lo + 1) : 0;
}

std::size_t ReplayBuffer::valid_count(std::size_t n_step) const {
  std::shared_lock lock(mutex_);
  std::size_t total = 0;
  for (std::size_t s = 0; s < num_sims_; ++s) total += valid_in_sim(s, n_step);
  return total;
}

ReplayMinibatch ReplayBuffer::sample(std::size_t batch_size, std::size_t n_step, double gamma, Rng& rng) const {
  require_config(n_step >= 1 && n_step < seg_capacity_, "n_step must be in [1, segment capacity)");
  require_config(batch_size >= 1, "replay batch size must be >= 1");
  std::shared_lock lock(mutex_);
  std::vector<std::size_t> prefix(num_sims_ + 1, 0);
  for (std::size_t s = 0; s < num_sims_; ++s) prefix[s + 1] = prefix[s] + valid_in_sim(s, n_step);
  if (prefix.back() == 0) throw RuntimeError("insufficient replay history for n-step sampling");

  ReplayMinibatch mb;
  mb.obs.resize(static_cast<Eigen::Index>(batch_size), static_cast<Eigen::Index>(obs_dim_));
  mb.next_obs.resize(static_cast<Eigen::Index>(batch_size), static_cast<Eigen::Index>(obs_dim_));
  mb.actions.resize(batch_size);
  mb.returns.resize(batch_size);
  mb.dones.resize(batch_size);
  mb.discounts.resize(batch_size);
  mb.sims.resize(batch_size);
  mb.indices.resize(batch_size);

  std::uniform_int_distribution<std::size_t> pick(0, prefix.back() - 1);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t u = pick(rng);
    const auto it = std::upper_bound(prefix.begin(), prefix.end(), u);
    const std::size_t sim = static_cast<std::size_t>(std::distance(prefix.begin(), it)) - 1;
    const std::uint64_t a = first_valid(sim) + (u - prefix[sim]);
    const std::size_t base = sim * seg_capacity_;
    const auto row = static_cast<Eigen::Index>(i);

    mb.obs.row(row) = Eigen::Map<const Eigen::RowVectorXd>(&obs_[(base + slot(a)) * obs_dim_],
                                                            static_cast<Eigen::Index>(obs_dim_));
    mb.actions[i] = actions_[base + slot(a)];
    double ret = 0.0, disc = 1.0;
    bool done = false;
    for (std::size_t k = 0; k < n_step; ++k) {
      const std::size_t sl = base + slot(a + k);
      ret += disc * rewards_[sl];
      disc *= gamma;
      if (dones_[sl]) {
        done = true;
        break;
      }
    }
    mb.returns[i] = ret;
    mb.dones[i] = done ? 1 : 0;
    mb.discounts[i] = done ? 0.0 : disc;
    mb.next_obs.row(row) = Eigen::Map<const Eigen::RowVectorXd>(&obs_[(base + slot(a + n_step)) * obs_dim_],
                                                                 static_cast<Eigen::Index>(obs_dim_));
    mb.sims[i] = sim;
    mb.indices[i] = a;
  }
  total_sampled_.fetch_add(batch_size);
  return mb;
}

ReplayBuffer::Entry ReplayBuffer::entry(std::size_t sim, std::uint64_t index) const {
  std::shared_lock lock(mutex_);
  require_shape(sim < num_sims_, "replay simulator index out of range");
  if (index < first_valid(sim) || index >= count_[sim]) throw RuntimeError("replay index no longer stored");
  const std::size_t sl = sim * seg_capacity_ + slot(index);
  Entry e;
  e.obs.assign(obs_.begin() + static_cast<std::ptrdiff_t>(sl * obs_dim_),
               obs_.begin() + static_cast<std::ptrdiff_t>((sl + 1) * obs_dim_));
  e.action = actions_[sl];
  e.reward = rewards_[sl];
  e.done = dones_[sl] != 0;
  return e;
}

}  // namespace rlscale::algos
