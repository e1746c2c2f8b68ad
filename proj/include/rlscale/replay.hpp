#pragma once

#include "rlscale/sampler.hpp"
#include "rlscale/types.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <shared_mutex>
#include <span>
#include <vector>

namespace rlscale::algos {

// n-step transitions drawn from replay.
struct ReplayMinibatch {
  Matrix obs;
  Matrix next_obs;                   // observation n steps later (unused where done)
  std::vector<int> actions;
  std::vector<double> returns;       // sum_{k<K} gamma^k r_{t+k}, K = n or steps up to done
  std::vector<std::uint8_t> dones;   // an episode ended within the n steps
  std::vector<double> discounts;     // gamma^n, or 0 where done
  std::vector<std::size_t> sims;
  std::vector<std::uint64_t> indices;  // absolute append index within the simulator's stream

  std::size_t size() const { return actions.size(); }
};

// Fixed total capacity split into one ring per simulator. Entry i of a ring holds
// (s_i, a_i, r_i, done_i); s_{i+1} is the next entry of the same ring.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t total_capacity, std::size_t num_sims, std::size_t obs_dim);

  std::size_t num_sims() const { return num_sims_; }
  std::size_t segment_capacity() const { return seg_capacity_; }
  std::size_t obs_dim() const { return obs_dim_; }

  void append(std::size_t sim, std::span<const double> obs, int action, double reward, bool done);
  // Appends every column of a batch in time order (column b goes to simulator b).
  void append_batch(const sampler::SampleBatch& batch);

  // Transitions stored for one simulator (<= segment capacity).
  std::size_t segment_size(std::size_t sim) const;
  std::uint64_t appended(std::size_t sim) const;
  std::uint64_t total_appended() const { return total_appended_.load(); }
  std::uint64_t total_sampled() const { return total_sampled_.load(); }

  // Number of (sim, index) pairs from which an n-step transition can be assembled.
  std::size_t valid_count(std::size_t n_step) const;

  // Uniform with replacement over valid pairs. Throws RuntimeError when none exist.
  ReplayMinibatch sample(std::size_t batch_size, std::size_t n_step, double gamma, Rng& rng) const;

  // Reads the stored entry at an absolute index (must still be in the ring).
  struct Entry {
    std::vector<double> obs;
    int action = 0;
    double reward = 0.0;
    bool done = false;
  };
  Entry entry(std::size_t sim, std::uint64_t index) const;

 private:
  std::size_t slot(std::uint64_t index) const { return static_cast<std::size_t>(index % seg_capacity_); }
  std::uint64_t first_valid(std::size_t sim) const;
  std::size_t valid_in_sim(std::size_t sim, std::size_t n_step) const;

  std::size_t num_sims_, seg_capacity_, obs_dim_;
  std::vector<double> obs_;  // sim-major rings of obs_dim-wide rows
  std::vector<int> actions_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> dones_;
  std::vector<std::uint64_t> count_;  // appends per simulator
  std::atomic<std::uint64_t> total_appended_{0};
  mutable std::atomic<std::uint64_t> total_sampled_{0};
  mutable std::shared_mutex mutex_;
};

}  // namespace rlscale::algos
