#pragma once

#include "rlscale/optim.hpp"
#include "rlscale/types.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace rlscale::learner {

// Elementwise mean with a fixed pairwise-tree summation order over learner index.
GradVector allreduce_mean(std::span<const GradVector> grads);

// K learner units holding identical parameters; every step applies the all-reduced gradient
// through K identical optimizer states.
class SyncGroup {
 public:
  SyncGroup(std::size_t k, const ParamVector& init, const optim::Optimizer& prototype, double max_grad_norm = 0.0);

  std::size_t size() const { return params_.size(); }
  const ParamVector& params(std::size_t k) const { return params_.at(k); }

  struct StepInfo {
    GradVector grad;  // reduced (and clipped) gradient
    Vector step;      // applied update, identical on every learner
    double grad_norm = 0.0;
  };

  // Local gradients are computed concurrently, one task per learner.
  StepInfo step(const std::function<GradVector(std::size_t k, const ParamVector& params)>& local_grad);
  StepInfo apply(std::span<const GradVector> local_grads);

  // max_k ||theta_k - theta_0||_inf
  double max_divergence() const;

 private:
  std::vector<ParamVector> params_;
  std::vector<optim::Optimizer> optimizers_;
  double max_grad_norm_;
};

struct ChunkRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Equal-size split of [0, n) into c contiguous ranges (remainder spread over the first ranges).
std::vector<ChunkRange> partition_chunks(std::size_t n, std::size_t c);

// Central parameters and Adam moments, each chunk guarded by its own mutex.
class CentralStore {
 public:
  CentralStore(const ParamVector& init, std::size_t chunks, optim::AdamHyper hyper);

  std::size_t size() const { return static_cast<std::size_t>(theta_.size()); }
  std::size_t num_chunks() const { return chunks_.size(); }
  ChunkRange range(std::size_t c) const { return chunks_.at(c)->range; }
  std::uint64_t version(std::size_t c) const { return chunks_.at(c)->version.load(); }
  const optim::AdamHyper& hyper() const { return hyper_; }

  struct ChunkView {
    ChunkRange range;
    std::span<double> theta;
    std::span<double> m;
    std::span<double> v;
    std::uint64_t version;  // committed writes before this access
  };

  // Runs fn(view) with the chunk guard held. A write commits (version += 1) when
  // `commit` is set.
  template <typename F>
  decltype(auto) with_chunk(std::size_t c, bool commit, F&& fn) {
    Chunk& ch = *chunks_.at(c);
    std::lock_guard lock(ch.mutex);
    struct Bump {
      Chunk& ch;
      bool on;
      ~Bump() {
        if (on) ch.version.fetch_add(1);
      }
    } bump{ch, commit};
    ChunkView view{ch.range, span(theta_, ch.range), span(m_, ch.range), span(v_, ch.range), ch.version.load()};
    return fn(view);
  }

  // Copies central theta, m and v into the given vectors chunk by chunk; returns versions read.
  std::vector<std::uint64_t> pull(ParamVector& theta, Vector* m = nullptr, Vector* v = nullptr);
  ParamVector snapshot();

 private:
  struct Chunk {
    ChunkRange range;
    std::mutex mutex;
    std::atomic<std::uint64_t> version{0};
  };
  static std::span<double> span(Vector& v, ChunkRange r) { return {v.data() + r.begin, r.size()}; }

  Vector theta_, m_, v_;
  optim::AdamHyper hyper_;
  std::vector<std::unique_ptr<Chunk>> chunks_;
};

// Learner unit of the asynchronous topology. Local parameters and Adam state; accumulators
// for multi-step synchronization.
class AsyncLearner {
 public:
  explicit AsyncLearner(CentralStore& store, double max_grad_norm = 0.0);

  const ParamVector& params() const { return theta_; }
  const optim::AdamState& local_state() const { return local_; }
  const optim::AsyncAccumulators& accumulators() const { return acc_; }
  int pending_steps() const { return acc_.n; }
  std::int64_t updates() const { return local_.t; }

  // One update against the store: per chunk, pull central values and moments, apply Adam
  // with the precomputed gradient, write back.
  Vector async_step(CentralStore& store, const GradVector& grad);

  // Local Adam step whose effect is accumulated for a later synchronize().
  Vector local_step(const GradVector& grad);
  // Folds the accumulated local steps into the store; local state then equals central.
  void synchronize(CentralStore& store);
  // local_step, then synchronize once `n_local_steps` have accumulated.
  Vector multi_step(CentralStore& store, const GradVector& grad, int n_local_steps);

  // Refreshes local parameters and moments from the store; returns the chunk versions read.
  std::vector<std::uint64_t> pull(CentralStore& store);

 private:
  GradVector clipped(const GradVector& grad) const;

  ParamVector theta_;
  optim::AdamState local_;
  optim::AsyncAccumulators acc_;
  double max_grad_norm_;
};

}  // namespace rlscale::learner
