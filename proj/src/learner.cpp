#include "rlscale/learner.hpp"

#include <thread>

namespace rlscale::learner {

GradVector allreduce_mean(std::span<const GradVector> grads) {
  require_shape(!grads.empty(), "all-reduce over zero learners");
  const auto n = grads.front().size();
  for (const auto& g : grads) require_shape(g.size() == n, "all-reduce gradient length mismatch");
  // Pairwise tree: level-by-level sums of (2i, 2i+1).
  std::vector<GradVector> level(grads.begin(), grads.end());
  while (level.size() > 1) {
    std::vector<GradVector> next;
    next.reserve((level.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(level[i] + level[i + 1]);
    if (level.size() % 2) next.push_back(std::move(level.back()));
    level = std::move(next);
  }
  return level.front() / static_cast<double>(grads.size());
}

// ---- SyncGroup ----

SyncGroup::SyncGroup(std::size_t k, const ParamVector& init, const optim::Optimizer& prototype, double max_grad_norm)
    : params_(k, init), optimizers_(k, prototype), max_grad_norm_(max_grad_norm) {
  require_config(k >= 1, "sync group needs at least one learner");
}

SyncGroup::StepInfo SyncGroup::step(const std::function<GradVector(std::size_t, const ParamVector&)>& local_grad) {
  std::vector<GradVector> grads(size());
  std::vector<std::exception_ptr> errors(size());
  {
    std::vector<std::jthread> tasks;
    for (std::size_t k = 1; k < size(); ++k)
      tasks.emplace_back([&, k] {
        try {
          grads[k] = local_grad(k, params_[k]);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    try {
      grads[0] = local_grad(0, params_[0]);
    } catch (...) {
      errors[0] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return apply(grads);
}

SyncGroup::StepInfo SyncGroup::apply(std::span<const GradVector> local_grads) {
  require_shape(local_grads.size() == size(), "sync step needs one gradient per learner");
  for (const auto& g : local_grads)
    require_shape(g.size() == params_[0].size(), "sync step gradient length mismatch");
  StepInfo info;
  info.grad = allreduce_mean(local_grads);
  info.grad_norm = optim::clip_grad_norm(info.grad, max_grad_norm_);
  for (std::size_t k = 0; k < size(); ++k) {
    Vector s = optimizers_[k].step(params_[k], info.grad);
    if (k == 0) info.step = std::move(s);
  }
  return info;
}

double SyncGroup::max_divergence() const {
  double d = 0.0;
  for (const auto& p : params_) d = std::max(d, (p - params_[0]).cwiseAbs().maxCoeff());
  return d;
}

// ---- CentralStore ----

std::vector<ChunkRange> partition_chunks(std::size_t n, std::size_t c) {
  require_config(c >= 1 && c <= n, "chunk count must be in [1, parameter count]");
  std::vector<ChunkRange> out;
  const std::size_t base = n / c, extra = n % c;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out.push_back({begin, begin + len});
    begin += len;
  }
  return out;
}

CentralStore::CentralStore(const ParamVector& init, std::size_t chunks, optim::AdamHyper hyper)
    : theta_(init), m_(Vector::Zero(init.size())), v_(Vector::Zero(init.size())), hyper_(hyper) {
  for (const auto& r : partition_chunks(static_cast<std::size_t>(init.size()), chunks)) {
    auto ch = std::make_unique<Chunk>();
    ch->range = r;
    chunks_.push_back(std::move(ch));
  }
}

std::vector<std::uint64_t> CentralStore::pull(ParamVector& theta, Vector* m, Vector* v) {
  require_shape(theta.size() == theta_.size(), "pull target length mismatch");
  std::vector<std::uint64_t> versions;
  for (std::size_t c = 0; c < num_chunks(); ++c) {
    versions.push_back(with_chunk(c, false, [&](const ChunkView& view) {
      const auto b = static_cast<Eigen::Index>(view.range.begin);
      const auto len = static_cast<Eigen::Index>(view.range.size());
      theta.segment(b, len) = Eigen::Map<const Vector>(view.theta.data(), len);
      if (m) m->segment(b, len) = Eigen::Map<const Vector>(view.m.data(), len);
      if (v) v->segment(b, len) = Eigen::Map<const Vector>(view.v.data(), len);
      return view.version;
    }));
  }
  return versions;
}

ParamVector CentralStore::snapshot() {
  ParamVector out(theta_.size());
  pull(out);
  return out;
}

// ---- AsyncLearner ----

AsyncLearner::AsyncLearner(CentralStore& store, double max_grad_norm)
    : theta_(ParamVector::Zero(static_cast<Eigen::Index>(store.size()))),
      local_(store.size(), store.hyper()),
      acc_(store.size()),
      max_grad_norm_(max_grad_norm) {
  pull(store);
}

GradVector AsyncLearner::clipped(const GradVector& grad) const {
  require_shape(grad.size() == theta_.size(), "async gradient length mismatch");
  GradVector g = grad;
  optim::clip_grad_norm(g, max_grad_norm_);
  return g;
}

Vector AsyncLearner::async_step(CentralStore& store, const GradVector& grad) {
  if (acc_.n > 0) synchronize(store);
  const GradVector g = clipped(grad);
  local_.t += 1;
  const double step_size = optim::adam_step_size(local_.hyper, local_.t);
  Vector step(theta_.size());
  for (std::size_t c = 0; c < store.num_chunks(); ++c) {
    store.with_chunk(c, true, [&](const CentralStore::ChunkView& view) {
      const auto b = static_cast<Eigen::Index>(view.range.begin);
      const auto len = static_cast<Eigen::Index>(view.range.size());
      theta_.segment(b, len) = Eigen::Map<const Vector>(view.theta.data(), len);
      local_.m.segment(b, len) = Eigen::Map<const Vector>(view.m.data(), len);
      local_.v.segment(b, len) = Eigen::Map<const Vector>(view.v.data(), len);
      const auto sz = view.range.size();
      optim::adam_kernel({theta_.data() + b, sz}, {local_.m.data() + b, sz}, {local_.v.data() + b, sz},
                         {g.data() + b, sz}, {step.data() + b, sz}, step_size, local_.hyper);
      std::copy_n(theta_.data() + b, sz, view.theta.data());
      std::copy_n(local_.m.data() + b, sz, view.m.data());
      std::copy_n(local_.v.data() + b, sz, view.v.data());
    });
  }
  return step;
}

Vector AsyncLearner::local_step(const GradVector& grad) {
  const GradVector g = clipped(grad);
  Vector s = optim::adam_step(local_, theta_, g);
  optim::async_accumulate(acc_, g, s, local_.hyper.beta1, local_.hyper.beta2);
  return s;
}

void AsyncLearner::synchronize(CentralStore& store) {
  if (acc_.n == 0) return;
  optim::CentralView local{{theta_.data(), static_cast<std::size_t>(theta_.size())},
                           {local_.m.data(), static_cast<std::size_t>(local_.m.size())},
                           {local_.v.data(), static_cast<std::size_t>(local_.v.size())}};
  for (std::size_t c = 0; c < store.num_chunks(); ++c) {
    store.with_chunk(c, true, [&](const CentralStore::ChunkView& view) {
      // Offset the chunk spans so that indices stay global.
      const std::size_t b = view.range.begin;
      optim::CentralView central{{view.theta.data() - b, view.range.end},
                                 {view.m.data() - b, view.range.end},
                                 {view.v.data() - b, view.range.end}};
      optim::async_central_apply_range(central, local, acc_, b, view.range.end, local_.hyper.beta1,
                                       local_.hyper.beta2);
    });
  }
  acc_.reset();
}

Vector AsyncLearner::multi_step(CentralStore& store, const GradVector& grad, int n_local_steps) {
  require_config(n_local_steps >= 1, "local steps per synchronization must be >= 1");
  Vector s = local_step(grad);
  if (acc_.n >= n_local_steps) synchronize(store);
  return s;
}

std::vector<std::uint64_t> AsyncLearner::pull(CentralStore& store) {
  require_config(acc_.n == 0, "pull with unsynchronized local steps");
  return store.pull(theta_, &local_.m, &local_.v);
}

}  // namespace rlscale::learner
