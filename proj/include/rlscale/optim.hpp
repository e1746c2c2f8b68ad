#pragma once

#include "rlscale/types.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>

namespace rlscale::optim {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// All values except the parameters start at zero.
struct AdamState {
  std::int64_t t = 0;
  Vector m;
  Vector v;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(std::size_t n, AdamHyper h);
};

struct RmsPropHyper {
  double lr = 7e-4;
  double decay = 0.99;
  double eps = 1e-6;
};

// Squared-gradient accumulator only, no momentum.
struct RmsPropState {
  Vector v;
  RmsPropHyper hyper;

  RmsPropState() = default;
  RmsPropState(std::size_t n, RmsPropHyper h);
};

// Local sums carried between synchronizations with a central store.
struct AsyncAccumulators {
  Vector a_g;
  Vector a_g2;
  Vector a_s;
  int n = 0;

  AsyncAccumulators() = default;
  explicit AsyncAccumulators(std::size_t size);
  void reset();
};

// Bias-corrected step size r*sqrt(1-b2^t)/(1-b1^t).
double adam_step_size(const AdamHyper& h, std::int64_t t);

// Elementwise Adam on one contiguous range. Writes the applied step into `step`.
void adam_kernel(std::span<double> theta, std::span<double> m, std::span<double> v, std::span<const double> g,
                 std::span<double> step, double step_size, const AdamHyper& h);

// Applies one Adam update in place and returns the step s (theta <- theta - s).
Vector adam_step(AdamState& state, ParamVector& params, const GradVector& grad);

Vector rmsprop_step(RmsPropState& state, ParamVector& params, const GradVector& grad);

void async_accumulate(AsyncAccumulators& acc, const GradVector& g, const Vector& step, double beta1, double beta2);

// Central (tilde) values for one chunk or the whole vector.
struct CentralView {
  std::span<double> theta;
  std::span<double> m;
  std::span<double> v;
};

// Folds `n` accumulated local steps into the central state over [begin, end) and copies the
// result to the local view. Does not zero the accumulators.
void async_central_apply_range(CentralView central, CentralView local, const AsyncAccumulators& acc,
                               std::size_t begin, std::size_t end, double beta1, double beta2);

// Whole-vector form: applies, syncs local, then zeros the accumulators.
void async_central_apply(CentralView central, CentralView local, AsyncAccumulators& acc, double beta1,
                         double beta2);

double scale_lr_sqrt(double base_lr, std::size_t base_batch, std::size_t new_batch);

// Adam epsilon expressed as coefficient / batch size (0.01/L for categorical DQN).
double adam_eps_for_batch(double coefficient, std::size_t batch_size);

// Rescales grad in place so its L2 norm is at most max_norm; returns the original norm.
double clip_grad_norm(GradVector& grad, double max_norm);

// Runtime-selected update rule used by the learners.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(AdamState s) : state_(std::move(s)) {}
  Optimizer(RmsPropState s) : state_(std::move(s)) {}

  static Optimizer make(const std::string& kind, std::size_t n, double lr, double eps, double beta1 = 0.9,
                        double beta2 = 0.999, double decay = 0.99);

  Vector step(ParamVector& params, const GradVector& grad);

  bool is_adam() const { return std::holds_alternative<AdamState>(state_); }
  AdamState& adam() { return std::get<AdamState>(state_); }
  const AdamState& adam() const { return std::get<AdamState>(state_); }

 private:
  std::variant<AdamState, RmsPropState> state_;
};

}  // namespace rlscale::optim
