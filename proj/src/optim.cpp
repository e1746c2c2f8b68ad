#include "rlscale/optim.hpp"

#include <cmath>

namespace rlscale::optim {

AdamState::AdamState(std::size_t n, AdamHyper h)
    : m(Vector::Zero(static_cast<Eigen::Index>(n))), v(Vector::Zero(static_cast<Eigen::Index>(n))), hyper(h) {}

RmsPropState::RmsPropState(std::size_t n, RmsPropHyper h) : v(Vector::Zero(static_cast<Eigen::Index>(n))), hyper(h) {}

AsyncAccumulators::AsyncAccumulators(std::size_t size)
    : a_g(Vector::Zero(static_cast<Eigen::Index>(size))),
      a_g2(Vector::Zero(static_cast<Eigen::Index>(size))),
      a_s(Vector::Zero(static_cast<Eigen::Index>(size))) {}

void AsyncAccumulators::reset() {
  a_g.setZero();
  a_g2.setZero();
  a_s.setZero();
  n = 0;
}

double adam_step_size(const AdamHyper& h, std::int64_t t) {
  const double td = static_cast<double>(t);
  return h.lr * std::sqrt(1.0 - std::pow(h.beta2, td)) / (1.0 - std::pow(h.beta1, td));
}

void adam_kernel(std::span<double> theta, std::span<double> m, std::span<double> v, std::span<const double> g,
                 std::span<double> step, double step_size, const AdamHyper& h) {
  require_shape(theta.size() == m.size() && m.size() == v.size() && v.size() == g.size() && g.size() == step.size(),
                "adam kernel range lengths differ");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    step[i] = step_size * m[i] / (std::sqrt(v[i]) + h.eps);
    theta[i] -= step[i];
  }
}

namespace {
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<const double> span_of(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
}  // namespace

Vector adam_step(AdamState& state, ParamVector& params, const GradVector& grad) {
  require_shape(state.m.size() == params.size() && state.v.size() == params.size() && grad.size() == params.size(),
                "adam state/params/grad length mismatch");
  state.t += 1;
  Vector step(params.size());
  adam_kernel(span_of(params), span_of(state.m), span_of(state.v), span_of(grad), span_of(step),
              adam_step_size(state.hyper, state.t), state.hyper);
  return step;
}

Vector rmsprop_step(RmsPropState& state, ParamVector& params, const GradVector& grad) {
  require_shape(state.v.size() == params.size() && grad.size() == params.size(),
                "rmsprop state/params/grad length mismatch");
  const auto& h = state.hyper;
  state.v = h.decay * state.v + (1.0 - h.decay) * grad.cwiseProduct(grad);
  Vector step = (h.lr * grad.array() / (state.v.array().sqrt() + h.eps)).matrix();
  params -= step;
  return step;
}

void async_accumulate(AsyncAccumulators& acc, const GradVector& g, const Vector& step, double beta1, double beta2) {
  require_shape(acc.a_g.size() == g.size() && g.size() == step.size(), "accumulator length mismatch");
  acc.a_g = beta1 * acc.a_g + g;
  acc.a_g2 = beta2 * acc.a_g2 + g.cwiseProduct(g);
  acc.a_s += step;
  acc.n += 1;
}

void async_central_apply_range(CentralView central, CentralView local, const AsyncAccumulators& acc,
                               std::size_t begin, std::size_t end, double beta1, double beta2) {
  if (acc.n < 1) throw RuntimeError("central apply with zero accumulated local steps");
  require_shape(end <= central.theta.size() && end <= local.theta.size() &&
                    end <= static_cast<std::size_t>(acc.a_s.size()),
                "central apply range out of bounds");
  const double b1n = std::pow(beta1, acc.n);
  const double b2n = std::pow(beta2, acc.n);
  for (std::size_t i = begin; i < end; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    central.theta[i] = central.theta[i] - acc.a_s[k];
    central.m[i] = b1n * central.m[i] + (1.0 - beta1) * acc.a_g[k];
    central.v[i] = b2n * central.v[i] + (1.0 - beta2) * acc.a_g2[k];
    local.theta[i] = central.theta[i];
    local.m[i] = central.m[i];
    local.v[i] = central.v[i];
  }
}

void async_central_apply(CentralView central, CentralView local, AsyncAccumulators& acc, double beta1,
                         double beta2) {
  async_central_apply_range(central, local, acc, 0, central.theta.size(), beta1, beta2);
  acc.reset();
}

double scale_lr_sqrt(double base_lr, std::size_t base_batch, std::size_t new_batch) {
  require_config(base_batch > 0 && new_batch > 0, "batch sizes must be positive");
  return base_lr * std::sqrt(static_cast<double>(new_batch) / static_cast<double>(base_batch));
}

double adam_eps_for_batch(double coefficient, std::size_t batch_size) {
  require_config(batch_size > 0, "batch size must be positive");
  return coefficient / static_cast<double>(batch_size);
}

double clip_grad_norm(GradVector& grad, double max_norm) {
  const double norm = grad.norm();
  if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
  return norm;
}

Optimizer Optimizer::make(const std::string& kind, std::size_t n, double lr, double eps, double beta1, double beta2,
                          double decay) {
  if (kind == "adam") return Optimizer(AdamState(n, AdamHyper{lr, beta1, beta2, eps}));
  if (kind == "rmsprop") return Optimizer(RmsPropState(n, RmsPropHyper{lr, decay, eps}));
  throw ConfigError("unknown optimizer '" + kind + "'");
}

Vector Optimizer::step(ParamVector& params, const GradVector& grad) {
  return std::visit(
      [&](auto& s) -> Vector {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, AdamState>)
          return adam_step(s, params, grad);
        else
          return rmsprop_step(s, params, grad);
      },
      state_);
}

}  // namespace rlscale::optim
