#include "rlscale/nn.hpp"

#include <cmath>
#include <sstream>

namespace rlscale::nn {

namespace {

using ConstMatrixMap = Eigen::Map<const Matrix>;
using MatrixMap = Eigen::Map<Matrix>;

void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::Tanh:
      m = m.array().tanh();
      break;
    case Activation::Relu:
      m = m.array().max(0.0);
      break;
  }
}

// Derivative expressed through the post-activation value.
Matrix activation_grad(const Matrix& post, Activation a) {
  switch (a) {
    case Activation::Tanh:
      return (1.0 - post.array().square()).matrix();
    case Activation::Relu:
      return (post.array() > 0.0).cast<double>().matrix();
  }
  return {};
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::PolicyValue:
      return "policy-value";
    case HeadKind::Q:
      return "q";
    case HeadKind::QDist:
      return "q-dist";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

HeadKind head_from_string(const std::string& s) {
  if (s == "policy-value") return HeadKind::PolicyValue;
  if (s == "q") return HeadKind::Q;
  if (s == "q-dist") return HeadKind::QDist;
  throw ConfigError("unknown head '" + s + "'");
}

std::size_t NetSpec::output_dim() const {
  switch (head) {
    case HeadKind::PolicyValue:
      return actions + 1;
    case HeadKind::Q:
      return actions;
    case HeadKind::QDist:
      return actions * atoms;
  }
  return 0;
}

void NetSpec::validate() const {
  require_config(input_dim >= 1, "network input_dim must be >= 1");
  require_config(!hidden.empty(), "network needs at least one hidden layer");
  for (const auto& h : hidden) require_config(h.width >= 1, "hidden widths must be >= 1");
  require_config(actions >= 1, "network needs at least one action");
  if (head == HeadKind::QDist) require_config(atoms >= 1, "q-dist head needs atoms >= 1");
}

std::string NetSpec::canonical() const {
  std::ostringstream os;
  os << "in=" << input_dim << ";hidden=";
  for (const auto& h : hidden) os << h.width << ':' << to_string(h.activation) << ',';
  os << ";head=" << to_string(head) << ";actions=" << actions << ";atoms=" << (head == HeadKind::QDist ? atoms : 1);
  return os.str();
}

std::uint64_t NetSpec::hash() const { return fnv1a(canonical()); }

Network::Network(NetSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  std::size_t in = spec_.input_dim;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t out) {
    LayerLayout l;
    l.name = std::move(name);
    l.in = in;
    l.out = out;
    l.weight_offset = offset;
    l.bias_offset = offset + in * out;
    offset = l.end();
    layers_.push_back(l);
    in = out;
  };
  for (std::size_t i = 0; i < spec_.hidden.size(); ++i) add("fc" + std::to_string(i), spec_.hidden[i].width);
  add("head", spec_.output_dim());
  num_params_ = offset;
}

void Network::check_params(const ParamVector& params) const {
  require_shape(static_cast<std::size_t>(params.size()) == num_params_,
                "parameter vector length " + std::to_string(params.size()) + " != " + std::to_string(num_params_));
}

ParamVector Network::init(std::uint64_t seed) const {
  ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(num_params_));
  Rng rng(seed);
  for (const auto& l : layers_) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < l.in * l.out; ++i) p[static_cast<Eigen::Index>(l.weight_offset + i)] = u(rng);
  }
  return p;
}

Matrix Network::forward(const ParamVector& params, const Matrix& obs, ForwardCache* cache) const {
  check_params(params);
  require_shape(static_cast<std::size_t>(obs.cols()) == spec_.input_dim,
                "observation dim " + std::to_string(obs.cols()) + " != " + std::to_string(spec_.input_dim));
  require_shape(obs.rows() >= 1, "empty observation batch");
  if (cache) {
    cache->input = obs;
    cache->activations.clear();
  }
  Matrix h = obs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    ConstMatrixMap w(params.data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
    Eigen::Map<const Eigen::RowVectorXd> b(params.data() + l.bias_offset, static_cast<Eigen::Index>(l.out));
    Matrix z = h * w.transpose();
    z.rowwise() += b;
    if (i + 1 < layers_.size()) {
      apply_activation(z, spec_.hidden[i].activation);
      if (cache) cache->activations.push_back(z);
    }
    h = std::move(z);
  }
  if (cache) cache->output = h;
  return h;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix softmax_blocks(const Matrix& logits, std::size_t block) {
  require_shape(block >= 1 && logits.cols() % static_cast<Eigen::Index>(block) == 0, "softmax block size");
  const auto k = static_cast<Eigen::Index>(block);
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); c += k) {
      auto seg = logits.row(r).segment(c, k);
      const double mx = seg.maxCoeff();
      out.row(r).segment(c, k) = (seg.array() - mx).exp();
      out.row(r).segment(c, k) /= out.row(r).segment(c, k).sum();
    }
  }
  return out;
}

PolicyValue split_policy_value(const Matrix& raw, std::size_t actions) {
  const auto a = static_cast<Eigen::Index>(actions);
  require_shape(raw.cols() == a + 1, "policy-value output width");
  PolicyValue pv;
  pv.probs = softmax_rows(raw.leftCols(a));
  pv.values = raw.col(a);
  return pv;
}

PolicyValue Network::forward_policy_value(const ParamVector& params, const Matrix& obs) const {
  require_config(spec_.head == HeadKind::PolicyValue, "network head is not policy-value");
  return split_policy_value(forward(params, obs), spec_.actions);
}

Matrix Network::forward_q(const ParamVector& params, const Matrix& obs) const {
  require_config(spec_.head == HeadKind::Q, "network head is not q");
  return forward(params, obs);
}

Matrix Network::forward_q_dist(const ParamVector& params, const Matrix& obs) const {
  require_config(spec_.head == HeadKind::QDist, "network head is not q-dist");
  return softmax_blocks(forward(params, obs), spec_.atoms);
}

GradVector Network::backward(const ParamVector& params, const ForwardCache& cache, const Matrix& head_grad) const {
  check_params(params);
  require_shape(head_grad.rows() == cache.output.rows() && head_grad.cols() == cache.output.cols(),
                "head gradient shape does not match network output");
  GradVector grad = GradVector::Zero(static_cast<Eigen::Index>(num_params_));
  Matrix delta = head_grad;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& l = layers_[i];
    const Matrix& input = i == 0 ? cache.input : cache.activations[i - 1];
    MatrixMap gw(grad.data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + l.bias_offset, static_cast<Eigen::Index>(l.out));
    gw.noalias() = delta.transpose() * input;
    gb = delta.colwise().sum();
    if (i == 0) break;
    ConstMatrixMap w(params.data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
    Matrix back = delta * w;
    delta = back.cwiseProduct(activation_grad(cache.activations[i - 1], spec_.hidden[i - 1].activation));
  }
  return grad;
}

GradVector Network::backward(const ParamVector& params, const Matrix& obs, const Matrix& head_grad) const {
  ForwardCache cache;
  forward(params, obs, &cache);
  return backward(params, cache, head_grad);
}

GradVector finite_diff_grad(const ParamVector& params, const std::function<double(const ParamVector&)>& loss,
                            double epsilon) {
  GradVector g(params.size());
  ParamVector p = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + epsilon;
    const double up = loss(p);
    p[i] = orig - epsilon;
    const double down = loss(p);
    p[i] = orig;
    g[i] = (up - down) / (2.0 * epsilon);
  }
  return g;
}

}  // namespace rlscale::nn
