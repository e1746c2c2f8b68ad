#pragma once

#include "rlscale/types.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace rlscale::nn {

enum class Activation { Tanh, Relu };
enum class HeadKind { PolicyValue, Q, QDist };

std::string to_string(Activation a);
std::string to_string(HeadKind h);
Activation activation_from_string(const std::string& s);
HeadKind head_from_string(const std::string& s);

struct HiddenLayer {
  std::size_t width = 64;
  Activation activation = Activation::Tanh;
  bool operator==(const HiddenLayer&) const = default;
};

// Dense network description. The head is a single linear layer whose outputs are
//   PolicyValue: A logits followed by one state value,
//   Q:           A action values,
//   QDist:       A blocks of K atom logits (softmax per block).
struct NetSpec {
  std::size_t input_dim = 1;
  std::vector<HiddenLayer> hidden{{64, Activation::Tanh}, {64, Activation::Tanh}};
  HeadKind head = HeadKind::PolicyValue;
  std::size_t actions = 2;
  std::size_t atoms = 1;

  std::size_t output_dim() const;
  void validate() const;
  // Stable text form; hashed into parameter files.
  std::string canonical() const;
  std::uint64_t hash() const;
  bool operator==(const NetSpec&) const = default;
};

struct LayerLayout {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
  std::size_t begin() const { return weight_offset; }
  std::size_t end() const { return bias_offset + out; }
};

struct ForwardCache {
  Matrix input;
  std::vector<Matrix> activations;  // post-activation output of each hidden layer
  Matrix output;                    // raw head output
};

struct PolicyValue {
  Matrix probs;   // batch x A
  Vector values;  // batch
};

class Network {
 public:
  explicit Network(NetSpec spec);

  const NetSpec& spec() const { return spec_; }
  std::size_t num_params() const { return num_params_; }
  std::size_t num_actions() const { return spec_.actions; }
  const std::vector<LayerLayout>& layers() const { return layers_; }

  // Glorot-uniform weights, zero biases.
  ParamVector init(std::uint64_t seed) const;

  Matrix forward(const ParamVector& params, const Matrix& obs, ForwardCache* cache = nullptr) const;

  PolicyValue forward_policy_value(const ParamVector& params, const Matrix& obs) const;
  Matrix forward_q(const ParamVector& params, const Matrix& obs) const;
  // batch x (A*K); each K-wide block is a distribution over atoms.
  Matrix forward_q_dist(const ParamVector& params, const Matrix& obs) const;

  // Reverse-mode gradient of <head_grad, raw head output> with respect to params.
  GradVector backward(const ParamVector& params, const ForwardCache& cache, const Matrix& head_grad) const;
  GradVector backward(const ParamVector& params, const Matrix& obs, const Matrix& head_grad) const;

 private:
  void check_params(const ParamVector& params) const;

  NetSpec spec_;
  std::vector<LayerLayout> layers_;
  std::size_t num_params_ = 0;
};

// Row-wise softmax; also used blockwise for atom distributions.
Matrix softmax_rows(const Matrix& logits);
Matrix softmax_blocks(const Matrix& logits, std::size_t block);
PolicyValue split_policy_value(const Matrix& raw, std::size_t actions);

GradVector finite_diff_grad(const ParamVector& params, const std::function<double(const ParamVector&)>& loss,
                            double epsilon = 1e-6);

}  // namespace rlscale::nn
