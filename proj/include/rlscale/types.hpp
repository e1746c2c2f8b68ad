#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace rlscale {

// Row-major so that one row is one sample of a batch.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Flat parameter and gradient vectors share one layout (see nn::Network).
using ParamVector = Eigen::VectorXd;
using GradVector = Eigen::VectorXd;

using Rng = std::mt19937_64;

// Invalid configuration: bad dimensions, inconsistent settings, malformed files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched array shapes at an API boundary.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation-level failure (insufficient replay history, terminal env stepped, ...).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// splitmix64 finalizer; derives independent seeds from (base, index).
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace rlscale
