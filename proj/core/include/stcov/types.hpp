#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace stcov {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Spatio-temporal problem dimensions: T frames of N pixels each.
/// A covariance over these dims is square with side t_len * n_len and is
/// laid out as a t_len x t_len grid of n_len x n_len blocks (temporal-major:
/// Sigma = T_fac (kron) S_fac).
struct Dims {
  int t_len = 1;  // frames T
  int n_len = 1;  // pixels per frame N

  Dims() = default;
  Dims(int t, int n) : t_len(t), n_len(n) {
    if (t < 1 || n < 1) throw std::invalid_argument("Dims: t_len and n_len must be >= 1");
  }
  int side() const { return t_len * n_len; }
  bool operator==(const Dims&) const = default;
};

/// Errors that map to CLI exit code 2 (bad input).
class BadInputError : public std::runtime_error {
 public:
  explicit BadInputError(const std::string& what) : std::runtime_error(what) {}
};

/// Errors that map to CLI exit code 3 (numeric failure).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Errors that map to CLI exit code 4 (file format / version problems).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

/// Deterministic random stream. Wraps mt19937_64 with a Box-Muller normal
/// generator so the byte stream does not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return engine_step(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_step() >> 11) * (1.0 / 9007199254740992.0);
  }

  /// Standard normal via Box-Muller (pair cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

 private:
  std::uint64_t engine_step() {
    // splitmix64; full-period, trivially reproducible
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stcov
