#pragma once

#include <utility>
#include <vector>

#include "stcov/types.hpp"

namespace stcov {

/// Rearrangement of an NT x NT block matrix into a T^2 x N^2 matrix whose
/// rank-1 components correspond to Kronecker products. Row (i-1)*T + j
/// (1-based) holds the row-major vectorization of block (i, j), so
/// rearrange(A (kron) B) = vec(A) vec(B)^T and the map is a linear bijection.
struct RearrangedMatrix {
  Matrix data;  // t_len^2 x n_len^2
  Dims dims;
};

/// Nonnegative weights over a rearranged matrix; zero entries are excluded
/// from low-rank fitting objectives.
struct WeightMask {
  Matrix entries;

  bool all_ones() const { return (entries.array() == 1.0).all(); }
  bool any_nonzero() const { return (entries.array() != 0.0).any(); }
};

/// Low-rank factorization: reconstruction = left * right^T.
struct LowRankFactors {
  Matrix left;    // rows x r
  Matrix right;   // cols x r
  int rank = 0;
  bool rank_clamped = false;    // requested rank exceeded min dimension
  Vector singular_values;       // of the fitted component, nonincreasing
};

/// Result of the alternating-projections weighted fit.
struct WeightedLowRankResult {
  LowRankFactors factors;
  int iterations = 0;
  double weighted_residual = 0.0;  // sqrt(sum w * (m - fit)^2)
  bool converged = true;
};

RearrangedMatrix rearrange(const Matrix& sigma, const Dims& dims);
Matrix unrearrange(const RearrangedMatrix& r);

/// Best rank-r approximation in Frobenius norm (Eckart-Young). Singular
/// values are folded symmetrically (sqrt into each side). Deterministic sign
/// convention: the first nonzero entry of each left vector is positive.
/// r greater than min(rows, cols) is clamped and flagged.
LowRankFactors truncated_svd_approx(const Matrix& m, int r);

/// Local minimizer of sum_kl w_kl (m_kl - [L R^T]_kl)^2 by alternating
/// imputation of down-weighted entries and re-solving with truncated_svd_approx.
/// Stops when the relative change of the weighted residual drops below tol
/// or after max_iter sweeps. An all-ones mask short-circuits to the SVD path.
WeightedLowRankResult weighted_low_rank(const Matrix& m, const WeightMask& w, int r,
                                        double tol = 1e-8, int max_iter = 500);

/// Symmetrize and clip eigenvalues at `floor`. Frobenius-nearest symmetric
/// matrix with min eigenvalue >= floor.
Matrix project_psd(const Matrix& m, double floor = 0.0);

using KronTerm = std::pair<Matrix, Matrix>;  // (temporal T x T, spatial N x N)

Matrix assemble_kron_sum(const std::vector<KronTerm>& factors);

/// y = (sum_i T_i (kron) S_i) x without materializing the sum.
Vector apply_kron_sum(const std::vector<KronTerm>& factors, const Vector& x);

/// Block-Toeplitz extension of an NT x NT information matrix J to N*t1
/// variables: band |offset| < T is populated from the first block row
/// J_i = J(1:N, (i-1)N+1 : iN), everything beyond is zero. Only quadratic-form
/// evaluation is exposed; the extension is never materialized. At t1 == T the
/// form is evaluated with J itself.
class BlockToeplitzExtension {
 public:
  BlockToeplitzExtension(const Matrix& j, const Dims& dims, int t1);

  /// x^T J_ext x for x of length n_len * t1.
  double quadratic_form(const Vector& x) const;

  int extended_frames() const { return t1_; }
  const Matrix& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<Matrix> blocks_;  // J_1 .. J_T
  Matrix full_;                 // original J, used when t1 == T
  Dims dims_;
  int t1_;
};

}  // namespace stcov
