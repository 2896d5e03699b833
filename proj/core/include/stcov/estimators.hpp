#pragma once

#include <optional>
#include <vector>

#include "stcov/linalg.hpp"
#include "stcov/types.hpp"

namespace stcov {

/// Zero-meaned vectorized clips, one per column. `mu` is the subtracted mean.
struct SampleSet {
  Matrix x;   // side x n_samples
  Vector mu;  // side
  Dims dims;

  int n_samples() const { return static_cast<int>(x.cols()); }
};

/// Center raw clips (columns) and record the subtracted mean.
SampleSet make_sample_set(const Matrix& raw_clips, const Dims& dims);

/// Covariance model as a sum of Kronecker products, optionally with an
/// imposed diagonal. Factors are stored unprojected; assemble_finalized()
/// yields the PSD estimate used for scoring.
struct KronCovariance {
  std::vector<KronTerm> factors;
  Dims dims;
  int separation_rank = 0;
  bool toeplitz_temporal = false;

  /// When set, assemble() writes this diagonal verbatim over the factor sum.
  std::optional<Vector> corrected_diagonal;
  double psd_epsilon = 0.0;   // uniform diagonal inflation applied, if any
  bool diag_inflated = false;
  bool rank_clamped = false;
  bool fit_converged = true;

  /// Additive view of the diagonal correction (corrected - raw factor diagonal).
  Vector diag_correction() const;

  /// Raw structural estimate: factor sum, diagonal overwritten when corrected.
  Matrix assemble() const;

  /// PSD-projected estimate (no-op when the diagonal correction already
  /// enforced PSD). `floor` clips eigenvalues.
  Matrix assemble_finalized(double floor = 0.0) const;

  /// Matrix-free application of assemble() to a vector.
  Vector apply(const Vector& v) const;
};

/// (1-shrinkage) * (1/n) X X^T + shrinkage * (tr/side) * I.
Matrix sample_covariance(const SampleSet& s, double shrinkage = 0.0);

struct KronPcaOptions {
  double singular_soft_threshold = 0.0;  // soft-threshold on the rearranged spectrum
  double ridge = 0.0;                    // shrinkage pre-pass toward scaled identity
};

/// Least-squares sum-of-Kronecker fit of a covariance: rearrange, truncate the
/// spectrum at separation rank r, unrearrange each term.
KronCovariance kron_pca_ls(const Matrix& sigma, const Dims& dims, int r,
                           const KronPcaOptions& opts = {});

/// Diagonally corrected fit: excludes the rearranged image of the diagonal
/// from the LS objective, restores sample variances on the diagonal, then
/// inflates the diagonal uniformly by the smallest epsilon restoring PSD.
KronCovariance dc_kron_pca(const SampleSet& s, int r, double tol = 1e-8,
                           int max_iter = 500);

/// Offset-class reduction used by the Toeplitz-constrained fit: row j+T-1 of
/// `b` collects the rearranged rows of block offset j, scaled per the LS
/// weighting.
struct ToeplitzReduction {
  Matrix b;        // (2T-1) x N^2
  Vector weights;  // sqrt(T - |j|) for j = -T+1 .. T-1
};

ToeplitzReduction toeplitz_reduce(const RearrangedMatrix& r, bool unweighted = false,
                                  int banded_k = 0);

/// Toeplitz-constrained Kronecker fit. Temporal factors come out Toeplitz;
/// with both_dims the spatial factors are constrained as well. banded_k
/// switches to the unweighted (T -> infinity) mode and zeroes offsets
/// |j| >= banded_k.
KronCovariance toeplitz_kron_ls(const Matrix& sigma, const Dims& dims, int r,
                                bool both_dims = false,
                                std::optional<int> banded_k = std::nullopt);

/// Embedding of a nonrectangular (per-frame shifted) pixel grid into a padded
/// rectangular grid with dummy slots.
struct GridMapping {
  int delta_n = 0;  // per-frame index shift
  int base_n = 0;   // N
  int t_len = 0;    // T

  GridMapping() = default;
  GridMapping(int delta, int n, int t) : delta_n(delta), base_n(n), t_len(t) {}

  int padded_n() const { return base_n + (t_len - 1) * std::abs(delta_n); }
  /// First valid padded slot of frame f.
  int frame_offset(int f) const {
    return delta_n >= 0 ? f * delta_n : (t_len - 1 - f) * (-delta_n);
  }
  bool valid(int f, int slot) const {
    const int off = frame_offset(f);
    return slot >= off && slot < off + base_n;
  }
  int dummy_count() const { return (padded_n() - base_n) * t_len; }
};

struct NonrectFit {
  KronCovariance padded;  // over dims (T, padded_n)
  GridMapping mapping;

  /// Reindex the valid region back to the original N*T variables.
  Matrix extract_covariance() const;
};

/// Weighted Kronecker fit on the dummy-padded grid; dummy-touching entries of
/// the rearranged objective get zero weight. delta_n == 0 reproduces
/// kron_pca_ls exactly.
NonrectFit nonrect_kron(const SampleSet& s, const GridMapping& mapping, int r,
                        int padded_cap = 8192, double tol = 1e-8, int max_iter = 500);

}  // namespace stcov
