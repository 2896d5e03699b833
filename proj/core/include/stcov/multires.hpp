#pragma once

#include <Eigen/Sparse>
#include <optional>
#include <set>
#include <vector>

#include "stcov/estimators.hpp"
#include "stcov/types.hpp"

namespace stcov {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Spatial tree over a pixel grid, replicated per frame with frames
/// decoupled. Scales run 1 (root) .. n_scales (leaves = pixels). Parameters
/// are tied across the per-frame copies.
struct TreeTopology {
  int height = 0, width = 0, frames = 1;
  int n_scales = 1;
  std::vector<int> parent;    // per spatial node, -1 for the root
  std::vector<int> scale_of;  // 1-based
  std::vector<int> node_dim;
  std::vector<std::vector<int>> children;
  std::vector<std::vector<int>> scale_nodes;  // node ids per scale (1-based index)
  std::vector<int> leaf_pixel;                // pixel index (row-major) per leaf node, -1 otherwise

  int n_spatial_nodes() const { return static_cast<int>(parent.size()); }
  int pixels() const { return height * width; }
  int leaf_count() const { return pixels() * frames; }
  const std::vector<int>& leaves() const { return scale_nodes[static_cast<std::size_t>(n_scales)]; }

  /// Variables of one spatial node within its scale layer, all frames stacked
  /// frame-major: layer index = f * scale_width + offset_within_scale.
  int scale_width(int m) const;            // spatial variable count of scale m
  int node_scale_offset(int node) const;   // spatial offset of `node` inside its scale
};

/// Spatial quadtree with uneven splits for non-power-of-two sides; cells that
/// reach 1x1 early are extended by pass-through chains so every leaf sits at
/// the bottom scale. Internal nodes carry `internal_dim` variables each.
TreeTopology build_quadtree(int height, int width, int frames, int internal_dim = 1);

/// Downward Gaussian tree parameters: x(i) = a(i) x(parent(i)) + n_i,
/// n_i ~ N(0, q(i)); the root is N(0, root_cov).
struct TreeParams {
  std::vector<Matrix> a;  // node_dim(i) x node_dim(parent)
  std::vector<Matrix> q;  // node_dim(i) square PSD
  Matrix root_cov;
};

struct EmOptions {
  std::optional<TreeParams> init;
  double q_floor = 1e-10;
  /// Per (frame, pixel) observation mask; missing leaves are treated as hidden.
  std::optional<std::vector<std::vector<bool>>> valid;
};

struct EmResult {
  TreeParams params;
  std::vector<double> loglik;  // observed-data loglikelihood per iteration
  int iterations = 0;
  bool q_floored = false;
  bool converged = false;
};

/// EM for the Gaussian tree with hidden internal nodes. E-step works on
/// pooled second moments, so cost is independent of the number of samples;
/// the M-step updates a(i) and q(i) in closed form (root_cov is pinned by the
/// initialization, which fixes the hidden-scale gauge).
EmResult learn_tree_em(const TreeTopology& topology, const SampleSet& s,
                       int max_iter = 50, double tol = 1e-7, const EmOptions& opts = {});

/// Fine-to-coarse chain parameters implied by the tree: x_[m] = A_m x_[m+1] + w_m
/// with w_m ~ N(0, Q_m), per spatial layer (frames decoupled, lifted as I_T kron).
struct ChainParams {
  std::vector<Matrix> a_up;  // index m (1-based, 1..M-1): maps scale m+1 -> m
  std::vector<Matrix> q_up;
  std::vector<Matrix> tree_layer_cov;  // spatial layer covariance under the tree
};

ChainParams tree_chain_params(const TreeTopology& topology, const TreeParams& params);

struct ScaleTargetOptions {
  double first_term_shrinkage = 0.0;
  /// Scales whose first (sample) term is replaced by a DC-KronPCA fit.
  std::set<int> kron_scales;
  int kron_rank = 1;
  /// Bottom-scale target from a dummy-padded weighted Kronecker fit.
  std::optional<GridMapping> nonrect_mapping;
  int nonrect_rank = 1;
};

/// Per-scale targets: marginal covariance Sigma_[m] over the full layer
/// (T * scale_width variables, frame-major) and, once filled, the in-scale
/// conditional information blocks.
struct ScaleTargets {
  std::vector<Matrix> sigma;  // index by scale 1..M (slot 0 unused)
  ChainParams chain;
  int frames = 1;

  /// In-scale conditional information, stored blockwise.
  struct Block {
    int spatial_start = 0;  // within the scale's spatial ordering
    int spatial_len = 0;
    Matrix values;  // (frames*len)^2, frame-major
  };
  std::vector<std::vector<Block>> j_star;  // per scale
  bool halo_ridge_applied = false;
};

/// Upward propagation of samples and accumulated noise (never materializes
/// the bottom covariance unless the mapping path requires it); matches the
/// naive coarse recursion seeded with the bottom sample covariance.
ScaleTargets target_scale_covariances(const TreeTopology& topology, const TreeParams& params,
                                      const SampleSet& s, const ScaleTargetOptions& opts = {});

struct InScaleOptions {
  /// Max spatial variables per in-scale block; 0 keeps each scale whole.
  int max_block_vars = 0;
  /// Halo width (spatial variables each side) for local inversion.
  int halo = 0;
};

/// Fill j_star: per-scale conditional information restricted to the block
/// partition. Entries outside the configured blocks are exactly zero. Local
/// inversion inverts a halo-expanded submatrix and extracts the center block.
void target_inscale_information(ScaleTargets& targets, const TreeTopology& topology,
                                const TreeParams& params, const InScaleOptions& opts = {});

/// Halo-local inversion helper: block (start, len) of inv(sigma), estimated by
/// inverting the halo-expanded principal submatrix. Adds ridge (flagged) when
/// the submatrix is numerically singular.
Matrix local_inverse_block(const Matrix& sigma, int start, int len, int halo,
                           bool* ridge_flag = nullptr);

/// L1-penalized logdet program with the conditional covariance as the
/// variable: returns a sparse PD approximation of inv(j_target). lambda = 0
/// returns the exact inverse; off-diagonals only are penalized.
Matrix sparsify_logdet(const Matrix& j_target, double lambda, double admm_tol = 1e-9,
                       int admm_max_iter = 2000);

struct InferOptions {
  double tol = 1e-10;
  int max_iter = 400;
  /// Observed leaf validity (layer-local indices). Unset = all leaves observed.
  std::optional<std::vector<bool>> observed;
};

struct InferResult {
  Vector x;  // posterior mean over all variables
  int iterations = 0;
  bool converged = false;
  /// The two-step alternation tripped the divergence guard (10 consecutive
  /// residual increases). When set and `converged` also holds, the answer
  /// came from the safeguarded CG path under the same splitting preconditioner.
  bool diverged = false;
  bool used_fallback = false;
  double residual = 0.0;
};

/// Sparse in-scale conditional covariance multiresolution model: tree
/// information matrix with node-diagonal removed (j_h), plus per-scale sparse
/// in-scale conditional covariance blocks (sigma_c). The overall information
/// matrix is j_h + inv(sigma_c).
class MultiresModel {
 public:
  MultiresModel() = default;
  MultiresModel(TreeTopology topology, TreeParams params, std::vector<SparseMatrix> sigma_c);

  const TreeTopology& topology() const { return topology_; }
  const TreeParams& tree_params() const { return params_; }
  const std::vector<SparseMatrix>& sigma_c() const { return sigma_c_; }

  int total_vars() const { return total_vars_; }
  int observed_vars() const { return topology_.leaf_count(); }
  /// Global variable index of (scale, frame, spatial offset): scale-major
  /// layout with each scale layer frame-major. Observed variables are the
  /// trailing leaf layer, ordered like a vectorized clip.
  int layer_start(int scale) const { return layer_start_[static_cast<std::size_t>(scale)]; }

  /// Tree information matrix with the node-diagonal part removed.
  const SparseMatrix& j_h() const { return j_h_; }

  /// Dense overall information matrix; test / small-model use.
  Matrix dense_information() const;
  /// Dense observed-layer covariance implied by the model; test use.
  Matrix observed_covariance() const;

  /// Exact-leaves conditioning: observed leaves are fixed at y (deviations),
  /// the hidden subsystem is solved by the matrix-splitting iteration
  /// (between-scale tree solve alternating with in-scale correction).
  InferResult infer_exact(const Vector& y, const InferOptions& opts = InferOptions()) const;

  /// Noisy observation of selected variables: y = x[sel] + noise, noise
  /// variance r per selected variable.
  InferResult infer_noisy(const std::vector<int>& selected, const Vector& y,
                          const Vector& r_diag, const InferOptions& opts = InferOptions()) const;

  /// Mahalanobis score of the observed layer: y^T J_obs y with J_obs the
  /// observed-layer conditional-marginal information, via the Schur relation
  /// and infer_exact; the dense covariance is never materialized.
  double observed_score(const Vector& y, const InferOptions& opts = InferOptions()) const;

  /// Observed-layer information matrix (dense); used to build AR scorers.
  Matrix observed_information() const;

 private:
  struct ScaleOp;  // in-scale subsystem helper

  TreeTopology topology_;
  TreeParams params_;
  std::vector<SparseMatrix> sigma_c_;  // per scale, layer-sized
  SparseMatrix j_h_;
  std::vector<int> layer_start_;
  int total_vars_ = 0;

  InferResult run_splitting(const std::vector<bool>& solve_mask, const Vector& h,
                            const Vector& jp_diag, const InferOptions& opts) const;
};

struct MultiresFitOptions {
  int em_max_iter = 40;
  double em_tol = 1e-7;
  double lambda = 0.0;
  InScaleOptions inscale;
  ScaleTargetOptions targets;
};

/// End-to-end learning driver: quadtree EM, bottom-up targets, in-scale
/// information, logdet sparsification, model assembly.
MultiresModel fit_multires(const TreeTopology& topology, const SampleSet& s,
                           const MultiresFitOptions& opts = {});

struct ClipGeometry {
  int height = 0, width = 0, frames = 1;
};

/// Append circularly shifted copies of each clip (per-frame spatial shift);
/// sample count multiplies by 1 + |shifts| and the mean is re-estimated.
SampleSet augment_shifted_samples(const SampleSet& s,
                                  const std::vector<std::pair<int, int>>& shifts,
                                  const ClipGeometry& geometry);

}  // namespace stcov
