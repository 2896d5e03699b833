#include "stcov/estimators.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

namespace stcov {

SampleSet make_sample_set(const Matrix& raw_clips, const Dims& dims) {
  if (raw_clips.rows() != dims.side())
    throw BadInputError("make_sample_set: clip length does not match dims");
  if (raw_clips.cols() < 1) throw BadInputError("make_sample_set: no samples");
  SampleSet s;
  s.dims = dims;
  s.mu = raw_clips.rowwise().mean();
  s.x = raw_clips.colwise() - s.mu;
  return s;
}

Vector KronCovariance::diag_correction() const {
  if (!corrected_diagonal) return Vector::Zero(dims.side());
  Vector raw = Vector::Zero(dims.side());
  for (const auto& [tf, sf] : factors)
    for (int t = 0; t < dims.t_len; ++t)
      for (int n = 0; n < dims.n_len; ++n) raw[t * dims.n_len + n] += tf(t, t) * sf(n, n);
  return *corrected_diagonal - raw;
}

Matrix KronCovariance::assemble() const {
  Matrix out = factors.empty() ? Matrix::Zero(dims.side(), dims.side())
                               : assemble_kron_sum(factors);
  if (corrected_diagonal) out.diagonal() = *corrected_diagonal;
  return out;
}

Matrix KronCovariance::assemble_finalized(double floor) const {
  Matrix out = assemble();
  if (corrected_diagonal) return out;  // diagonal inflation already enforced PSD
  return project_psd(out, floor);
}

Vector KronCovariance::apply(const Vector& v) const {
  Vector y = apply_kron_sum(factors, v);
  if (corrected_diagonal) {
    const Vector dc = diag_correction();
    y += dc.cwiseProduct(v);
  }
  return y;
}

Matrix sample_covariance(const SampleSet& s, double shrinkage) {
  if (shrinkage < 0.0 || shrinkage > 1.0)
    throw BadInputError("sample_covariance: shrinkage outside [0,1]");
  const double n = static_cast<double>(s.n_samples());
  Matrix cov = (s.x * s.x.transpose()) / n;
  if (shrinkage > 0.0) {
    const double scale = cov.trace() / static_cast<double>(cov.rows());
    cov *= (1.0 - shrinkage);
    cov.diagonal().array() += shrinkage * scale;
  }
  return cov;
}

namespace {

Matrix unvec_rowmajor(const Eigen::Ref<const Vector>& v, int side) {
  Matrix m(side, side);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) m(i, j) = v[i * side + j];
  return m;
}

// Roundoff cleanup: factor pairs of a symmetric input are symmetric or skew
// in exact arithmetic; snap near-symmetric pairs.
void cleanup_symmetry(Matrix& tf, Matrix& sf) {
  const double t_asym = (tf - tf.transpose()).norm();
  const double s_asym = (sf - sf.transpose()).norm();
  if (t_asym <= 1e-8 * std::max(1.0, tf.norm()) &&
      s_asym <= 1e-8 * std::max(1.0, sf.norm())) {
    tf = (0.5 * (tf + tf.transpose())).eval();
    sf = (0.5 * (sf + sf.transpose())).eval();
  }
}

std::vector<KronTerm> factors_from_lowrank(const LowRankFactors& lr, const Dims& dims) {
  std::vector<KronTerm> terms;
  terms.reserve(static_cast<std::size_t>(lr.rank));
  for (int k = 0; k < lr.rank; ++k) {
    Matrix tf = unvec_rowmajor(lr.left.col(k), dims.t_len);
    Matrix sf = unvec_rowmajor(lr.right.col(k), dims.n_len);
    cleanup_symmetry(tf, sf);
    terms.emplace_back(std::move(tf), std::move(sf));
  }
  return terms;
}

}  // namespace

KronCovariance kron_pca_ls(const Matrix& sigma, const Dims& dims, int r,
                           const KronPcaOptions& opts) {
  Matrix work = 0.5 * (sigma + sigma.transpose());
  if (opts.ridge > 0.0) {
    const double scale = work.trace() / static_cast<double>(work.rows());
    work = (1.0 - opts.ridge) * work;
    work.diagonal().array() += opts.ridge * scale;
  }
  RearrangedMatrix re = rearrange(work, dims);
  LowRankFactors lr = truncated_svd_approx(re.data, r);
  if (opts.singular_soft_threshold > 0.0) {
    for (int k = 0; k < lr.rank; ++k) {
      const double sv = lr.singular_values[k];
      const double kept = std::max(sv - opts.singular_soft_threshold, 0.0);
      const double scale = sv > 0.0 ? std::sqrt(kept / sv) : 0.0;
      lr.left.col(k) *= scale;
      lr.right.col(k) *= scale;
    }
  }
  KronCovariance out;
  out.dims = dims;
  out.separation_rank = lr.rank;
  out.rank_clamped = lr.rank_clamped;
  out.factors = factors_from_lowrank(lr, dims);
  return out;
}

KronCovariance dc_kron_pca(const SampleSet& s, int r, double tol, int max_iter) {
  const Dims dims = s.dims;
  const Matrix cov = sample_covariance(s, 0.0);
  RearrangedMatrix re = rearrange(cov, dims);

  // zero weight on the rearranged image of the diagonal
  WeightMask mask{Matrix::Ones(re.data.rows(), re.data.cols())};
  for (int t = 0; t < dims.t_len; ++t)
    for (int n = 0; n < dims.n_len; ++n)
      mask.entries(t * dims.t_len + t, n * dims.n_len + n) = 0.0;

  WeightedLowRankResult fit = weighted_low_rank(re.data, mask, r, tol, max_iter);

  KronCovariance out;
  out.dims = dims;
  out.separation_rank = fit.factors.rank;
  out.rank_clamped = fit.factors.rank_clamped;
  out.fit_converged = fit.converged;
  out.factors = factors_from_lowrank(fit.factors, dims);
  out.corrected_diagonal = cov.diagonal();

  // smallest uniform diagonal inflation restoring PSD
  Eigen::SelfAdjointEigenSolver<Matrix> es(out.assemble());
  const double min_ev = es.eigenvalues().minCoeff();
  if (min_ev < 0.0) {
    out.psd_epsilon = -min_ev;
    out.diag_inflated = true;
    *out.corrected_diagonal = out.corrected_diagonal->array() + out.psd_epsilon;
  }
  return out;
}

ToeplitzReduction toeplitz_reduce(const RearrangedMatrix& r, bool unweighted,
                                  int banded_k) {
  const int t = r.dims.t_len;
  ToeplitzReduction red;
  red.b = Matrix::Zero(2 * t - 1, r.data.cols());
  red.weights = Vector::Zero(2 * t - 1);
  for (int j = -t + 1; j <= t - 1; ++j) {
    const int row = j + t - 1;
    const int count = t - std::abs(j);
    red.weights[row] = std::sqrt(static_cast<double>(count));
    if (banded_k > 0 && std::abs(j) >= banded_k) continue;
    Vector acc = Vector::Zero(r.data.cols());
    // offset class j: blocks (i, i+j)
    for (int i = std::max(0, -j); i < std::min(t, t - j); ++i)
      acc += r.data.row(i * t + (i + j)).transpose();
    if (unweighted)
      red.b.row(row) = acc.transpose() / static_cast<double>(count);
    else
      red.b.row(row) = acc.transpose() / red.weights[row];
  }
  return red;
}

namespace {

Matrix toeplitz_from_diagonals(const Eigen::Ref<const Vector>& u, int side) {
  // u[j + side - 1] is the value of diagonal j = col - row
  Matrix m(side, side);
  for (int a = 0; a < side; ++a)
    for (int b = 0; b < side; ++b) m(a, b) = u[(b - a) + side - 1];
  return m;
}

}  // namespace

KronCovariance toeplitz_kron_ls(const Matrix& sigma, const Dims& dims, int r,
                                bool both_dims, std::optional<int> banded_k) {
  const int t = dims.t_len, n = dims.n_len;
  if (r > 2 * t - 1)
    throw BadInputError("toeplitz_kron_ls: r exceeds 2T-1, the exact-representation cap");
  const bool unweighted = banded_k.has_value();

  const Matrix work = 0.5 * (sigma + sigma.transpose());
  RearrangedMatrix re = rearrange(work, dims);
  ToeplitzReduction red = toeplitz_reduce(re, unweighted, banded_k.value_or(0));

  KronCovariance out;
  out.dims = dims;
  out.toeplitz_temporal = true;

  if (!both_dims) {
    LowRankFactors lr = truncated_svd_approx(red.b, r);
    out.separation_rank = lr.rank;
    out.rank_clamped = lr.rank_clamped;
    for (int k = 0; k < lr.rank; ++k) {
      Vector u = lr.left.col(k);
      if (!unweighted) u.array() /= red.weights.array();
      if (banded_k)
        for (int j = -t + 1; j <= t - 1; ++j)
          if (std::abs(j) >= *banded_k) u[j + t - 1] = 0.0;
      out.factors.emplace_back(toeplitz_from_diagonals(u, t),
                               unvec_rowmajor(lr.right.col(k), n));
    }
    return out;
  }

  // spatial constraint: repeat the reduction on the column (s_i) side
  Matrix c = Matrix::Zero(2 * t - 1, 2 * n - 1);
  Vector sw(2 * n - 1);
  for (int l = -n + 1; l <= n - 1; ++l) {
    const int col = l + n - 1;
    const int count = n - std::abs(l);
    sw[col] = std::sqrt(static_cast<double>(count));
    Vector acc = Vector::Zero(2 * t - 1);
    for (int k1 = std::max(0, -l); k1 < std::min(n, n - l); ++k1)
      acc += red.b.col(k1 * n + (k1 + l));
    c.col(col) = acc / sw[col];
  }
  LowRankFactors lr = truncated_svd_approx(c, r);
  out.separation_rank = lr.rank;
  out.rank_clamped = lr.rank_clamped;
  for (int k = 0; k < lr.rank; ++k) {
    Vector u = lr.left.col(k);
    Vector v = lr.right.col(k);
    if (!unweighted) u.array() /= red.weights.array();
    if (banded_k)
      for (int j = -t + 1; j <= t - 1; ++j)
        if (std::abs(j) >= *banded_k) u[j + t - 1] = 0.0;
    v.array() /= sw.array();
    out.factors.emplace_back(toeplitz_from_diagonals(u, t), toeplitz_from_diagonals(v, n));
  }
  return out;
}

Matrix NonrectFit::extract_covariance() const {
  const int t = mapping.t_len, n = mapping.base_n, pn = mapping.padded_n();
  const Matrix full = padded.assemble();
  Matrix out(t * n, t * n);
  for (int t1 = 0; t1 < t; ++t1) {
    const int o1 = mapping.frame_offset(t1);
    for (int t2 = 0; t2 < t; ++t2) {
      const int o2 = mapping.frame_offset(t2);
      out.block(t1 * n, t2 * n, n, n) = full.block(t1 * pn + o1, t2 * pn + o2, n, n);
    }
  }
  return out;
}

NonrectFit nonrect_kron(const SampleSet& s, const GridMapping& mapping, int r,
                        int padded_cap, double tol, int max_iter) {
  if (mapping.base_n != s.dims.n_len || mapping.t_len != s.dims.t_len)
    throw BadInputError("nonrect_kron: mapping inconsistent with sample dims");
  const int pn = mapping.padded_n();
  if (pn > padded_cap) throw BadInputError("nonrect_kron: padded grid exceeds cap");
  const int t = mapping.t_len, n = mapping.base_n;
  const Dims pdims(t, pn);

  // embed clips into the padded grid; dummy slots stay zero
  Matrix xp = Matrix::Zero(pdims.side(), s.x.cols());
  for (int f = 0; f < t; ++f)
    xp.middleRows(f * pn + mapping.frame_offset(f), n) = s.x.middleRows(f * n, n);
  const Matrix pcov = (xp * xp.transpose()) / static_cast<double>(s.n_samples());

  NonrectFit fit;
  fit.mapping = mapping;
  if (mapping.delta_n == 0) {
    fit.padded = kron_pca_ls(pcov, pdims, r);
    return fit;
  }

  RearrangedMatrix re = rearrange(pcov, pdims);
  WeightMask mask{Matrix::Ones(re.data.rows(), re.data.cols())};
  std::vector<std::vector<bool>> dummy(static_cast<std::size_t>(t),
                                       std::vector<bool>(static_cast<std::size_t>(pn)));
  for (int f = 0; f < t; ++f)
    for (int slot = 0; slot < pn; ++slot)
      dummy[static_cast<std::size_t>(f)][static_cast<std::size_t>(slot)] =
          !mapping.valid(f, slot);
  for (int i1 = 0; i1 < t; ++i1)
    for (int i2 = 0; i2 < t; ++i2)
      for (int k1 = 0; k1 < pn; ++k1)
        for (int k2 = 0; k2 < pn; ++k2)
          if (dummy[static_cast<std::size_t>(i1)][static_cast<std::size_t>(k1)] ||
              dummy[static_cast<std::size_t>(i2)][static_cast<std::size_t>(k2)])
            mask.entries(i1 * t + i2, k1 * pn + k2) = 0.0;

  WeightedLowRankResult wlr = weighted_low_rank(re.data, mask, r, tol, max_iter);
  fit.padded.dims = pdims;
  fit.padded.separation_rank = wlr.factors.rank;
  fit.padded.rank_clamped = wlr.factors.rank_clamped;
  fit.padded.fit_converged = wlr.converged;
  fit.padded.factors = factors_from_lowrank(wlr.factors, pdims);
  return fit;
}

}  // namespace stcov
