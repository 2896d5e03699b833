#include "stcov/linalg.hpp"

#include <Eigen/SVD>
#include <Eigen/Eigenvalues>
#include <cmath>

namespace stcov {

RearrangedMatrix rearrange(const Matrix& sigma, const Dims& dims) {
  const int t = dims.t_len, n = dims.n_len;
  if (sigma.rows() != dims.side() || sigma.cols() != dims.side())
    throw BadInputError("rearrange: matrix side does not match dims");
  Matrix out(t * t, n * n);
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < t; ++j) {
      // row-major vectorization of block (i, j)
      const auto block = sigma.block(i * n, j * n, n, n);
      int row = i * t + j;
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) out(row, k * n + l) = block(k, l);
    }
  }
  return {std::move(out), dims};
}

Matrix unrearrange(const RearrangedMatrix& r) {
  const int t = r.dims.t_len, n = r.dims.n_len;
  if (r.data.rows() != t * t || r.data.cols() != n * n)
    throw BadInputError("unrearrange: shape not (t_len^2, n_len^2)");
  Matrix out(t * n, t * n);
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < t; ++j) {
      int row = i * t + j;
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) out(i * n + k, j * n + l) = r.data(row, k * n + l);
    }
  }
  return out;
}

namespace {

// Force the first entry with magnitude above tol positive in each left
// column; the paired right column flips with it.
void fix_signs(Matrix& left, Matrix& right) {
  for (Eigen::Index c = 0; c < left.cols(); ++c) {
    double lead = 0.0;
    for (Eigen::Index i = 0; i < left.rows(); ++i) {
      if (std::abs(left(i, c)) > 1e-12) {
        lead = left(i, c);
        break;
      }
    }
    if (lead < 0.0) {
      left.col(c) = -left.col(c);
      right.col(c) = -right.col(c);
    }
  }
}

}  // namespace

LowRankFactors truncated_svd_approx(const Matrix& m, int r) {
  if (r < 1) throw BadInputError("truncated_svd_approx: rank must be >= 1");
  const int maxr = static_cast<int>(std::min(m.rows(), m.cols()));
  LowRankFactors out;
  if (r > maxr) {
    out.rank_clamped = true;
    r = maxr;
  }
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU().leftCols(r);
  Matrix v = svd.matrixV().leftCols(r);
  Vector s = svd.singularValues().head(r);
  fix_signs(u, v);
  const Vector sqrt_s = s.array().sqrt();
  out.left = u * sqrt_s.asDiagonal();
  out.right = v * sqrt_s.asDiagonal();
  out.rank = r;
  out.singular_values = s;
  return out;
}

WeightedLowRankResult weighted_low_rank(const Matrix& m, const WeightMask& w, int r,
                                        double tol, int max_iter) {
  if (w.entries.rows() != m.rows() || w.entries.cols() != m.cols())
    throw BadInputError("weighted_low_rank: mask shape mismatch");
  if ((w.entries.array() < 0.0).any())
    throw BadInputError("weighted_low_rank: negative weights");
  if (!w.any_nonzero()) throw BadInputError("weighted_low_rank: all-zero mask");

  WeightedLowRankResult res;
  if (w.all_ones()) {
    res.factors = truncated_svd_approx(m, r);
    const Matrix diff = m - res.factors.left * res.factors.right.transpose();
    res.weighted_residual = diff.norm();
    res.iterations = 0;
    return res;
  }

  // weights normalized to [0, 1] so they act as convex imputation coefficients
  const double wmax = w.entries.maxCoeff();
  const Matrix wn = w.entries / wmax;
  Matrix work = wn.cwiseProduct(m);
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iter; ++it) {
    res.factors = truncated_svd_approx(work, r);
    const Matrix fit = res.factors.left * res.factors.right.transpose();
    const Matrix diff = m - fit;
    const double wres = std::sqrt((w.entries.array() * diff.array().square()).sum());
    res.iterations = it;
    res.weighted_residual = wres;
    if (std::isfinite(prev) && std::abs(prev - wres) <= tol * std::max(1.0, prev)) {
      res.converged = true;
      return res;
    }
    prev = wres;
    work = wn.cwiseProduct(m) + (1.0 - wn.array()).matrix().cwiseProduct(fit);
  }
  res.converged = false;
  return res;
}

Matrix project_psd(const Matrix& m, double floor) {
  if (m.rows() != m.cols()) throw BadInputError("project_psd: matrix not square");
  const Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  Vector ev = es.eigenvalues();
  bool touched = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < floor) {
      ev[i] = floor;
      touched = true;
    }
  }
  if (!touched) return sym;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Matrix assemble_kron_sum(const std::vector<KronTerm>& factors) {
  if (factors.empty()) throw BadInputError("assemble_kron_sum: empty factor list");
  const Eigen::Index t = factors.front().first.rows();
  const Eigen::Index n = factors.front().second.rows();
  Matrix out = Matrix::Zero(t * n, t * n);
  for (const auto& [tf, sf] : factors) {
    if (tf.rows() != t || tf.cols() != t || sf.rows() != n || sf.cols() != n)
      throw BadInputError("assemble_kron_sum: inconsistent factor shapes");
    for (Eigen::Index i = 0; i < t; ++i)
      for (Eigen::Index j = 0; j < t; ++j)
        if (tf(i, j) != 0.0) out.block(i * n, j * n, n, n) += tf(i, j) * sf;
  }
  return out;
}

Vector apply_kron_sum(const std::vector<KronTerm>& factors, const Vector& x) {
  if (factors.empty()) throw BadInputError("apply_kron_sum: empty factor list");
  const Eigen::Index t = factors.front().first.rows();
  const Eigen::Index n = factors.front().second.rows();
  if (x.size() != t * n) throw BadInputError("apply_kron_sum: vector length mismatch");
  // (A kron B) x = vec_rowmajor(A X B^T) with X the t x n unstacking of x
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      xm(x.data(), t, n);
  Matrix acc = Matrix::Zero(t, n);
  for (const auto& [tf, sf] : factors) acc += tf * xm * sf.transpose();
  Vector y(t * n);
  for (Eigen::Index i = 0; i < t; ++i) y.segment(i * n, n) = acc.row(i).transpose();
  return y;
}

BlockToeplitzExtension::BlockToeplitzExtension(const Matrix& j, const Dims& dims, int t1)
    : dims_(dims), t1_(t1) {
  if (j.rows() != dims.side() || j.cols() != dims.side())
    throw BadInputError("BlockToeplitzExtension: J side mismatch");
  if (t1 < dims.t_len) throw BadInputError("BlockToeplitzExtension: t1 < T");
  const int n = dims.n_len;
  blocks_.reserve(static_cast<std::size_t>(dims.t_len));
  for (int i = 0; i < dims.t_len; ++i) blocks_.push_back(j.block(0, i * n, n, n));
  full_ = j;
}

double BlockToeplitzExtension::quadratic_form(const Vector& x) const {
  const int n = dims_.n_len, t = dims_.t_len;
  if (x.size() != static_cast<Eigen::Index>(n) * t1_)
    throw BadInputError("BlockToeplitzExtension: vector length mismatch");
  if (t1_ == t) return x.dot(full_ * x);
  double acc = 0.0;
  for (int m = 0; m < t1_; ++m) {
    const auto xm = x.segment(m * n, n);
    acc += xm.dot(blocks_[0] * xm);
  }
  for (int i = 1; i < t; ++i) {
    for (int m = 0; m + i < t1_; ++m) {
      const auto xa = x.segment(m * n, n);
      const auto xb = x.segment((m + i) * n, n);
      acc += 2.0 * xa.dot(blocks_[static_cast<std::size_t>(i)] * xb);
    }
  }
  return acc;
}

}  // namespace stcov
