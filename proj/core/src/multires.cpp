#include "stcov/multires.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace stcov {

int TreeTopology::scale_width(int m) const {
  int w = 0;
  for (int id : scale_nodes[static_cast<std::size_t>(m)]) w += node_dim[static_cast<std::size_t>(id)];
  return w;
}

int TreeTopology::node_scale_offset(int node) const {
  const int m = scale_of[static_cast<std::size_t>(node)];
  int off = 0;
  for (int id : scale_nodes[static_cast<std::size_t>(m)]) {
    if (id == node) return off;
    off += node_dim[static_cast<std::size_t>(id)];
  }
  throw BadInputError("node_scale_offset: node not in its scale list");
}

TreeTopology build_quadtree(int height, int width, int frames, int internal_dim) {
  if (height < 1 || width < 1 || frames < 1)
    throw BadInputError("build_quadtree: dimensions must be positive");
  if (internal_dim < 1) throw BadInputError("build_quadtree: internal_dim must be >= 1");
  TreeTopology topo;
  topo.height = height;
  topo.width = width;
  topo.frames = frames;

  struct Cell {
    int r0, c0, rows, cols, node;
  };

  int depth = 0;
  while ((height + (1 << depth) - 1) >> depth > 1 || (width + (1 << depth) - 1) >> depth > 1)
    ++depth;
  topo.n_scales = depth + 1;

  topo.scale_nodes.assign(static_cast<std::size_t>(topo.n_scales) + 1, {});
  auto add_node = [&](int parent, int scale) {
    const int id = static_cast<int>(topo.parent.size());
    topo.parent.push_back(parent);
    topo.scale_of.push_back(scale);
    // leaves are single pixels; internal nodes may be multivariate
    topo.node_dim.push_back(scale == topo.n_scales ? 1 : internal_dim);
    topo.leaf_pixel.push_back(-1);
    topo.scale_nodes[static_cast<std::size_t>(scale)].push_back(id);
    return id;
  };

  std::vector<Cell> level{{0, 0, height, width, add_node(-1, 1)}};
  for (int scale = 2; scale <= topo.n_scales; ++scale) {
    std::vector<Cell> next;
    for (const Cell& cell : level) {
      if (cell.rows == 1 && cell.cols == 1) {
        // pass-through chain keeps every leaf at the bottom scale
        next.push_back({cell.r0, cell.c0, 1, 1, add_node(cell.node, scale)});
        continue;
      }
      const int rs = cell.rows > 1 ? (cell.rows + 1) / 2 : cell.rows;
      const int cs = cell.cols > 1 ? (cell.cols + 1) / 2 : cell.cols;
      const int row_split[2][2] = {{0, rs}, {rs, cell.rows}};
      const int col_split[2][2] = {{0, cs}, {cs, cell.cols}};
      for (const auto& rr : row_split) {
        for (const auto& cc : col_split) {
          const int nr = rr[1] - rr[0], nc = cc[1] - cc[0];
          if (nr <= 0 || nc <= 0) continue;
          next.push_back({cell.r0 + rr[0], cell.c0 + cc[0], nr, nc, add_node(cell.node, scale)});
        }
      }
    }
    level = std::move(next);
  }
  for (const Cell& cell : level)
    topo.leaf_pixel[static_cast<std::size_t>(cell.node)] = cell.r0 * width + cell.c0;

  // bottom scale ordered by pixel position so the leaf layer matches clip layout
  auto& leaves = topo.scale_nodes[static_cast<std::size_t>(topo.n_scales)];
  std::sort(leaves.begin(), leaves.end(), [&](int a, int b) {
    return topo.leaf_pixel[static_cast<std::size_t>(a)] < topo.leaf_pixel[static_cast<std::size_t>(b)];
  });

  topo.children.assign(topo.parent.size(), {});
  for (std::size_t i = 0; i < topo.parent.size(); ++i)
    if (topo.parent[i] >= 0) topo.children[static_cast<std::size_t>(topo.parent[i])].push_back(static_cast<int>(i));
  return topo;
}

namespace {

// Offsets of each spatial node's variables in the all-spatial-nodes stacking
// (scale-major, scale list order).
std::vector<int> spatial_offsets(const TreeTopology& topo, int* total) {
  std::vector<int> off(topo.parent.size(), 0);
  int acc = 0;
  for (int m = 1; m <= topo.n_scales; ++m) {
    for (int id : topo.scale_nodes[static_cast<std::size_t>(m)]) {
      off[static_cast<std::size_t>(id)] = acc;
      acc += topo.node_dim[static_cast<std::size_t>(id)];
    }
  }
  if (total) *total = acc;
  return off;
}

Matrix solve_spd(const Matrix& a, const Matrix& b, const char* who) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) {
    Matrix ridged = a;
    ridged.diagonal().array() += 1e-10 * std::max(1.0, a.trace() / a.rows());
    llt.compute(ridged);
    if (llt.info() != Eigen::Success) throw NumericError(std::string(who) + ": SPD solve failed");
  }
  return llt.solve(b);
}

// Dense spatial-tree information matrix for the current parameters.
Matrix spatial_tree_information(const TreeTopology& topo, const TreeParams& p,
                                const std::vector<int>& off, int total) {
  Matrix j = Matrix::Zero(total, total);
  for (int i = 0; i < topo.n_spatial_nodes(); ++i) {
    const int di = topo.node_dim[static_cast<std::size_t>(i)];
    const int oi = off[static_cast<std::size_t>(i)];
    if (topo.parent[static_cast<std::size_t>(i)] < 0) {
      j.block(oi, oi, di, di) += solve_spd(p.root_cov, Matrix::Identity(di, di), "tree J root");
      continue;
    }
    const int par = topo.parent[static_cast<std::size_t>(i)];
    const int dp = topo.node_dim[static_cast<std::size_t>(par)];
    const int op = off[static_cast<std::size_t>(par)];
    const Matrix qi_inv = solve_spd(p.q[static_cast<std::size_t>(i)], Matrix::Identity(di, di), "tree J q");
    const Matrix& ai = p.a[static_cast<std::size_t>(i)];
    j.block(oi, oi, di, di) += qi_inv;
    j.block(op, op, dp, dp) += ai.transpose() * qi_inv * ai;
    j.block(oi, op, di, dp) -= qi_inv * ai;
    j.block(op, oi, dp, di) -= ai.transpose() * qi_inv;
  }
  return j;
}

}  // namespace

EmResult learn_tree_em(const TreeTopology& topo, const SampleSet& s, int max_iter,
                       double tol, const EmOptions& opts) {
  const int t = topo.frames, n = topo.pixels();
  if (s.dims.t_len != t || s.dims.n_len != n)
    throw BadInputError("learn_tree_em: sample dims do not match topology");
  const int nsamp = s.n_samples();

  int total = 0;
  const std::vector<int> off = spatial_offsets(topo, &total);

  // leaf variable offsets in pixel order
  std::vector<int> leaf_var(static_cast<std::size_t>(n), -1);
  for (int id : topo.leaves())
    leaf_var[static_cast<std::size_t>(topo.leaf_pixel[static_cast<std::size_t>(id)])] =
        off[static_cast<std::size_t>(id)];

  // per-frame pooled second moments of the pixel vector
  std::vector<Matrix> frame_cov(static_cast<std::size_t>(t));
  for (int f = 0; f < t; ++f) {
    const Matrix yf = s.x.middleRows(f * n, n);
    frame_cov[static_cast<std::size_t>(f)] = (yf * yf.transpose()) / static_cast<double>(nsamp);
  }

  // group frames by observation pattern
  std::vector<std::vector<int>> pattern_frames;
  std::vector<std::vector<bool>> pattern_mask;
  for (int f = 0; f < t; ++f) {
    std::vector<bool> mask(static_cast<std::size_t>(n), true);
    if (opts.valid) mask = (*opts.valid)[static_cast<std::size_t>(f)];
    auto it = std::find(pattern_mask.begin(), pattern_mask.end(), mask);
    if (it == pattern_mask.end()) {
      pattern_mask.push_back(mask);
      pattern_frames.push_back({f});
    } else {
      pattern_frames[static_cast<std::size_t>(it - pattern_mask.begin())].push_back(f);
    }
  }

  EmResult res;
  if (opts.init) {
    res.params = *opts.init;
  } else {
    double var_acc = 0.0;
    int var_cnt = 0;
    for (int f = 0; f < t; ++f) {
      var_acc += frame_cov[static_cast<std::size_t>(f)].trace();
      var_cnt += n;
    }
    const double avg_var = std::max(var_acc / std::max(var_cnt, 1), 1e-8);
    res.params.a.resize(topo.parent.size());
    res.params.q.resize(topo.parent.size());
    for (int i = 0; i < topo.n_spatial_nodes(); ++i) {
      const int di = topo.node_dim[static_cast<std::size_t>(i)];
      const int par = topo.parent[static_cast<std::size_t>(i)];
      if (par < 0) {
        res.params.root_cov = avg_var * Matrix::Identity(di, di);
        continue;
      }
      const int dp = topo.node_dim[static_cast<std::size_t>(par)];
      Matrix a = Matrix::Zero(di, dp);
      for (int k = 0; k < std::min(di, dp); ++k) a(k, k) = 1.0;
      // fixed per-level jitter breaks symmetry-locked stationary points
      const int lvl = topo.scale_of[static_cast<std::size_t>(i)];
      const double jig = 1.0 + 0.05 * static_cast<double>((lvl * 7919 + i * 104729) % 13) / 13.0;
      res.params.a[static_cast<std::size_t>(i)] = a;
      res.params.q[static_cast<std::size_t>(i)] = 0.5 * avg_var * jig * Matrix::Identity(di, di);
    }
  }

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iter; ++iter) {
    const Matrix j = spatial_tree_information(topo, res.params, off, total);

    Matrix second = Matrix::Zero(total, total);
    double loglik = 0.0;
    double weight_total = 0.0;

    for (std::size_t pi = 0; pi < pattern_mask.size(); ++pi) {
      const auto& mask = pattern_mask[pi];
      std::vector<int> obs, hid;
      std::vector<int> obs_pixels;
      for (int px = 0; px < n; ++px) {
        if (mask[static_cast<std::size_t>(px)]) {
          obs.push_back(leaf_var[static_cast<std::size_t>(px)]);
          obs_pixels.push_back(px);
        }
      }
      for (int v = 0; v < total; ++v)
        if (std::find(obs.begin(), obs.end(), v) == obs.end()) hid.push_back(v);

      const int no = static_cast<int>(obs.size());
      const int nh = static_cast<int>(hid.size());
      Matrix c_oo = Matrix::Zero(no, no);
      for (int f : pattern_frames[pi]) {
        const Matrix& cf = frame_cov[static_cast<std::size_t>(f)];
        for (int a = 0; a < no; ++a)
          for (int b = 0; b < no; ++b)
            c_oo(a, b) += cf(obs_pixels[static_cast<std::size_t>(a)],
                             obs_pixels[static_cast<std::size_t>(b)]);
      }
      const double w = static_cast<double>(pattern_frames[pi].size());
      c_oo /= w;

      Matrix j_hh(nh, nh), j_ho(nh, no), j_oo(no, no);
      for (int a = 0; a < nh; ++a) {
        for (int b = 0; b < nh; ++b) j_hh(a, b) = j(hid[static_cast<std::size_t>(a)], hid[static_cast<std::size_t>(b)]);
        for (int b = 0; b < no; ++b) j_ho(a, b) = j(hid[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);
      }
      for (int a = 0; a < no; ++a)
        for (int b = 0; b < no; ++b) j_oo(a, b) = j(obs[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);

      Matrix k_gain, post_cov;
      if (nh > 0) {
        Eigen::LLT<Matrix> llt(j_hh);
        if (llt.info() != Eigen::Success) throw NumericError("learn_tree_em: J_hh not PD");
        k_gain = -llt.solve(j_ho);
        post_cov = llt.solve(Matrix::Identity(nh, nh));
      }

      // observed-layer information and loglikelihood for the current params
      Matrix obs_info = j_oo;
      if (nh > 0) obs_info += j_ho.transpose() * k_gain;
      Eigen::LLT<Matrix> ollt(obs_info);
      if (ollt.info() != Eigen::Success) throw NumericError("learn_tree_em: observed info not PD");
      double logdet_info = 0.0;
      for (int a = 0; a < no; ++a) logdet_info += 2.0 * std::log(ollt.matrixL()(a, a));
      const double trace_term = (obs_info * c_oo).trace();
      loglik += w * (-0.5) * (no * std::log(2.0 * M_PI) - logdet_info + trace_term);

      // pooled posterior second moments
      Matrix sp = Matrix::Zero(total, total);
      for (int a = 0; a < no; ++a)
        for (int b = 0; b < no; ++b) sp(obs[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]) = c_oo(a, b);
      if (nh > 0) {
        const Matrix kc = k_gain * c_oo;
        const Matrix khh = kc * k_gain.transpose() + post_cov;
        for (int a = 0; a < nh; ++a) {
          for (int b = 0; b < no; ++b) {
            sp(hid[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]) = kc(a, b);
            sp(obs[static_cast<std::size_t>(b)], hid[static_cast<std::size_t>(a)]) = kc(a, b);
          }
          for (int b = 0; b < nh; ++b) sp(hid[static_cast<std::size_t>(a)], hid[static_cast<std::size_t>(b)]) = khh(a, b);
        }
      }
      second += w * sp;
      weight_total += w;
    }
    second /= weight_total;
    res.loglik.push_back(loglik);
    res.iterations = iter + 1;

    const bool small_change = std::abs(loglik - prev_ll) <= tol * (1.0 + std::abs(prev_ll));
    prev_ll = loglik;

    // M-step: closed-form updates of a(i), q(i); root_cov stays pinned
    for (int i = 0; i < topo.n_spatial_nodes(); ++i) {
      const int par = topo.parent[static_cast<std::size_t>(i)];
      if (par < 0) continue;
      const int di = topo.node_dim[static_cast<std::size_t>(i)];
      const int dp = topo.node_dim[static_cast<std::size_t>(par)];
      const int oi = off[static_cast<std::size_t>(i)], op = off[static_cast<std::size_t>(par)];
      const Matrix s_ii = second.block(oi, oi, di, di);
      const Matrix s_ip = second.block(oi, op, di, dp);
      const Matrix s_pp = second.block(op, op, dp, dp);
      const Matrix a_new = solve_spd(s_pp, s_ip.transpose(), "em M-step").transpose();
      Matrix q_new = s_ii - a_new * s_ip.transpose();
      q_new = (0.5 * (q_new + q_new.transpose())).eval();
      Eigen::SelfAdjointEigenSolver<Matrix> es(q_new);
      Vector ev = es.eigenvalues();
      bool floored = false;
      for (Eigen::Index k = 0; k < ev.size(); ++k)
        if (ev[k] < opts.q_floor) {
          ev[k] = opts.q_floor;
          floored = true;
        }
      if (floored) {
        q_new = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
        res.q_floored = true;
      }
      res.params.a[static_cast<std::size_t>(i)] = a_new;
      res.params.q[static_cast<std::size_t>(i)] = q_new;
    }

    if (small_change && iter > 0) {
      res.converged = true;
      break;
    }
  }
  return res;
}

ChainParams tree_chain_params(const TreeTopology& topo, const TreeParams& params) {
  const int m_max = topo.n_scales;
  ChainParams chain;
  chain.tree_layer_cov.resize(static_cast<std::size_t>(m_max) + 1);
  chain.a_up.resize(static_cast<std::size_t>(m_max) + 1);
  chain.q_up.resize(static_cast<std::size_t>(m_max) + 1);

  chain.tree_layer_cov[1] = params.root_cov;
  for (int m = 2; m <= m_max; ++m) {
    const int wm = topo.scale_width(m);
    const int wp = topo.scale_width(m - 1);
    Matrix a_down = Matrix::Zero(wm, wp);
    Matrix q_down = Matrix::Zero(wm, wm);
    for (int id : topo.scale_nodes[static_cast<std::size_t>(m)]) {
      const int o = topo.node_scale_offset(id);
      const int d = topo.node_dim[static_cast<std::size_t>(id)];
      const int par = topo.parent[static_cast<std::size_t>(id)];
      const int po = topo.node_scale_offset(par);
      const int pd = topo.node_dim[static_cast<std::size_t>(par)];
      a_down.block(o, po, d, pd) = params.a[static_cast<std::size_t>(id)];
      q_down.block(o, o, d, d) = params.q[static_cast<std::size_t>(id)];
    }
    const Matrix& prev = chain.tree_layer_cov[static_cast<std::size_t>(m - 1)];
    Matrix cur = a_down * prev * a_down.transpose() + q_down;
    cur = (0.5 * (cur + cur.transpose())).eval();
    chain.tree_layer_cov[static_cast<std::size_t>(m)] = cur;

    // backward (fine-to-coarse) parameters of the same joint
    const Matrix cross = prev * a_down.transpose();  // cov(x_[m-1], x_[m])
    const Matrix a_up = solve_spd(cur, cross.transpose(), "tree_chain_params").transpose();
    Matrix q_up = prev - a_up * cross.transpose();
    q_up = (0.5 * (q_up + q_up.transpose())).eval();
    chain.a_up[static_cast<std::size_t>(m - 1)] = a_up;
    chain.q_up[static_cast<std::size_t>(m - 1)] = q_up;
  }
  return chain;
}

namespace {

Matrix lift_per_frame(const Matrix& spatial, int frames) {
  const Eigen::Index w = spatial.rows();
  Matrix out = Matrix::Zero(frames * w, frames * w);
  for (int f = 0; f < frames; ++f) out.block(f * w, f * w, w, w) = spatial;
  return out;
}

}  // namespace

ScaleTargets target_scale_covariances(const TreeTopology& topo, const TreeParams& params,
                                      const SampleSet& s, const ScaleTargetOptions& opts) {
  const int t = topo.frames;
  const int m_max = topo.n_scales;
  const int nsamp = s.n_samples();
  ScaleTargets targets;
  targets.frames = t;
  targets.chain = tree_chain_params(topo, params);
  targets.sigma.resize(static_cast<std::size_t>(m_max) + 1);

  // upward sample propagation, frame by frame
  std::vector<Matrix> y(static_cast<std::size_t>(m_max) + 1);
  y[static_cast<std::size_t>(m_max)] = s.x;
  for (int m = m_max - 1; m >= 1; --m) {
    const Matrix& a_up = targets.chain.a_up[static_cast<std::size_t>(m)];
    const int wm = topo.scale_width(m), wf = topo.scale_width(m + 1);
    Matrix ym(t * wm, nsamp);
    for (int f = 0; f < t; ++f)
      ym.middleRows(f * wm, wm) = a_up * y[static_cast<std::size_t>(m + 1)].middleRows(f * wf, wf);
    y[static_cast<std::size_t>(m)] = std::move(ym);
  }

  // accumulated noise per scale (spatial; frames decoupled in the tree)
  std::vector<Matrix> v(static_cast<std::size_t>(m_max) + 1);
  v[static_cast<std::size_t>(m_max)] = Matrix::Zero(topo.scale_width(m_max), topo.scale_width(m_max));
  for (int m = m_max - 1; m >= 1; --m) {
    const Matrix& a_up = targets.chain.a_up[static_cast<std::size_t>(m)];
    v[static_cast<std::size_t>(m)] =
        a_up * v[static_cast<std::size_t>(m + 1)] * a_up.transpose() + targets.chain.q_up[static_cast<std::size_t>(m)];
  }

  for (int m = 1; m <= m_max; ++m) {
    const int wm = topo.scale_width(m);
    Matrix first;
    if (m == m_max && opts.nonrect_mapping) {
      // samples live on the padded grid; dummy-touching entries carry zero
      // weight and get imputed by the low-rank fit
      const GridMapping& gm = *opts.nonrect_mapping;
      if (s.dims.n_len != gm.padded_n())
        throw BadInputError("target_scale_covariances: samples must live on the padded grid");
      const Matrix pcov = (s.x * s.x.transpose()) / static_cast<double>(nsamp);
      RearrangedMatrix re = rearrange(pcov, s.dims);
      WeightMask mask{Matrix::Ones(re.data.rows(), re.data.cols())};
      const int pn = gm.padded_n();
      for (int i1 = 0; i1 < t; ++i1)
        for (int i2 = 0; i2 < t; ++i2)
          for (int k1 = 0; k1 < pn; ++k1)
            for (int k2 = 0; k2 < pn; ++k2)
              if (!gm.valid(i1, k1) || !gm.valid(i2, k2))
                mask.entries(i1 * t + i2, k1 * pn + k2) = 0.0;
      WeightedLowRankResult wlr = weighted_low_rank(re.data, mask, opts.nonrect_rank);
      first = project_psd(unrearrange(
          {wlr.factors.left * wlr.factors.right.transpose(), s.dims}));
    } else if (opts.kron_scales.count(m) > 0) {
      SampleSet layer;
      layer.dims = Dims(t, wm);
      layer.x = y[static_cast<std::size_t>(m)];
      layer.mu = Vector::Zero(t * wm);
      first = dc_kron_pca(layer, opts.kron_rank).assemble_finalized();
    } else {
      first = (y[static_cast<std::size_t>(m)] * y[static_cast<std::size_t>(m)].transpose()) /
              static_cast<double>(nsamp);
    }
    if (opts.first_term_shrinkage > 0.0) {
      const double scale = first.trace() / static_cast<double>(first.rows());
      first *= (1.0 - opts.first_term_shrinkage);
      first.diagonal().array() += opts.first_term_shrinkage * scale;
    }
    targets.sigma[static_cast<std::size_t>(m)] =
        first + lift_per_frame(v[static_cast<std::size_t>(m)], t);
  }
  return targets;
}

Matrix local_inverse_block(const Matrix& sigma, int start, int len, int halo,
                           bool* ridge_flag) {
  const int w = static_cast<int>(sigma.rows());
  const int lo = std::max(0, start - halo);
  const int hi = std::min(w, start + len + halo);
  Matrix sub = sigma.block(lo, lo, hi - lo, hi - lo);
  Eigen::LLT<Matrix> llt(sub);
  if (llt.info() != Eigen::Success) {
    sub.diagonal().array() += 1e-8 * std::max(1.0, sub.trace() / sub.rows());
    llt.compute(sub);
    if (ridge_flag) *ridge_flag = true;
    if (llt.info() != Eigen::Success)
      throw NumericError("local_inverse_block: submatrix not invertible");
  }
  const Matrix inv = llt.solve(Matrix::Identity(hi - lo, hi - lo));
  return inv.block(start - lo, start - lo, len, len);
}

namespace {

// Layer-level local inversion: spatial range expanded by the halo, all frames
// kept; frame-major center block extracted.
Matrix layer_local_inverse(const Matrix& layer_sigma, int frames, int scale_w, int start,
                           int len, int halo, bool* ridge_flag) {
  const int lo = std::max(0, start - halo);
  const int hi = std::min(scale_w, start + len + halo);
  const int exl = hi - lo;
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(frames) * exl);
  for (int f = 0; f < frames; ++f)
    for (int k = lo; k < hi; ++k) idx.push_back(f * scale_w + k);
  Matrix sub(idx.size(), idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = 0; b < idx.size(); ++b)
      sub(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          layer_sigma(idx[a], idx[b]);
  Eigen::LLT<Matrix> llt(sub);
  if (llt.info() != Eigen::Success) {
    sub.diagonal().array() += 1e-8 * std::max(1.0, sub.trace() / sub.rows());
    llt.compute(sub);
    if (ridge_flag) *ridge_flag = true;
    if (llt.info() != Eigen::Success)
      throw NumericError("layer_local_inverse: submatrix not invertible");
  }
  const Matrix inv = llt.solve(Matrix::Identity(sub.rows(), sub.cols()));
  Matrix center(frames * len, frames * len);
  for (int fa = 0; fa < frames; ++fa)
    for (int ka = 0; ka < len; ++ka)
      for (int fb = 0; fb < frames; ++fb)
        for (int kb = 0; kb < len; ++kb)
          center(fa * len + ka, fb * len + kb) =
              inv(fa * exl + (start - lo) + ka, fb * exl + (start - lo) + kb);
  return center;
}

}  // namespace

void target_inscale_information(ScaleTargets& targets, const TreeTopology& topo,
                                const TreeParams& /*params*/, const InScaleOptions& opts) {
  const int t = targets.frames;
  const int m_max = topo.n_scales;
  targets.j_star.assign(static_cast<std::size_t>(m_max) + 1, {});

  for (int m = 1; m <= m_max; ++m) {
    const int wm = topo.scale_width(m);
    const int block_len = (opts.max_block_vars <= 0) ? wm : std::min(opts.max_block_vars, wm);
    const int halo = (opts.max_block_vars <= 0) ? wm : opts.halo;

    // coarser-scale correction, from the tree-implied cross blocks
    Matrix corr_sp;
    if (m >= 2) {
      const Matrix& a_up = targets.chain.a_up[static_cast<std::size_t>(m - 1)];
      const Matrix& q_up = targets.chain.q_up[static_cast<std::size_t>(m - 1)];
      const Matrix qi_a = solve_spd(q_up, a_up, "target_inscale corr");
      corr_sp = a_up.transpose() * qi_a;
      corr_sp = (0.5 * (corr_sp + corr_sp.transpose())).eval();
    }

    for (int start = 0; start < wm; start += block_len) {
      const int len = std::min(block_len, wm - start);
      ScaleTargets::Block blk;
      blk.spatial_start = start;
      blk.spatial_len = len;
      bool ridge = false;
      if (m == m_max) {
        // bottom scale: target covariance enters through local inversion
        blk.values = layer_local_inverse(targets.sigma[static_cast<std::size_t>(m)], t, wm,
                                         start, len, halo, &ridge);
      } else {
        // the target marginal term cancels against the fine-side correction
        // at non-bottom scales; only the chain noise survives
        const Matrix center = local_inverse_block(
            targets.chain.q_up[static_cast<std::size_t>(m)], start, len, halo, &ridge);
        blk.values = lift_per_frame(center, t);
      }
      if (m >= 2) {
        Matrix corr_block = corr_sp.block(start, start, len, len);
        blk.values += lift_per_frame(corr_block, t);
      }
      blk.values = (0.5 * (blk.values + blk.values.transpose())).eval();
      if (ridge) targets.halo_ridge_applied = true;
      targets.j_star[static_cast<std::size_t>(m)].push_back(std::move(blk));
    }
  }
}

Matrix sparsify_logdet(const Matrix& j_target, double lambda, double admm_tol,
                       int admm_max_iter) {
  const int p = static_cast<int>(j_target.rows());
  if (lambda < 0.0) throw BadInputError("sparsify_logdet: negative lambda");
  Eigen::LLT<Matrix> llt(j_target);
  if (llt.info() != Eigen::Success) throw NumericError("sparsify_logdet: input not PD");
  Matrix exact_inv = llt.solve(Matrix::Identity(p, p));
  exact_inv = (0.5 * (exact_inv + exact_inv.transpose())).eval();
  if (lambda == 0.0) return exact_inv;

  // ADMM on: min_X -logdet X + tr(S X) + lambda * ||offdiag(X)||_1, S = j_target
  double rho = 1.0;
  Matrix x = exact_inv, z = exact_inv, u = Matrix::Zero(p, p);
  for (int it = 0; it < admm_max_iter; ++it) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(rho * (z - u) - j_target);
    Vector ev = es.eigenvalues();
    for (int k = 0; k < p; ++k) ev[k] = (ev[k] + std::sqrt(ev[k] * ev[k] + 4.0 * rho)) / (2.0 * rho);
    x = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();

    const Matrix z_old = z;
    z = x + u;
    const double thr = lambda / rho;
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) {
        if (a == b) continue;
        const double v = z(a, b);
        z(a, b) = v > thr ? v - thr : (v < -thr ? v + thr : 0.0);
      }
    u += x - z;

    const double r_norm = (x - z).norm();
    const double s_norm = rho * (z - z_old).norm();
    const double scale = std::max({x.norm(), z.norm(), 1.0});
    if (r_norm <= admm_tol * scale && s_norm <= admm_tol * scale) break;
    if (r_norm > 10.0 * s_norm) {
      rho *= 2.0;
      u /= 2.0;
    } else if (s_norm > 10.0 * r_norm) {
      rho /= 2.0;
      u *= 2.0;
    }
  }
  z = (0.5 * (z + z.transpose())).eval();
  Eigen::LLT<Matrix> zllt(z);
  if (zllt.info() != Eigen::Success) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(z);
    const double bump = std::max(0.0, -es.eigenvalues().minCoeff()) + 1e-12 * z.trace() / p;
    z.diagonal().array() += bump;
  }
  return z;
}

// ---------------------------------------------------------------------------
// MultiresModel

MultiresModel::MultiresModel(TreeTopology topology, TreeParams params,
                             std::vector<SparseMatrix> sigma_c)
    : topology_(std::move(topology)), params_(std::move(params)), sigma_c_(std::move(sigma_c)) {
  const int t = topology_.frames;
  const int m_max = topology_.n_scales;
  if (static_cast<int>(sigma_c_.size()) != m_max + 1)
    throw BadInputError("MultiresModel: sigma_c must have one slot per scale (1-based)");
  layer_start_.assign(static_cast<std::size_t>(m_max) + 2, 0);
  for (int m = 1; m <= m_max; ++m)
    layer_start_[static_cast<std::size_t>(m + 1)] =
        layer_start_[static_cast<std::size_t>(m)] + t * topology_.scale_width(m);
  total_vars_ = layer_start_[static_cast<std::size_t>(m_max + 1)];
  layer_start_[0] = 0;

  // j_h: parent-child blocks of the tree information matrix, per frame
  std::vector<Eigen::Triplet<double>> trips;
  for (int i = 0; i < topology_.n_spatial_nodes(); ++i) {
    const int par = topology_.parent[static_cast<std::size_t>(i)];
    if (par < 0) continue;
    const int m = topology_.scale_of[static_cast<std::size_t>(i)];
    const int di = topology_.node_dim[static_cast<std::size_t>(i)];
    const int dp = topology_.node_dim[static_cast<std::size_t>(par)];
    const Matrix qi_inv =
        solve_spd(params_.q[static_cast<std::size_t>(i)], Matrix::Identity(di, di), "j_h");
    const Matrix edge = -qi_inv * params_.a[static_cast<std::size_t>(i)];
    const int oi = topology_.node_scale_offset(i);
    const int op = topology_.node_scale_offset(par);
    const int wi = topology_.scale_width(m);
    const int wp = topology_.scale_width(m - 1);
    for (int f = 0; f < t; ++f) {
      const int gi = layer_start_[static_cast<std::size_t>(m)] + f * wi + oi;
      const int gp = layer_start_[static_cast<std::size_t>(m - 1)] + f * wp + op;
      for (int a = 0; a < di; ++a)
        for (int b = 0; b < dp; ++b) {
          trips.emplace_back(gi + a, gp + b, edge(a, b));
          trips.emplace_back(gp + b, gi + a, edge(a, b));
        }
    }
  }
  j_h_.resize(total_vars_, total_vars_);
  j_h_.setFromTriplets(trips.begin(), trips.end());
}

Matrix MultiresModel::dense_information() const {
  Matrix j = Matrix(j_h_);
  const int m_max = topology_.n_scales;
  for (int m = 1; m <= m_max; ++m) {
    const Matrix block = Matrix(sigma_c_[static_cast<std::size_t>(m)]);
    Eigen::LLT<Matrix> llt(block);
    if (llt.info() != Eigen::Success)
      throw NumericError("dense_information: sigma_c block not PD");
    const Matrix inv = llt.solve(Matrix::Identity(block.rows(), block.cols()));
    const int s0 = layer_start_[static_cast<std::size_t>(m)];
    j.block(s0, s0, block.rows(), block.cols()) += inv;
  }
  return j;
}

Matrix MultiresModel::observed_covariance() const {
  const Matrix j = dense_information();
  Eigen::LLT<Matrix> llt(j);
  if (llt.info() != Eigen::Success) throw NumericError("observed_covariance: model not PD");
  const Matrix cov = llt.solve(Matrix::Identity(total_vars_, total_vars_));
  const int no = observed_vars();
  return cov.block(total_vars_ - no, total_vars_ - no, no, no);
}

Matrix MultiresModel::observed_information() const {
  const Matrix j = dense_information();
  const int no = observed_vars();
  const int nh = total_vars_ - no;
  if (nh == 0) return j;
  const Matrix j_hh = j.topLeftCorner(nh, nh);
  const Matrix j_ho = j.topRightCorner(nh, no);
  const Matrix j_oo = j.bottomRightCorner(no, no);
  Eigen::LLT<Matrix> llt(j_hh);
  if (llt.info() != Eigen::Success) throw NumericError("observed_information: J_hh not PD");
  Matrix out = j_oo - j_ho.transpose() * llt.solve(j_ho);
  return 0.5 * (out + out.transpose());
}

namespace {

struct FrameTreeSolver {
  // Solves (D + edges) x = b per frame, where edges are the j_h parent-child
  // blocks restricted to the included spatial nodes. Upward elimination,
  // downward substitution; no fill-in on a tree.
  const TreeTopology* topo;
  const TreeParams* params;

  // Per call: included nodes (spatial ids), per-variable diagonal, rhs.
  // Node variables are indexed by a caller-provided map (node -> position).
  bool solve(const std::vector<int>& order,  // children before parents
             const std::vector<char>& included, const std::vector<int>& var_pos,
             const Vector& diag, Vector& b) const {
    const std::size_t nn = topo->parent.size();
    std::vector<Matrix> pivot(nn);
    std::vector<Matrix> gain(nn);   // G_i = -pivot_i^{-1} edge(i,parent)
    std::vector<Vector> mean(nn);   // m_i = pivot_i^{-1} b_i (post-elimination)
    std::vector<Matrix> edge(nn);   // j_h block (i, parent)

    // eliminate upward
    for (int id : order) {
      const std::size_t i = static_cast<std::size_t>(id);
      if (!included[i]) continue;
      const int di = topo->node_dim[i];
      const int pos = var_pos[i];
      Matrix piv = Matrix::Zero(di, di);
      for (int a = 0; a < di; ++a) piv(a, a) = diag[pos + a];
      // absorb children messages
      for (int c : topo->children[i]) {
        const std::size_t cc = static_cast<std::size_t>(c);
        if (!included[cc] || pivot[cc].size() == 0) continue;
        piv += edge[cc].transpose() * gain[cc];
      }
      Eigen::LLT<Matrix> llt(piv);
      if (llt.info() != Eigen::Success) return false;
      Vector bi = b.segment(var_pos[i], di);
      for (int c : topo->children[i]) {
        const std::size_t cc = static_cast<std::size_t>(c);
        if (!included[cc] || pivot[cc].size() == 0) continue;
        bi += -edge[cc].transpose() * mean[cc];
      }
      mean[i] = llt.solve(bi);
      pivot[i] = piv;
      const int par = topo->parent[i];
      if (par >= 0 && included[static_cast<std::size_t>(par)]) {
        const Matrix qi_inv = solve_spd(params->q[i], Matrix::Identity(di, di), "tree solve");
        edge[i] = -qi_inv * params->a[i];  // block (i, parent)
        gain[i] = -llt.solve(edge[i]);
      } else {
        edge[i] = Matrix();
        gain[i] = Matrix();
      }
    }
    // substitute downward
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t i = static_cast<std::size_t>(*it);
      if (!included[i]) continue;
      const int di = topo->node_dim[i];
      const int par = topo->parent[i];
      Vector xi = mean[i];
      if (par >= 0 && included[static_cast<std::size_t>(par)] && gain[i].size() != 0) {
        const int dp = topo->node_dim[static_cast<std::size_t>(par)];
        xi += gain[i] * b.segment(var_pos[static_cast<std::size_t>(par)], dp);
      }
      b.segment(var_pos[i], di) = xi;
    }
    return true;
  }
};

}  // namespace

InferResult MultiresModel::run_splitting(const std::vector<bool>& solve_mask,
                                         const Vector& h, const Vector& jp_diag_full,
                                         const InferOptions& opts) const {
  const int m_max = topology_.n_scales;
  const int t = topology_.frames;

  // subsystem variable order = global order restricted to solve_mask
  std::vector<int> sub_of_global(static_cast<std::size_t>(total_vars_), -1);
  std::vector<int> global_of_sub;
  for (int g = 0; g < total_vars_; ++g)
    if (solve_mask[static_cast<std::size_t>(g)]) {
      sub_of_global[static_cast<std::size_t>(g)] = static_cast<int>(global_of_sub.size());
      global_of_sub.push_back(g);
    }
  const int ns = static_cast<int>(global_of_sub.size());

  InferResult res;
  res.x = Vector::Zero(ns);
  if (ns == 0) {
    res.converged = true;
    return res;
  }
  Vector jp_diag(ns);
  for (int k = 0; k < ns; ++k)
    jp_diag[k] = jp_diag_full[global_of_sub[static_cast<std::size_t>(k)]];

  // in-scale machinery per scale: full layers keep the sparse factorization,
  // the partially included bottom layer gets a dense inverse-submatrix
  struct ScaleSys {
    bool full = false;
    int layer0 = 0, layer_n = 0;
    const SparseMatrix* sc = nullptr;
    std::shared_ptr<Eigen::SimplicialLDLT<SparseMatrix>> solver;
    std::vector<int> part_idx;  // layer-local indices in the subsystem
    Matrix w;                   // (inv(sigma_c))_{part,part}
    Eigen::LLT<Matrix> w_llt;
  };
  std::vector<ScaleSys> scales(static_cast<std::size_t>(m_max) + 1);
  for (int m = 1; m <= m_max; ++m) {
    ScaleSys& sys = scales[static_cast<std::size_t>(m)];
    sys.layer0 = layer_start_[static_cast<std::size_t>(m)];
    sys.layer_n = t * topology_.scale_width(m);
    sys.sc = &sigma_c_[static_cast<std::size_t>(m)];
    int in_count = 0;
    for (int k = 0; k < sys.layer_n; ++k)
      if (solve_mask[static_cast<std::size_t>(sys.layer0 + k)]) ++in_count;
    if (in_count == 0) continue;
    sys.solver = std::make_shared<Eigen::SimplicialLDLT<SparseMatrix>>(*sys.sc);
    if (sys.solver->info() != Eigen::Success)
      throw NumericError("infer: sigma_c factorization failed");
    if (in_count == sys.layer_n) {
      sys.full = true;
    } else {
      for (int k = 0; k < sys.layer_n; ++k)
        if (solve_mask[static_cast<std::size_t>(sys.layer0 + k)]) sys.part_idx.push_back(k);
      const int d = static_cast<int>(sys.part_idx.size());
      Matrix cols(sys.layer_n, d);
      Matrix rhs = Matrix::Zero(sys.layer_n, d);
      for (int k = 0; k < d; ++k) rhs(sys.part_idx[static_cast<std::size_t>(k)], k) = 1.0;
      cols = sys.solver->solve(rhs);
      sys.w.resize(d, d);
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) sys.w(a, b) = cols(sys.part_idx[static_cast<std::size_t>(a)], b);
      sys.w = (0.5 * (sys.w + sys.w.transpose())).eval();
      sys.w_llt.compute(sys.w);
      if (sys.w_llt.info() != Eigen::Success)
        throw NumericError("infer: partial in-scale block not PD");
    }
  }

  // apply inv(sigma_c) restricted to the subsystem
  auto apply_inscale_inverse = [&](const Vector& xs) {
    Vector out = Vector::Zero(ns);
    for (int m = 1; m <= m_max; ++m) {
      const ScaleSys& sys = scales[static_cast<std::size_t>(m)];
      if (!sys.solver) continue;
      if (sys.full) {
        Vector xl(sys.layer_n);
        for (int k = 0; k < sys.layer_n; ++k)
          xl[k] = xs[sub_of_global[static_cast<std::size_t>(sys.layer0 + k)]];
        const Vector yl = sys.solver->solve(xl);
        for (int k = 0; k < sys.layer_n; ++k)
          out[sub_of_global[static_cast<std::size_t>(sys.layer0 + k)]] = yl[k];
      } else {
        const int d = static_cast<int>(sys.part_idx.size());
        Vector xp(d);
        for (int k = 0; k < d; ++k)
          xp[k] = xs[sub_of_global[static_cast<std::size_t>(sys.layer0 + sys.part_idx[static_cast<std::size_t>(k)])]];
        const Vector yp = sys.w * xp;
        for (int k = 0; k < d; ++k)
          out[sub_of_global[static_cast<std::size_t>(sys.layer0 + sys.part_idx[static_cast<std::size_t>(k)])]] = yp[k];
      }
    }
    return out;
  };
  auto apply_inscale = [&](const Vector& xs) {  // multiply by the subsystem sigma_c
    Vector out = Vector::Zero(ns);
    for (int m = 1; m <= m_max; ++m) {
      const ScaleSys& sys = scales[static_cast<std::size_t>(m)];
      if (!sys.solver) continue;
      if (sys.full) {
        Vector xl(sys.layer_n);
        for (int k = 0; k < sys.layer_n; ++k)
          xl[k] = xs[sub_of_global[static_cast<std::size_t>(sys.layer0 + k)]];
        const Vector yl = (*sys.sc) * xl;
        for (int k = 0; k < sys.layer_n; ++k)
          out[sub_of_global[static_cast<std::size_t>(sys.layer0 + k)]] = yl[k];
      } else {
        const int d = static_cast<int>(sys.part_idx.size());
        Vector xp(d);
        for (int k = 0; k < d; ++k)
          xp[k] = xs[sub_of_global[static_cast<std::size_t>(sys.layer0 + sys.part_idx[static_cast<std::size_t>(k)])]];
        const Vector yp = sys.w_llt.solve(xp);
        for (int k = 0; k < d; ++k)
          out[sub_of_global[static_cast<std::size_t>(sys.layer0 + sys.part_idx[static_cast<std::size_t>(k)])]] = yp[k];
      }
    }
    return out;
  };

  // splitting diagonal D = diag of the subsystem in-scale information
  Vector d_diag = Vector::Zero(ns);
  for (int m = 1; m <= m_max; ++m) {
    const ScaleSys& sys = scales[static_cast<std::size_t>(m)];
    if (!sys.solver) continue;
    if (sys.full) {
      // diagonal of inv(sigma_c): unit-vector solves on the block
      for (int k = 0; k < sys.layer_n; ++k) {
        Vector e = Vector::Zero(sys.layer_n);
        e[k] = 1.0;
        d_diag[sub_of_global[static_cast<std::size_t>(sys.layer0 + k)]] =
            sys.solver->solve(e)[k];
      }
    } else {
      for (int k = 0; k < static_cast<int>(sys.part_idx.size()); ++k)
        d_diag[sub_of_global[static_cast<std::size_t>(sys.layer0 + sys.part_idx[static_cast<std::size_t>(k)])]] =
            sys.w(k, k);
    }
  }

  // j_h restricted to the subsystem
  SparseMatrix jh_sub(ns, ns);
  {
    std::vector<Eigen::Triplet<double>> trips;
    for (int col = 0; col < j_h_.outerSize(); ++col) {
      const int sc_col = sub_of_global[static_cast<std::size_t>(col)];
      if (sc_col < 0) continue;
      for (SparseMatrix::InnerIterator it(j_h_, col); it; ++it) {
        const int sc_row = sub_of_global[static_cast<std::size_t>(it.row())];
        if (sc_row < 0) continue;
        trips.emplace_back(sc_row, sc_col, it.value());
      }
    }
    jh_sub.setFromTriplets(trips.begin(), trips.end());
  }

  // node elimination order (children before parents) and per-frame inclusion
  std::vector<int> order;
  order.reserve(topology_.parent.size());
  for (int m = m_max; m >= 1; --m)
    for (int id : topology_.scale_nodes[static_cast<std::size_t>(m)]) order.push_back(id);

  std::vector<std::vector<char>> included_f(static_cast<std::size_t>(t),
                                            std::vector<char>(topology_.parent.size(), 0));
  std::vector<std::vector<int>> var_pos_f(static_cast<std::size_t>(t),
                                          std::vector<int>(topology_.parent.size(), -1));
  for (int f = 0; f < t; ++f) {
    for (int m = 1; m <= m_max; ++m) {
      const int w = topology_.scale_width(m);
      for (int id : topology_.scale_nodes[static_cast<std::size_t>(m)]) {
        const int o = topology_.node_scale_offset(id);
        const int g = layer_start_[static_cast<std::size_t>(m)] + f * w + o;
        const int sidx = sub_of_global[static_cast<std::size_t>(g)];
        if (sidx < 0) continue;
        included_f[static_cast<std::size_t>(f)][static_cast<std::size_t>(id)] = 1;
        var_pos_f[static_cast<std::size_t>(f)][static_cast<std::size_t>(id)] = sidx;
      }
    }
  }

  FrameTreeSolver tree_solver{&topology_, &params_};
  const Vector split_diag = d_diag + jp_diag;

  auto residual_norm = [&](const Vector& xs) {
    const Vector r = jh_sub * xs + apply_inscale_inverse(xs) + jp_diag.cwiseProduct(xs) - h;
    return r.norm();
  };

  auto tree_precond = [&](const Vector& r) {
    Vector z = r;
    for (int f = 0; f < t; ++f)
      if (!tree_solver.solve(order, included_f[static_cast<std::size_t>(f)],
                             var_pos_f[static_cast<std::size_t>(f)], split_diag, z))
        throw NumericError("infer: splitting preconditioner not PD");
    return z;
  };
  auto apply_full = [&](const Vector& xs) {
    return Vector(jh_sub * xs + apply_inscale_inverse(xs) + jp_diag.cwiseProduct(xs));
  };

  const double h_scale = std::max(1.0, h.norm());
  Vector x = Vector::Zero(ns);
  Vector best_x = x;
  double best_res = residual_norm(x);
  int rising = 0;
  double last_res = best_res;

  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    // between-scale: (j_h + J^p + D) x_half = h - inv(sigma_c) x + D x
    Vector x_half = h - apply_inscale_inverse(x) + d_diag.cwiseProduct(x);
    bool ok = true;
    for (int f = 0; f < t && ok; ++f)
      ok = tree_solver.solve(order, included_f[static_cast<std::size_t>(f)],
                             var_pos_f[static_cast<std::size_t>(f)], split_diag, x_half);
    if (!ok) {
      res.diverged = true;
      break;
    }

    // in-scale: x = sigma_c (h - (j_h + J^p) x_half)
    const Vector inner = h - jh_sub * x_half - jp_diag.cwiseProduct(x_half);
    x = apply_inscale(inner);

    const double r = residual_norm(x);
    res.iterations = iter;
    if (r < best_res) {
      best_res = r;
      best_x = x;
    }
    if (r <= opts.tol * h_scale) {
      res.converged = true;
      break;
    }
    rising = (r > last_res) ? rising + 1 : 0;
    last_res = r;
    if (rising >= 10) {
      res.diverged = true;
      break;
    }
  }

  if (!res.converged && res.diverged) {
    // safeguarded finish: CG on the SPD system with the same tree + diagonal
    // preconditioner the splitting uses
    res.used_fallback = true;
    x = best_x;
    Vector r = h - apply_full(x);
    Vector z = tree_precond(r);
    Vector p = z;
    double rz = r.dot(z);
    for (int iter = 1; iter <= opts.max_iter && r.norm() > opts.tol * h_scale; ++iter) {
      const Vector jp_vec = apply_full(p);
      const double denom = p.dot(jp_vec);
      if (denom <= 0.0) break;
      const double alpha = rz / denom;
      x += alpha * p;
      r -= alpha * jp_vec;
      z = tree_precond(r);
      const double rz_new = r.dot(z);
      p = z + (rz_new / rz) * p;
      rz = rz_new;
      res.iterations += 1;
    }
    const double rn = r.norm();
    if (rn < best_res) {
      best_res = rn;
      best_x = x;
    }
    res.converged = best_res <= opts.tol * h_scale;
  }

  res.x = best_x;
  res.residual = best_res;
  return res;
}

namespace {

// -J x_tilde restricted to the subsystem, where x_tilde carries the observed
// leaf values; the in-scale part contributes through inv(sigma_c_M).
Vector exact_mode_rhs(const SparseMatrix& j_h, const SparseMatrix& sigma_c_bottom,
                      int total_vars, int leaf_start, const Vector& y_layer,
                      const std::vector<bool>& solve_mask) {
  Vector x_tilde = Vector::Zero(total_vars);
  x_tilde.segment(leaf_start, y_layer.size()) = y_layer;
  Vector jx = j_h * x_tilde;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(sigma_c_bottom);
  if (ldlt.info() != Eigen::Success) throw NumericError("infer: sigma_c bottom not factorizable");
  const Vector z = ldlt.solve(y_layer);
  jx.segment(leaf_start, y_layer.size()) += z;
  Vector h(total_vars);
  h = -jx;
  Vector out;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(total_vars));
  for (int g = 0; g < total_vars; ++g)
    if (solve_mask[static_cast<std::size_t>(g)]) vals.push_back(h[g]);
  out = Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  return out;
}

}  // namespace

InferResult MultiresModel::infer_exact(const Vector& y,
                                                      const InferOptions& opts) const {
  const int no = observed_vars();
  const int leaf_start = layer_start_[static_cast<std::size_t>(topology_.n_scales)];
  if (y.size() != no) throw BadInputError("infer_exact: observation length mismatch");
  std::vector<bool> observed(static_cast<std::size_t>(no), true);
  if (opts.observed) observed = *opts.observed;

  Vector y_layer = y;
  for (int k = 0; k < no; ++k)
    if (!observed[static_cast<std::size_t>(k)]) y_layer[k] = 0.0;

  std::vector<bool> solve_mask(static_cast<std::size_t>(total_vars_), true);
  for (int k = 0; k < no; ++k)
    solve_mask[static_cast<std::size_t>(leaf_start + k)] = !observed[static_cast<std::size_t>(k)];

  const Vector h = exact_mode_rhs(j_h_, sigma_c_[static_cast<std::size_t>(topology_.n_scales)],
                                  total_vars_, leaf_start, y_layer, solve_mask);
  InferResult sub = run_splitting(solve_mask, h, Vector::Zero(total_vars_), opts);

  Vector full = Vector::Zero(total_vars_);
  full.segment(leaf_start, no) = y_layer;
  int si = 0;
  for (int g = 0; g < total_vars_; ++g)
    if (solve_mask[static_cast<std::size_t>(g)]) full[g] = sub.x[si++];
  sub.x = full;
  return sub;
}

InferResult MultiresModel::infer_noisy(const std::vector<int>& selected,
                                                      const Vector& y, const Vector& r_diag,
                                                      const InferOptions& opts) const {
  if (static_cast<Eigen::Index>(selected.size()) != y.size() || y.size() != r_diag.size())
    throw BadInputError("infer_noisy: selection/observation length mismatch");
  Vector h = Vector::Zero(total_vars_);
  Vector jp = Vector::Zero(total_vars_);
  for (std::size_t k = 0; k < selected.size(); ++k) {
    const int g = selected[k];
    if (g < 0 || g >= total_vars_) throw BadInputError("infer_noisy: selection out of range");
    if (r_diag[static_cast<Eigen::Index>(k)] <= 0.0)
      throw BadInputError("infer_noisy: noise variances must be positive");
    h[g] += y[static_cast<Eigen::Index>(k)] / r_diag[static_cast<Eigen::Index>(k)];
    jp[g] += 1.0 / r_diag[static_cast<Eigen::Index>(k)];
  }
  std::vector<bool> solve_mask(static_cast<std::size_t>(total_vars_), true);
  return run_splitting(solve_mask, h, jp, opts);
}

double MultiresModel::observed_score(const Vector& y, const InferOptions& opts) const {
  const int no = observed_vars();
  const int leaf_start = layer_start_[static_cast<std::size_t>(topology_.n_scales)];
  if (y.size() != no) throw BadInputError("observed_score: observation length mismatch");
  std::vector<bool> observed(static_cast<std::size_t>(no), true);
  if (opts.observed) observed = *opts.observed;
  Vector y_layer = y;
  for (int k = 0; k < no; ++k)
    if (!observed[static_cast<std::size_t>(k)]) y_layer[k] = 0.0;

  Eigen::SimplicialLDLT<SparseMatrix> ldlt(sigma_c_[static_cast<std::size_t>(topology_.n_scales)]);
  if (ldlt.info() != Eigen::Success) throw NumericError("observed_score: model not PD");
  const Vector z = ldlt.solve(y_layer);
  const double term1 = y_layer.dot(z);

  std::vector<bool> solve_mask(static_cast<std::size_t>(total_vars_), true);
  for (int k = 0; k < no; ++k)
    solve_mask[static_cast<std::size_t>(leaf_start + k)] = !observed[static_cast<std::size_t>(k)];
  const Vector h = exact_mode_rhs(j_h_, sigma_c_[static_cast<std::size_t>(topology_.n_scales)],
                                  total_vars_, leaf_start, y_layer, solve_mask);
  InferResult sub = run_splitting(solve_mask, h, Vector::Zero(total_vars_), opts);
  if (sub.diverged) throw NumericError("observed_score: splitting iteration diverged");
  return term1 - h.dot(sub.x);
}

MultiresModel fit_multires(const TreeTopology& topology, const SampleSet& s,
                           const MultiresFitOptions& opts) {
  EmResult em = learn_tree_em(topology, s, opts.em_max_iter, opts.em_tol, [&] {
    EmOptions eo;
    if (opts.targets.nonrect_mapping) {
      const GridMapping& gm = *opts.targets.nonrect_mapping;
      std::vector<std::vector<bool>> valid(static_cast<std::size_t>(topology.frames));
      for (int f = 0; f < topology.frames; ++f) {
        valid[static_cast<std::size_t>(f)].resize(static_cast<std::size_t>(topology.pixels()));
        for (int px = 0; px < topology.pixels(); ++px)
          valid[static_cast<std::size_t>(f)][static_cast<std::size_t>(px)] = gm.valid(f, px);
      }
      eo.valid = std::move(valid);
    }
    return eo;
  }());

  ScaleTargets targets = target_scale_covariances(topology, em.params, s, opts.targets);
  target_inscale_information(targets, topology, em.params, opts.inscale);

  const int t = topology.frames;
  std::vector<SparseMatrix> sigma_c(static_cast<std::size_t>(topology.n_scales) + 1);
  for (int m = 1; m <= topology.n_scales; ++m) {
    const int wm = topology.scale_width(m);
    SparseMatrix sc(t * wm, t * wm);
    std::vector<Eigen::Triplet<double>> trips;
    for (const auto& blk : targets.j_star[static_cast<std::size_t>(m)]) {
      const Matrix sparse_cov = sparsify_logdet(blk.values, opts.lambda);
      const int len = blk.spatial_len;
      for (int fa = 0; fa < t; ++fa)
        for (int ka = 0; ka < len; ++ka)
          for (int fb = 0; fb < t; ++fb)
            for (int kb = 0; kb < len; ++kb) {
              const double v = sparse_cov(fa * len + ka, fb * len + kb);
              if (v != 0.0)
                trips.emplace_back(fa * wm + blk.spatial_start + ka,
                                   fb * wm + blk.spatial_start + kb, v);
            }
    }
    sc.setFromTriplets(trips.begin(), trips.end());
    sigma_c[static_cast<std::size_t>(m)] = std::move(sc);
  }
  return MultiresModel(topology, em.params, std::move(sigma_c));
}

SampleSet augment_shifted_samples(const SampleSet& s,
                                  const std::vector<std::pair<int, int>>& shifts,
                                  const ClipGeometry& geometry) {
  const int h = geometry.height, w = geometry.width, t = geometry.frames;
  if (h * w * t != s.dims.side())
    throw BadInputError("augment_shifted_samples: geometry does not match sample dims");
  if (shifts.empty()) return s;
  for (const auto& [dy, dx] : shifts)
    if (std::abs(dy) >= h || std::abs(dx) >= w)
      throw BadInputError("augment_shifted_samples: shift out of bounds");

  const int n = s.n_samples();
  Matrix raw(s.dims.side(), static_cast<Eigen::Index>(n) * (1 + shifts.size()));
  const Matrix orig = s.x.colwise() + s.mu;
  raw.leftCols(n) = orig;
  int col = n;
  for (const auto& [dy, dx] : shifts) {
    for (int c = 0; c < n; ++c, ++col) {
      for (int f = 0; f < t; ++f)
        for (int r = 0; r < h; ++r)
          for (int cc = 0; cc < w; ++cc) {
            const int sr = ((r - dy) % h + h) % h;
            const int sc = ((cc - dx) % w + w) % w;
            raw(f * h * w + r * w + cc, col) = orig(f * h * w + sr * w + sc, c);
          }
    }
  }
  return make_sample_set(raw, s.dims);
}

}  // namespace stcov
