#include "stcov/anomaly.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>

namespace stcov {

ArScorer ArScorer::from_information(const Matrix& j, const Vector& mu, const Dims& dims,
                                    int height, int width) {
  if (j.rows() != dims.side() || j.cols() != dims.side())
    throw BadInputError("ArScorer: J side mismatch");
  if (height * width != dims.n_len) throw BadInputError("ArScorer: geometry mismatch");
  ArScorer s;
  s.j = 0.5 * (j + j.transpose());
  s.dims = dims;
  s.height = height;
  s.width = width;
  const int n = dims.n_len;
  for (int i = 0; i < dims.t_len; ++i) s.j_blocks.push_back(s.j.block(0, i * n, n, n));
  if (mu.size() == n) {
    s.mu = mu;
  } else if (mu.size() == dims.side()) {
    s.mu = mu;
    s.stationary_mean = false;
  } else {
    throw BadInputError("ArScorer: mean length must be N or NT");
  }
  return s;
}

ArScorer ArScorer::from_covariance(const Matrix& sigma, const Vector& mu, const Dims& dims,
                                   int height, int width, double relative_ridge) {
  Matrix work = 0.5 * (sigma + sigma.transpose());
  const double scale = std::max(work.trace() / work.rows(), 1e-300);
  work.diagonal().array() += relative_ridge * scale;
  Eigen::LLT<Matrix> llt(work);
  while (llt.info() != Eigen::Success) {
    work.diagonal().array() += 1e-6 * scale;
    llt.compute(work);
  }
  const Matrix j = llt.solve(Matrix::Identity(work.rows(), work.cols()));
  return from_information(j, mu, dims, height, width);
}

double ar_score(const ArScorer& scorer, const Vector& clip) {
  const int n = scorer.dims.n_len, t = scorer.dims.t_len;
  if (clip.size() % n != 0) throw BadInputError("ar_score: clip length not a frame multiple");
  const int t1 = static_cast<int>(clip.size()) / n;
  if (t1 < t) throw BadInputError("ar_score: clip shorter than the model window");

  Vector dev(clip.size());
  if (scorer.stationary_mean) {
    for (int m = 0; m < t1; ++m) dev.segment(m * n, n) = clip.segment(m * n, n) - scorer.mu;
  } else {
    if (t1 != t) throw BadInputError("ar_score: full-length mean requires t1 == T");
    dev = clip - scorer.mu;
  }

  if (t1 == t) return dev.dot(scorer.j * dev);

  double acc = 0.0;
  for (int m = 0; m < t1; ++m) {
    const auto xm = dev.segment(m * n, n);
    acc += xm.dot(scorer.j_blocks[0] * xm);
  }
  for (int i = 2; i <= t; ++i) {
    const Matrix& ji = scorer.j_blocks[static_cast<std::size_t>(i - 1)];
    for (int m = 0; m + i - 1 < t1; ++m)
      acc += 2.0 * dev.segment(m * n, n).dot(ji * dev.segment((m + i - 1) * n, n));
  }
  return acc;
}

namespace {

double quantile_type7(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = (static_cast<double>(n) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

DecisionPolicy calibrate_thresholds(std::vector<double> scores, double alpha_low,
                                    double alpha_high) {
  if (scores.size() < 20) throw BadInputError("calibrate_thresholds: need >= 20 scores");
  if (alpha_low < 0.0 || alpha_high < 0.0 || alpha_low + alpha_high >= 1.0)
    throw BadInputError("calibrate_thresholds: invalid alphas");
  std::sort(scores.begin(), scores.end());
  DecisionPolicy policy;
  policy.low_threshold = quantile_type7(scores, 1.0 - alpha_low);
  policy.high_threshold = quantile_type7(scores, alpha_high);
  policy.degenerate_calibration = (scores.front() == scores.back());
  policy.validate();
  return policy;
}

const char* to_string(Decision d) {
  switch (d) {
    case Decision::kNormal: return "normal";
    case Decision::kAnomalousLowLikelihood: return "anomalous-low-likelihood";
    case Decision::kAnomalousHighLikelihood: return "anomalous-high-likelihood";
    case Decision::kAnomalousPatchVariance: return "anomalous-patch-variance";
  }
  return "unknown";
}

PatchScorers build_patch_scorers(const ArScorer& scorer, int patch_rows, int patch_cols) {
  if (patch_rows < 1 || patch_cols < 1)
    throw BadInputError("build_patch_scorers: grid must be positive");
  PatchScorers out;
  out.rows = patch_rows;
  out.cols = patch_cols;
  out.uneven = (scorer.height % patch_rows != 0) || (scorer.width % patch_cols != 0);

  Eigen::LLT<Matrix> llt(scorer.j);
  if (llt.info() != Eigen::Success) throw BadInputError("build_patch_scorers: J not PD");
  const Matrix sigma = llt.solve(Matrix::Identity(scorer.j.rows(), scorer.j.cols()));

  const int t = scorer.dims.t_len, n = scorer.dims.n_len;
  for (int pr = 0; pr < patch_rows; ++pr) {
    const int r0 = (pr * scorer.height) / patch_rows;
    const int r1 = ((pr + 1) * scorer.height) / patch_rows;
    for (int pc = 0; pc < patch_cols; ++pc) {
      const int c0 = (pc * scorer.width) / patch_cols;
      const int c1 = ((pc + 1) * scorer.width) / patch_cols;
      std::vector<int> pixels;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) pixels.push_back(r * scorer.width + c);
      const int p = static_cast<int>(pixels.size());

      // spatio-temporal marginal of the patch (all frames)
      std::vector<int> idx;
      for (int f = 0; f < t; ++f)
        for (int px : pixels) idx.push_back(f * n + px);
      Matrix sub(idx.size(), idx.size());
      for (std::size_t a = 0; a < idx.size(); ++a)
        for (std::size_t b = 0; b < idx.size(); ++b)
          sub(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
              sigma(idx[a], idx[b]);
      Vector pmu;
      if (scorer.stationary_mean) {
        pmu.resize(p);
        for (int k = 0; k < p; ++k) pmu[k] = scorer.mu[pixels[static_cast<std::size_t>(k)]];
      } else {
        pmu.resize(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) pmu[static_cast<Eigen::Index>(k)] = scorer.mu[idx[k]];
      }
      out.scorers.push_back(
          ArScorer::from_covariance(sub, pmu, Dims(t, p), r1 - r0, c1 - c0));
      out.patch_pixels.push_back(std::move(pixels));
    }
  }
  return out;
}

namespace {

Vector extract_patch_clip(const Vector& clip, const std::vector<int>& pixels, int n, int t1) {
  const int p = static_cast<int>(pixels.size());
  Vector out(static_cast<Eigen::Index>(p) * t1);
  for (int m = 0; m < t1; ++m)
    for (int k = 0; k < p; ++k)
      out[m * p + k] = clip[m * n + pixels[static_cast<std::size_t>(k)]];
  return out;
}

}  // namespace

AnomalyReport decide(const DecisionPolicy& policy, const ArScorer& scorer,
                     const PatchScorers& patches, const Vector& clip) {
  policy.validate();
  AnomalyReport report;
  report.clip_score = ar_score(scorer, clip);
  report.uneven_patches = patches.uneven;
  report.patch_flags.assign(static_cast<std::size_t>(patches.rows),
                            std::vector<bool>(static_cast<std::size_t>(patches.cols), false));
  if (report.clip_score > policy.low_threshold) {
    report.decision = Decision::kAnomalousLowLikelihood;
    return report;
  }
  if (report.clip_score < policy.high_threshold) {
    report.decision = Decision::kAnomalousHighLikelihood;
    return report;
  }

  const int n = scorer.dims.n_len;
  const int t1 = static_cast<int>(clip.size()) / n;
  report.patch_scores.resize(patches.rows, patches.cols);
  double mean = 0.0;
  for (int pr = 0; pr < patches.rows; ++pr) {
    for (int pc = 0; pc < patches.cols; ++pc) {
      const std::size_t pi = static_cast<std::size_t>(pr * patches.cols + pc);
      const auto& ps = patches.scorers[pi];
      const Vector pclip = extract_patch_clip(clip, patches.patch_pixels[pi], n, t1);
      const double dim = static_cast<double>(pclip.size());
      report.patch_scores(pr, pc) = ar_score(ps, pclip) / dim;
      mean += report.patch_scores(pr, pc);
    }
  }
  const int np = patches.rows * patches.cols;
  mean /= np;
  double var = 0.0;
  for (int pr = 0; pr < patches.rows; ++pr)
    for (int pc = 0; pc < patches.cols; ++pc)
      var += (report.patch_scores(pr, pc) - mean) * (report.patch_scores(pr, pc) - mean);
  var /= std::max(np - 1, 1);
  if (var > policy.patch_variance_threshold)
    report.decision = Decision::kAnomalousPatchVariance;
  return report;
}

std::vector<std::vector<bool>> localize(const PatchScorers& patches,
                                        const std::vector<DecisionPolicy>& per_patch_policy,
                                        const Vector& clip) {
  if (per_patch_policy.empty()) throw BadInputError("localize: no policy");
  const std::size_t np = patches.scorers.size();
  if (per_patch_policy.size() != 1 && per_patch_policy.size() != np)
    throw BadInputError("localize: policy count must be 1 or one per patch");
  std::vector<std::vector<bool>> flags(static_cast<std::size_t>(patches.rows),
                                       std::vector<bool>(static_cast<std::size_t>(patches.cols)));
  int parent_n = 0;
  for (const auto& px : patches.patch_pixels) parent_n += static_cast<int>(px.size());
  const int t1 = static_cast<int>(clip.size()) / parent_n;
  for (int pr = 0; pr < patches.rows; ++pr) {
    for (int pc = 0; pc < patches.cols; ++pc) {
      const std::size_t pi = static_cast<std::size_t>(pr * patches.cols + pc);
      const DecisionPolicy& pol =
          per_patch_policy.size() == 1 ? per_patch_policy[0] : per_patch_policy[pi];
      const Vector pclip = extract_patch_clip(clip, patches.patch_pixels[pi], parent_n, t1);
      const double s = ar_score(patches.scorers[pi], pclip);
      flags[static_cast<std::size_t>(pr)][static_cast<std::size_t>(pc)] =
          (s > pol.low_threshold) || (s < pol.high_threshold);
    }
  }
  return flags;
}

RocResult roc_auc(const std::vector<double>& scores_normal,
                  const std::vector<double>& scores_anomalous,
                  std::optional<double> center) {
  if (scores_normal.empty() || scores_anomalous.empty())
    throw BadInputError("roc_auc: empty score list");
  double c = 0.0;
  if (center) {
    c = *center;
  } else {
    std::vector<double> sorted = scores_normal;
    std::sort(sorted.begin(), sorted.end());
    c = quantile_type7(sorted, 0.5);
  }

  struct Item {
    double stat;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(scores_normal.size() + scores_anomalous.size());
  for (double s : scores_normal) items.push_back({std::abs(s - c), false});
  for (double s : scores_anomalous) items.push_back({std::abs(s - c), true});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return a.stat > b.stat;
  });

  const double np = static_cast<double>(scores_anomalous.size());
  const double nn = static_cast<double>(scores_normal.size());
  RocResult roc;
  roc.points.emplace_back(0.0, 0.0);
  double tp = 0.0, fp = 0.0, auc = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    // group ties so the trapezoid matches the pairwise statistic
    double tp_add = 0.0, fp_add = 0.0;
    const double v = items[i].stat;
    while (i < items.size() && items[i].stat == v) {
      if (items[i].positive) tp_add += 1.0;
      else fp_add += 1.0;
      ++i;
    }
    const double tpr0 = tp / np, fpr0 = fp / nn;
    tp += tp_add;
    fp += fp_add;
    const double tpr1 = tp / np, fpr1 = fp / nn;
    auc += (fpr1 - fpr0) * 0.5 * (tpr0 + tpr1);
    roc.points.emplace_back(fpr1, tpr1);
  }
  roc.auc = auc;
  return roc;
}

}  // namespace stcov
