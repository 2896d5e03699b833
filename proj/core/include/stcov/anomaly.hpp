#pragma once

#include <optional>
#include <vector>

#include "stcov/linalg.hpp"
#include "stcov/types.hpp"

namespace stcov {

/// Scorer holding an inverse covariance and its first block row, so clips
/// longer than the model window can be scored under the block-Toeplitz (AR)
/// extension without materializing it. The mean is per frame
/// (time-stationary); a full-length mean is supported for T1 == T only.
struct ArScorer {
  Matrix j;                     // NT x NT, symmetric PD
  std::vector<Matrix> j_blocks; // J_i = J(1:N, (i-1)N+1:iN), i = 1..T
  Vector mu;                    // N (stationary) or NT (full, flagged)
  bool stationary_mean = true;
  Dims dims;
  int height = 0, width = 0;    // spatial geometry, height*width == n_len

  static ArScorer from_information(const Matrix& j, const Vector& mu, const Dims& dims,
                                   int height, int width);
  /// Inverts a finalized covariance with a relative ridge for stability.
  static ArScorer from_covariance(const Matrix& sigma, const Vector& mu, const Dims& dims,
                                  int height, int width, double relative_ridge = 1e-9);
};

/// AR-extended Mahalanobis score of a clip with t1 >= T frames; equals the
/// direct form (x-mu)^T J (x-mu) at t1 == T.
double ar_score(const ArScorer& scorer, const Vector& clip);

/// Two-sided thresholds plus the patch-variance test configuration.
struct DecisionPolicy {
  double low_threshold = std::numeric_limits<double>::infinity();   // flags large scores
  double high_threshold = -std::numeric_limits<double>::infinity(); // flags small scores
  int patch_rows = 1, patch_cols = 1;
  double patch_variance_threshold = std::numeric_limits<double>::infinity();
  bool degenerate_calibration = false;

  void validate() const {
    if (high_threshold > low_threshold)
      throw BadInputError("DecisionPolicy: thresholds leave no normal band");
  }
};

/// Empirical type-7 quantile thresholds: low = (1 - alpha_low) quantile,
/// high = alpha_high quantile of the calibration scores.
DecisionPolicy calibrate_thresholds(std::vector<double> scores_normal, double alpha_low,
                                    double alpha_high);

enum class Decision {
  kNormal,
  kAnomalousLowLikelihood,   // score above the low threshold
  kAnomalousHighLikelihood,  // score below the high threshold
  kAnomalousPatchVariance,
};

const char* to_string(Decision d);

struct AnomalyReport {
  double clip_score = 0.0;
  Decision decision = Decision::kNormal;
  Matrix patch_scores;                     // per patch, normalized by patch dimension
  std::vector<std::vector<bool>> patch_flags;
  bool uneven_patches = false;
};

/// Per-patch marginal scorers: spatial patches of the grid, covariance
/// submatrix extracted and inverted per patch.
struct PatchScorers {
  std::vector<ArScorer> scorers;  // row-major over the patch grid
  std::vector<std::vector<int>> patch_pixels;
  int rows = 0, cols = 0;
  bool uneven = false;
};

PatchScorers build_patch_scorers(const ArScorer& scorer, int patch_rows, int patch_cols);

/// Two-sided clip decision; clips inside the band go through the
/// patch-variance test (sample variance of per-patch normalized marginal
/// scores against the policy threshold).
AnomalyReport decide(const DecisionPolicy& policy, const ArScorer& scorer,
                     const PatchScorers& patches, const Vector& clip);

/// Per-patch thresholding. One policy applies to all patches when a single
/// policy is given, otherwise one per patch.
std::vector<std::vector<bool>> localize(const PatchScorers& patches,
                                        const std::vector<DecisionPolicy>& per_patch_policy,
                                        const Vector& clip);

struct RocResult {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), threshold high to low
  double auc = 0.0;
};

/// ROC over the two-sided detection statistic |score - center|, so both tails
/// count as positive. `center` defaults to the median of the normal scores.
/// The trapezoid AUC equals the Mann-Whitney pairwise statistic.
RocResult roc_auc(const std::vector<double>& scores_normal,
                  const std::vector<double>& scores_anomalous,
                  std::optional<double> center = std::nullopt);

}  // namespace stcov
