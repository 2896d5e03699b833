#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stcov/anomaly.hpp"
#include "stcov/estimators.hpp"
#include "stcov/multires.hpp"
#include "stcov/tensor.hpp"

namespace stcov {

/// Flat key=value experiment configuration (one pair per line, '#' comments).
struct ExperimentConfig {
  int block_rows = 1, block_cols = 1;
  int tie_rows = 1, tie_cols = 1;  // blocks per tie-group, in block units
  int clip_frames = 8;             // scored window length T1
  int model_frames = 4;            // covariance window length T
  int window_stride = 1;
  int buffer_frames = 0;
  bool leave_out = true;  // refit per test position, excluding clip +- buffer

  std::string estimator = "kron";  // sample|kron|dc-kron|toeplitz-kron|nonrect|multires
  int rank = 1;
  double shrinkage = 0.0;
  double soft_threshold = 0.0;
  bool toeplitz_both = false;
  int toeplitz_banded = 0;  // 0 = weighted mode
  int delta_n = 0;          // nonrect / multires grid shift
  double lambda = 0.0;      // multires sparsification
  int halo = 0;
  int max_block_vars = 0;
  std::string kron_scales = "none";  // none|bottom|all
  int kron_scale_rank = 1;
  int em_iters = 40;
  double em_tol = 1e-7;
  std::vector<std::pair<int, int>> shifts;  // augmentation offsets (dy, dx)

  double alpha_low = 0.025, alpha_high = 0.025;
  int patch_rows = 1, patch_cols = 1;
  double patch_variance_quantile = 0.995;
  double scorer_ridge = 1e-9;
  /// Relative eigenvalue floor applied to the assembled covariance before
  /// inversion; guards scores against near-null fitted directions.
  double psd_floor = 0.0;

  int crop_top = 0, crop_left = 0, crop_bottom = 0, crop_right = 0;
  double label_overlap = 0.5;

  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_text() const;
};

/// Test window start frames for a video of `frames_total`.
std::vector<int> clip_positions(int frames_total, int clip_frames, int stride);
/// Training window starts of length win_frames excluding overlap with the
/// test clip at `position`, widened by the buffer.
std::vector<int> training_starts(int frames_total, int win_frames, int stride, int position,
                                 int clip_frames, int buffer_frames, bool leave_out);

struct BlockModel {
  std::string type;  // "kron" or "multires"
  KronCovariance kron;
  std::shared_ptr<MultiresModel> multires;
  GridMapping mapping;
  bool has_mapping = false;

  /// Scorer over the block's N*T variables. `psd_floor` clips eigenvalues of
  /// the assembled covariance at a fraction of the mean diagonal.
  ArScorer make_scorer(const Vector& mean, int height, int width, int model_frames,
                       double ridge, double psd_floor = 0.0) const;
};

struct ModelBundle {
  static constexpr std::uint32_t kVersion = 1;
  ExperimentConfig config;
  int height = 0, width = 0, frames = 0;  // after cropping
  std::vector<int> positions;
  // models[pos_slot][group]; pos_slot is 0 when leave_out is off
  std::vector<std::vector<BlockModel>> models;
  // means[pos_slot][block]: per-frame (stationary) block mean
  std::vector<std::vector<Vector>> means;
  std::vector<double> calibration_scores;               // aggregate clip scores
  std::vector<std::vector<double>> block_calibration;   // per block
  DecisionPolicy policy;                                // aggregate-level
  std::vector<DecisionPolicy> block_policies;

  int n_blocks() const { return config.block_rows * config.block_cols; }
  int n_groups() const;
  int group_of_block(int block) const;
  int pos_slot(int pos_index) const { return config.leave_out ? pos_index : 0; }
};

ModelBundle fit(const ExperimentConfig& config, const FrameTensor& tensor);

struct ReportRow {
  int clip_index = 0;  // start frame of the scored window
  int block = -1;      // -1 = aggregate row
  double score = 0.0;
  Decision decision = Decision::kNormal;
};

std::vector<ReportRow> score(const ModelBundle& bundle, const FrameTensor& tensor);

void write_reports(const std::vector<ReportRow>& rows, const std::string& path);
std::vector<ReportRow> read_reports(const std::string& path);

struct EvalResult {
  RocResult roc;
  int n_normal = 0, n_anomalous = 0;
};

/// Join aggregate report rows with per-frame labels; a clip counts as
/// anomalous when at least `label_overlap` of its frames are labeled.
EvalResult evaluate(const std::vector<ReportRow>& rows, const std::vector<int>& labels,
                    int clip_frames, double label_overlap = 0.5);

void write_roc(const RocResult& roc, const std::string& path);

/// Per-patch localization flags for one scored window.
std::vector<std::vector<bool>> localize_clip(const ModelBundle& bundle,
                                             const FrameTensor& tensor, int clip_index);

void write_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle read_bundle(const std::string& path);

}  // namespace stcov
