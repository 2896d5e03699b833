#include "stcov/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace stcov {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) out.push_back(tok);
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig cfg;
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw BadInputError("config: expected key=value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto geti = [&](const char* k, int& dst) {
    auto it = kv.find(k);
    if (it != kv.end()) dst = std::stoi(it->second);
  };
  auto getd = [&](const char* k, double& dst) {
    auto it = kv.find(k);
    if (it != kv.end()) dst = std::stod(it->second);
  };
  auto gets = [&](const char* k, std::string& dst) {
    auto it = kv.find(k);
    if (it != kv.end()) dst = it->second;
  };
  auto getb = [&](const char* k, bool& dst) {
    auto it = kv.find(k);
    if (it != kv.end()) dst = (it->second == "1" || it->second == "true" || it->second == "yes");
  };
  geti("block_rows", cfg.block_rows);
  geti("block_cols", cfg.block_cols);
  geti("tie_rows", cfg.tie_rows);
  geti("tie_cols", cfg.tie_cols);
  geti("clip_frames", cfg.clip_frames);
  geti("model_frames", cfg.model_frames);
  geti("window_stride", cfg.window_stride);
  geti("buffer_frames", cfg.buffer_frames);
  getb("leave_out", cfg.leave_out);
  gets("estimator", cfg.estimator);
  geti("rank", cfg.rank);
  getd("shrinkage", cfg.shrinkage);
  getd("soft_threshold", cfg.soft_threshold);
  getb("toeplitz_both", cfg.toeplitz_both);
  geti("toeplitz_banded", cfg.toeplitz_banded);
  geti("delta_n", cfg.delta_n);
  getd("lambda", cfg.lambda);
  geti("halo", cfg.halo);
  geti("max_block_vars", cfg.max_block_vars);
  gets("kron_scales", cfg.kron_scales);
  geti("kron_scale_rank", cfg.kron_scale_rank);
  geti("em_iters", cfg.em_iters);
  getd("em_tol", cfg.em_tol);
  getd("alpha_low", cfg.alpha_low);
  getd("alpha_high", cfg.alpha_high);
  geti("patch_rows", cfg.patch_rows);
  geti("patch_cols", cfg.patch_cols);
  getd("patch_variance_quantile", cfg.patch_variance_quantile);
  getd("scorer_ridge", cfg.scorer_ridge);
  getd("psd_floor", cfg.psd_floor);
  geti("crop_top", cfg.crop_top);
  geti("crop_left", cfg.crop_left);
  geti("crop_bottom", cfg.crop_bottom);
  geti("crop_right", cfg.crop_right);
  getd("label_overlap", cfg.label_overlap);
  if (auto it = kv.find("shifts"); it != kv.end() && !it->second.empty()) {
    for (const std::string& pair : split(it->second, ';')) {
      const auto parts = split(pair, ',');
      if (parts.size() != 2) throw BadInputError("config: shifts must be 'dy,dx;dy,dx'");
      cfg.shifts.emplace_back(std::stoi(parts[0]), std::stoi(parts[1]));
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw BadInputError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "block_rows=" << block_rows << "\nblock_cols=" << block_cols
     << "\ntie_rows=" << tie_rows << "\ntie_cols=" << tie_cols
     << "\nclip_frames=" << clip_frames << "\nmodel_frames=" << model_frames
     << "\nwindow_stride=" << window_stride << "\nbuffer_frames=" << buffer_frames
     << "\nleave_out=" << (leave_out ? 1 : 0) << "\nestimator=" << estimator
     << "\nrank=" << rank << "\nshrinkage=" << shrinkage
     << "\nsoft_threshold=" << soft_threshold << "\ntoeplitz_both=" << (toeplitz_both ? 1 : 0)
     << "\ntoeplitz_banded=" << toeplitz_banded << "\ndelta_n=" << delta_n
     << "\nlambda=" << lambda << "\nhalo=" << halo << "\nmax_block_vars=" << max_block_vars
     << "\nkron_scales=" << kron_scales << "\nkron_scale_rank=" << kron_scale_rank
     << "\nem_iters=" << em_iters << "\nem_tol=" << em_tol << "\nalpha_low=" << alpha_low
     << "\nalpha_high=" << alpha_high << "\npatch_rows=" << patch_rows
     << "\npatch_cols=" << patch_cols
     << "\npatch_variance_quantile=" << patch_variance_quantile
     << "\nscorer_ridge=" << scorer_ridge << "\npsd_floor=" << psd_floor << "\ncrop_top=" << crop_top
     << "\ncrop_left=" << crop_left << "\ncrop_bottom=" << crop_bottom
     << "\ncrop_right=" << crop_right << "\nlabel_overlap=" << label_overlap;
  os << "\nshifts=";
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    if (i) os << ";";
    os << shifts[i].first << "," << shifts[i].second;
  }
  os << "\n";
  return os.str();
}

std::vector<int> clip_positions(int frames_total, int clip_frames, int stride) {
  std::vector<int> out;
  for (int p = 0; p + clip_frames <= frames_total; p += stride) out.push_back(p);
  return out;
}

std::vector<int> training_starts(int frames_total, int win_frames, int stride, int position,
                                 int clip_frames, int buffer_frames, bool leave_out) {
  std::vector<int> out;
  const int ex_lo = position - buffer_frames;
  const int ex_hi = position + clip_frames - 1 + buffer_frames;
  for (int s = 0; s + win_frames <= frames_total; s += stride) {
    if (leave_out) {
      const int w_hi = s + win_frames - 1;
      if (s <= ex_hi && w_hi >= ex_lo) continue;
    }
    out.push_back(s);
  }
  return out;
}

int ModelBundle::n_groups() const {
  const int gr = (config.block_rows + config.tie_rows - 1) / config.tie_rows;
  const int gc = (config.block_cols + config.tie_cols - 1) / config.tie_cols;
  return gr * gc;
}

int ModelBundle::group_of_block(int block) const {
  const int br = block / config.block_cols;
  const int bc = block % config.block_cols;
  const int gc = (config.block_cols + config.tie_cols - 1) / config.tie_cols;
  return (br / config.tie_rows) * gc + (bc / config.tie_cols);
}

ArScorer BlockModel::make_scorer(const Vector& mean, int height, int width, int model_frames,
                                 double ridge, double psd_floor) const {
  const int n = height * width;
  const Dims dims(model_frames, n);
  const auto floored = [&](const Matrix& sigma) {
    if (psd_floor <= 0.0) return sigma;
    const double scale = sigma.trace() / static_cast<double>(sigma.rows());
    return project_psd(sigma, psd_floor * scale);
  };
  if (type == "sample" || type == "kron") {
    Matrix sigma;
    if (type == "sample") {
      sigma = kron.assemble();  // dense estimate parked in a single-term factor
    } else if (has_mapping) {
      NonrectFit fit;
      fit.padded = kron;
      fit.mapping = mapping;
      sigma = project_psd(fit.extract_covariance());
    } else {
      sigma = kron.assemble_finalized();
    }
    return ArScorer::from_covariance(floored(sigma), mean, dims, height, width, ridge);
  }
  if (type == "multires") {
    if (!multires) throw NumericError("BlockModel: missing multires model");
    if (has_mapping) {
      const Matrix cov_padded = multires->observed_covariance();
      const int pn = mapping.padded_n();
      Matrix cov(dims.side(), dims.side());
      for (int t1 = 0; t1 < model_frames; ++t1) {
        const int o1 = mapping.frame_offset(t1);
        for (int t2 = 0; t2 < model_frames; ++t2) {
          const int o2 = mapping.frame_offset(t2);
          cov.block(t1 * n, t2 * n, n, n) =
              cov_padded.block(t1 * pn + o1, t2 * pn + o2, n, n);
        }
      }
      return ArScorer::from_covariance(floored(project_psd(cov)), mean, dims, height, width, ridge);
    }
    return ArScorer::from_information(multires->observed_information(), mean, dims, height,
                                      width);
  }
  throw FormatError("BlockModel: unknown type '" + type + "'");
}

namespace {

struct BlockRect {
  int r0, c0, bh, bw;
};

std::vector<BlockRect> block_rects(const ExperimentConfig& cfg, int height, int width,
                                   bool* uneven) {
  std::vector<BlockRect> rects;
  if (uneven) *uneven = (height % cfg.block_rows != 0) || (width % cfg.block_cols != 0);
  for (int br = 0; br < cfg.block_rows; ++br) {
    const int r0 = (br * height) / cfg.block_rows;
    const int r1 = ((br + 1) * height) / cfg.block_rows;
    for (int bc = 0; bc < cfg.block_cols; ++bc) {
      const int c0 = (bc * width) / cfg.block_cols;
      const int c1 = ((bc + 1) * width) / cfg.block_cols;
      rects.push_back({r0, c0, r1 - r0, c1 - c0});
    }
  }
  return rects;
}

std::set<int> parse_kron_scales(const std::string& text, int n_scales) {
  std::set<int> out;
  if (text == "none" || text.empty()) return out;
  if (text == "bottom") {
    out.insert(n_scales);
    return out;
  }
  if (text == "all") {
    for (int m = 1; m <= n_scales; ++m) out.insert(m);
    return out;
  }
  for (const std::string& tok : split(text, ','))
    out.insert(std::stoi(tok));
  return out;
}

BlockModel fit_block_model(const ExperimentConfig& cfg, const SampleSet& ss, int bh, int bw) {
  BlockModel model;
  const Dims dims = ss.dims;
  if (cfg.estimator == "sample") {
    model.type = "sample";
    // parked as a degenerate single-factor KronCovariance: scalar 1 x dense sigma
    Matrix one = Matrix::Ones(1, 1);
    KronCovariance kc;
    kc.dims = Dims(1, dims.side());
    kc.separation_rank = 1;
    kc.factors.emplace_back(one, sample_covariance(ss, cfg.shrinkage));
    model.kron = std::move(kc);
    return model;
  }
  if (cfg.estimator == "kron") {
    model.type = "kron";
    KronPcaOptions opts;
    opts.singular_soft_threshold = cfg.soft_threshold;
    model.kron = kron_pca_ls(sample_covariance(ss, cfg.shrinkage), dims, cfg.rank, opts);
    return model;
  }
  if (cfg.estimator == "dc-kron") {
    model.type = "kron";
    model.kron = dc_kron_pca(ss, cfg.rank);
    return model;
  }
  if (cfg.estimator == "toeplitz-kron") {
    model.type = "kron";
    model.kron = toeplitz_kron_ls(
        sample_covariance(ss, cfg.shrinkage), dims, cfg.rank, cfg.toeplitz_both,
        cfg.toeplitz_banded > 0 ? std::optional<int>(cfg.toeplitz_banded) : std::nullopt);
    return model;
  }
  if (cfg.estimator == "nonrect") {
    model.type = "kron";
    GridMapping gm(cfg.delta_n, dims.n_len, dims.t_len);
    NonrectFit fit = nonrect_kron(ss, gm, cfg.rank);
    model.kron = fit.padded;
    model.mapping = gm;
    model.has_mapping = (cfg.delta_n != 0);
    return model;
  }
  if (cfg.estimator == "multires") {
    model.type = "multires";
    TreeTopology topo = build_quadtree(bh, bw, dims.t_len);
    MultiresFitOptions mo;
    mo.em_max_iter = cfg.em_iters;
    mo.em_tol = cfg.em_tol;
    mo.lambda = cfg.lambda;
    mo.inscale.max_block_vars = cfg.max_block_vars;
    mo.inscale.halo = cfg.halo;
    mo.targets.first_term_shrinkage = cfg.shrinkage;
    mo.targets.kron_scales = parse_kron_scales(cfg.kron_scales, topo.n_scales);
    mo.targets.kron_rank = cfg.kron_scale_rank;
    SampleSet work = ss;
    if (cfg.delta_n != 0) {
      GridMapping gm(cfg.delta_n, dims.n_len, dims.t_len);
      mo.targets.nonrect_mapping = gm;
      mo.targets.nonrect_rank = cfg.rank;
      model.mapping = gm;
      model.has_mapping = true;
      // the tree lives on the padded grid; embed the samples
      const int pn = gm.padded_n();
      topo = build_quadtree(1, pn, dims.t_len);
      Matrix xp = Matrix::Zero(static_cast<Eigen::Index>(pn) * dims.t_len, ss.x.cols());
      for (int f = 0; f < dims.t_len; ++f)
        xp.middleRows(f * pn + gm.frame_offset(f), dims.n_len) = ss.x.middleRows(f * dims.n_len, dims.n_len);
      work.x = std::move(xp);
      work.mu = Vector::Zero(static_cast<Eigen::Index>(pn) * dims.t_len);
      work.dims = Dims(dims.t_len, pn);
    }
    model.multires = std::make_shared<MultiresModel>(fit_multires(topo, work, mo));
    return model;
  }
  throw BadInputError("fit: unknown estimator '" + cfg.estimator + "'");
}

double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size() - 1);
}

DecisionPolicy thresholds_or_minmax(std::vector<double> scores, double alpha_low,
                                    double alpha_high) {
  DecisionPolicy policy;
  if (scores.size() >= 20) return calibrate_thresholds(std::move(scores), alpha_low, alpha_high);
  policy.degenerate_calibration = true;
  if (!scores.empty()) {
    policy.low_threshold = *std::max_element(scores.begin(), scores.end());
    policy.high_threshold = *std::min_element(scores.begin(), scores.end());
  }
  return policy;
}

double quantile_sorted(std::vector<double> v, double p) {
  if (v.empty()) return std::numeric_limits<double>::infinity();
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

ModelBundle fit(const ExperimentConfig& cfg, const FrameTensor& raw_tensor) {
  const FrameTensor tensor =
      (cfg.crop_top || cfg.crop_left || cfg.crop_bottom || cfg.crop_right)
          ? raw_tensor.cropped(cfg.crop_top, cfg.crop_left, cfg.crop_bottom, cfg.crop_right)
          : raw_tensor;
  if (cfg.clip_frames < cfg.model_frames)
    throw BadInputError("fit: clip_frames must be >= model_frames");
  if (cfg.estimator == "multires" && cfg.delta_n != 0 && cfg.clip_frames != cfg.model_frames)
    throw BadInputError("fit: multires with a grid shift requires clip_frames == model_frames");

  ModelBundle bundle;
  bundle.config = cfg;
  bundle.height = tensor.height;
  bundle.width = tensor.width;
  bundle.frames = tensor.frames;
  bundle.positions = clip_positions(tensor.frames, cfg.clip_frames, cfg.window_stride);
  if (bundle.positions.empty()) throw BadInputError("fit: video shorter than one clip");

  bool uneven = false;
  const auto rects = block_rects(cfg, tensor.height, tensor.width, &uneven);
  const int n_blocks = static_cast<int>(rects.size());
  if ((cfg.tie_rows > 1 || cfg.tie_cols > 1) && uneven)
    throw BadInputError("fit: tie groups require evenly dividing blocks");

  const int n_slots = cfg.leave_out ? static_cast<int>(bundle.positions.size()) : 1;
  bundle.models.resize(static_cast<std::size_t>(n_slots));
  bundle.means.resize(static_cast<std::size_t>(n_slots));
  bundle.block_calibration.assign(static_cast<std::size_t>(n_blocks), {});

  std::vector<double> agg_calibration;
  std::vector<double> blockvar_calibration;
  std::vector<std::vector<double>> patchvar_calibration(static_cast<std::size_t>(n_blocks));

  for (int slot = 0; slot < n_slots; ++slot) {
    const int pos = cfg.leave_out ? bundle.positions[static_cast<std::size_t>(slot)] : 0;
    const std::vector<int> train_model = training_starts(
        tensor.frames, cfg.model_frames, cfg.window_stride, pos, cfg.clip_frames,
        cfg.buffer_frames, cfg.leave_out);
    if (train_model.empty())
      throw BadInputError("fit: no training windows for position " + std::to_string(pos));

    // per-block stationary means over the frames covered by training windows
    std::vector<char> frame_used(static_cast<std::size_t>(tensor.frames), 0);
    for (int s : train_model)
      for (int f = s; f < s + cfg.model_frames; ++f) frame_used[static_cast<std::size_t>(f)] = 1;
    bundle.means[static_cast<std::size_t>(slot)].resize(static_cast<std::size_t>(n_blocks));
    for (int b = 0; b < n_blocks; ++b) {
      const auto& r = rects[static_cast<std::size_t>(b)];
      Vector mean = Vector::Zero(static_cast<Eigen::Index>(r.bh) * r.bw);
      int count = 0;
      for (int f = 0; f < tensor.frames; ++f) {
        if (!frame_used[static_cast<std::size_t>(f)]) continue;
        ++count;
        Eigen::Index k = 0;
        for (int rr = 0; rr < r.bh; ++rr)
          for (int cc = 0; cc < r.bw; ++cc) mean[k++] += tensor.at(f, r.r0 + rr, r.c0 + cc);
      }
      mean /= static_cast<double>(count);
      bundle.means[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b)] = mean;
    }

    // fit one model per tie-group on pooled block deviations
    const int n_groups = bundle.n_groups();
    bundle.models[static_cast<std::size_t>(slot)].resize(static_cast<std::size_t>(n_groups));
    for (int g = 0; g < n_groups; ++g) {
      std::vector<int> members;
      for (int b = 0; b < n_blocks; ++b)
        if (bundle.group_of_block(b) == g) members.push_back(b);
      const auto& r0 = rects[static_cast<std::size_t>(members.front())];
      const Dims dims(cfg.model_frames, r0.bh * r0.bw);
      Matrix x(dims.side(),
               static_cast<Eigen::Index>(members.size()) * train_model.size());
      Eigen::Index col = 0;
      for (int b : members) {
        const auto& r = rects[static_cast<std::size_t>(b)];
        if (r.bh != r0.bh || r.bw != r0.bw)
          throw BadInputError("fit: tied blocks must share a shape");
        const Vector& mean = bundle.means[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b)];
        for (int s : train_model) {
          Vector clip = tensor.block_clip(s, cfg.model_frames, r.r0, r.c0, r.bh, r.bw);
          for (int f = 0; f < cfg.model_frames; ++f)
            clip.segment(static_cast<Eigen::Index>(f) * dims.n_len, dims.n_len) -= mean;
          x.col(col++) = clip;
        }
      }
      SampleSet ss;
      ss.x = std::move(x);
      ss.mu = Vector::Zero(dims.side());
      ss.dims = dims;
      if (!cfg.shifts.empty())
        ss = augment_shifted_samples(ss, cfg.shifts, {r0.bh, r0.bw, cfg.model_frames});
      bundle.models[static_cast<std::size_t>(slot)][static_cast<std::size_t>(g)] =
          fit_block_model(cfg, ss, r0.bh, r0.bw);
    }

    // calibration on training clip windows
    std::vector<ArScorer> scorers;
    std::vector<PatchScorers> patches;
    scorers.reserve(static_cast<std::size_t>(n_blocks));
    for (int b = 0; b < n_blocks; ++b) {
      const auto& r = rects[static_cast<std::size_t>(b)];
      const BlockModel& model =
          bundle.models[static_cast<std::size_t>(slot)][static_cast<std::size_t>(bundle.group_of_block(b))];
      scorers.push_back(model.make_scorer(
          bundle.means[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b)], r.bh, r.bw,
          cfg.model_frames, cfg.scorer_ridge, cfg.psd_floor));
      patches.push_back(build_patch_scorers(scorers.back(), cfg.patch_rows, cfg.patch_cols));
    }
    const std::vector<int> train_clip = training_starts(
        tensor.frames, cfg.clip_frames, cfg.window_stride, pos, cfg.clip_frames,
        cfg.buffer_frames, cfg.leave_out);
    for (int s : train_clip) {
      double agg = 0.0;
      std::vector<double> normalized_block_scores;
      for (int b = 0; b < n_blocks; ++b) {
        const auto& r = rects[static_cast<std::size_t>(b)];
        Vector clip = tensor.block_clip(s, cfg.clip_frames, r.r0, r.c0, r.bh, r.bw);
        const double sc = ar_score(scorers[static_cast<std::size_t>(b)], clip);
        bundle.block_calibration[static_cast<std::size_t>(b)].push_back(sc);
        agg += sc;
        normalized_block_scores.push_back(sc / static_cast<double>(clip.size()));
        if (cfg.patch_rows * cfg.patch_cols > 1) {
          // patch-variance statistic per block for its policy threshold
          const auto& pp = patches[static_cast<std::size_t>(b)];
          std::vector<double> pscores;
          for (std::size_t pi = 0; pi < pp.scorers.size(); ++pi) {
            std::vector<int> px = pp.patch_pixels[pi];
            Vector pclip(static_cast<Eigen::Index>(px.size()) * cfg.clip_frames);
            Eigen::Index k = 0;
            for (int f = 0; f < cfg.clip_frames; ++f)
              for (int p : px) pclip[k++] = clip[static_cast<Eigen::Index>(f) * r.bh * r.bw + p];
            pscores.push_back(ar_score(pp.scorers[pi], pclip) /
                              static_cast<double>(pclip.size()));
          }
          patchvar_calibration[static_cast<std::size_t>(b)].push_back(variance_of(pscores));
        }
      }
      agg_calibration.push_back(agg);
      if (n_blocks > 1) blockvar_calibration.push_back(variance_of(normalized_block_scores));
    }
  }

  bundle.calibration_scores = agg_calibration;
  bundle.policy = thresholds_or_minmax(agg_calibration, cfg.alpha_low, cfg.alpha_high);
  bundle.policy.patch_rows = cfg.block_rows;
  bundle.policy.patch_cols = cfg.block_cols;
  bundle.policy.patch_variance_threshold =
      quantile_sorted(blockvar_calibration, cfg.patch_variance_quantile);
  for (int b = 0; b < n_blocks; ++b) {
    DecisionPolicy bp = thresholds_or_minmax(bundle.block_calibration[static_cast<std::size_t>(b)],
                                             cfg.alpha_low, cfg.alpha_high);
    bp.patch_rows = cfg.patch_rows;
    bp.patch_cols = cfg.patch_cols;
    bp.patch_variance_threshold =
        quantile_sorted(patchvar_calibration[static_cast<std::size_t>(b)],
                        cfg.patch_variance_quantile);
    bundle.block_policies.push_back(bp);
  }
  return bundle;
}

std::vector<ReportRow> score(const ModelBundle& bundle, const FrameTensor& raw_tensor) {
  const ExperimentConfig& cfg = bundle.config;
  const FrameTensor tensor =
      (cfg.crop_top || cfg.crop_left || cfg.crop_bottom || cfg.crop_right)
          ? raw_tensor.cropped(cfg.crop_top, cfg.crop_left, cfg.crop_bottom, cfg.crop_right)
          : raw_tensor;
  if (tensor.height != bundle.height || tensor.width != bundle.width)
    throw BadInputError("score: tensor geometry does not match the bundle");
  const std::vector<int> positions =
      clip_positions(tensor.frames, cfg.clip_frames, cfg.window_stride);
  if (cfg.leave_out && positions.size() != bundle.positions.size())
    throw BadInputError("score: per-position models require a matching video length");

  bool uneven = false;
  const auto rects = block_rects(cfg, tensor.height, tensor.width, &uneven);
  const int n_blocks = static_cast<int>(rects.size());

  std::vector<ReportRow> rows;
  std::vector<ArScorer> scorers(static_cast<std::size_t>(n_blocks));
  std::vector<PatchScorers> patches(static_cast<std::size_t>(n_blocks));
  int built_slot = -1;

  for (std::size_t pi = 0; pi < positions.size(); ++pi) {
    const int pos = positions[pi];
    const int slot = bundle.pos_slot(static_cast<int>(pi));
    if (slot != built_slot) {
      for (int b = 0; b < n_blocks; ++b) {
        const auto& r = rects[static_cast<std::size_t>(b)];
        const BlockModel& model =
            bundle.models[static_cast<std::size_t>(slot)][static_cast<std::size_t>(bundle.group_of_block(b))];
        scorers[static_cast<std::size_t>(b)] = model.make_scorer(
            bundle.means[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b)], r.bh,
            r.bw, cfg.model_frames, cfg.scorer_ridge, cfg.psd_floor);
        patches[static_cast<std::size_t>(b)] =
            build_patch_scorers(scorers[static_cast<std::size_t>(b)], cfg.patch_rows, cfg.patch_cols);
      }
      built_slot = slot;
    }

    double agg = 0.0;
    std::vector<double> normalized_block_scores;
    std::vector<ReportRow> block_rows;
    for (int b = 0; b < n_blocks; ++b) {
      const auto& r = rects[static_cast<std::size_t>(b)];
      const Vector clip = tensor.block_clip(pos, cfg.clip_frames, r.r0, r.c0, r.bh, r.bw);
      const AnomalyReport rep = decide(bundle.block_policies[static_cast<std::size_t>(b)],
                                       scorers[static_cast<std::size_t>(b)],
                                       patches[static_cast<std::size_t>(b)], clip);
      block_rows.push_back({pos, b, rep.clip_score, rep.decision});
      agg += rep.clip_score;
      normalized_block_scores.push_back(rep.clip_score / static_cast<double>(clip.size()));
    }

    Decision agg_decision = Decision::kNormal;
    if (agg > bundle.policy.low_threshold) {
      agg_decision = Decision::kAnomalousLowLikelihood;
    } else if (agg < bundle.policy.high_threshold) {
      agg_decision = Decision::kAnomalousHighLikelihood;
    } else if (n_blocks > 1 &&
               variance_of(normalized_block_scores) > bundle.policy.patch_variance_threshold) {
      agg_decision = Decision::kAnomalousPatchVariance;
    }
    rows.push_back({pos, -1, agg, agg_decision});
    for (auto& br : block_rows) rows.push_back(br);
  }
  return rows;
}

void write_reports(const std::vector<ReportRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("reports: cannot write '" + path + "'");
  os << "clip_index,block,score,decision\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.clip_index << "," << r.block << "," << r.score << "," << to_string(r.decision)
       << "\n";
}

std::vector<ReportRow> read_reports(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("reports: cannot open '" + path + "'");
  std::vector<ReportRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("clip_index", 0) == 0) continue;
    }
    const auto parts = split(line, ',');
    if (parts.size() != 4) throw FormatError("reports: malformed row '" + line + "'");
    ReportRow r;
    r.clip_index = std::stoi(parts[0]);
    r.block = std::stoi(parts[1]);
    r.score = std::stod(parts[2]);
    if (parts[3] == "normal") r.decision = Decision::kNormal;
    else if (parts[3] == "anomalous-low-likelihood") r.decision = Decision::kAnomalousLowLikelihood;
    else if (parts[3] == "anomalous-high-likelihood") r.decision = Decision::kAnomalousHighLikelihood;
    else if (parts[3] == "anomalous-patch-variance") r.decision = Decision::kAnomalousPatchVariance;
    else throw FormatError("reports: unknown decision '" + parts[3] + "'");
    rows.push_back(r);
  }
  return rows;
}

EvalResult evaluate(const std::vector<ReportRow>& rows, const std::vector<int>& labels,
                    int clip_frames, double label_overlap) {
  std::vector<double> normal, anomalous;
  for (const auto& r : rows) {
    if (r.block != -1) continue;
    if (r.clip_index + clip_frames > static_cast<int>(labels.size()))
      throw BadInputError("evaluate: clip extends past the label track");
    int hits = 0;
    for (int f = r.clip_index; f < r.clip_index + clip_frames; ++f)
      hits += labels[static_cast<std::size_t>(f)];
    const bool anom = hits >= label_overlap * clip_frames;
    (anom ? anomalous : normal).push_back(r.score);
  }
  if (normal.empty() || anomalous.empty())
    throw BadInputError("evaluate: need both normal and anomalous clips");
  EvalResult out;
  out.n_normal = static_cast<int>(normal.size());
  out.n_anomalous = static_cast<int>(anomalous.size());
  out.roc = roc_auc(normal, anomalous);
  return out;
}

void write_roc(const RocResult& roc, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("roc: cannot write '" + path + "'");
  os << "fpr,tpr\n";
  os.precision(17);
  for (const auto& [fpr, tpr] : roc.points) os << fpr << "," << tpr << "\n";
}

std::vector<std::vector<bool>> localize_clip(const ModelBundle& bundle,
                                             const FrameTensor& raw_tensor, int clip_index) {
  const ExperimentConfig& cfg = bundle.config;
  const FrameTensor tensor =
      (cfg.crop_top || cfg.crop_left || cfg.crop_bottom || cfg.crop_right)
          ? raw_tensor.cropped(cfg.crop_top, cfg.crop_left, cfg.crop_bottom, cfg.crop_right)
          : raw_tensor;
  const std::vector<int> positions =
      clip_positions(tensor.frames, cfg.clip_frames, cfg.window_stride);
  const auto it = std::find(positions.begin(), positions.end(), clip_index);
  if (it == positions.end()) throw BadInputError("localize: clip_index is not a window start");
  const int slot = bundle.pos_slot(static_cast<int>(it - positions.begin()));

  bool uneven = false;
  const auto rects = block_rects(cfg, tensor.height, tensor.width, &uneven);
  std::vector<std::vector<bool>> flags(static_cast<std::size_t>(cfg.block_rows),
                                       std::vector<bool>(static_cast<std::size_t>(cfg.block_cols)));
  for (int b = 0; b < static_cast<int>(rects.size()); ++b) {
    const auto& r = rects[static_cast<std::size_t>(b)];
    const BlockModel& model =
        bundle.models[static_cast<std::size_t>(slot)][static_cast<std::size_t>(bundle.group_of_block(b))];
    const ArScorer scorer = model.make_scorer(
        bundle.means[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b)], r.bh, r.bw,
        cfg.model_frames, cfg.scorer_ridge, cfg.psd_floor);
    const Vector clip = tensor.block_clip(clip_index, cfg.clip_frames, r.r0, r.c0, r.bh, r.bw);
    const double s = ar_score(scorer, clip);
    const DecisionPolicy& pol = bundle.block_policies[static_cast<std::size_t>(b)];
    flags[static_cast<std::size_t>(b / cfg.block_cols)][static_cast<std::size_t>(b % cfg.block_cols)] =
        (s > pol.low_threshold) || (s < pol.high_threshold);
  }
  return flags;
}

}  // namespace stcov
