#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "stcov/pipeline.hpp"
#include "stcov/synth.hpp"

using namespace stcov;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("stcov_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("STEN tensor format") {
  TempDir tmp;

  SUBCASE("bit-exact round trip") {
    Rng rng(161);
    FrameTensor t(4, 4, 6);
    for (auto& v : t.data) v = rng.normal();
    write_tensor(t, tmp.file("a.sten"));
    const FrameTensor back = read_tensor(tmp.file("a.sten"));
    CHECK(back.height == 4);
    CHECK(back.width == 4);
    CHECK(back.frames == 6);
    REQUIRE(back.data.size() == t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
  }

  SUBCASE("bad magic") {
    std::ofstream os(tmp.file("bad.sten"), std::ios::binary);
    os << "NOPE then some bytes";
    os.close();
    CHECK_THROWS_AS(read_tensor(tmp.file("bad.sten")), FormatError);
  }

  SUBCASE("truncated payload") {
    FrameTensor t(2, 2, 2);
    write_tensor(t, tmp.file("t.sten"));
    const std::string full = read_file(tmp.file("t.sten"));
    std::ofstream os(tmp.file("trunc.sten"), std::ios::binary);
    os.write(full.data(), static_cast<std::streamsize>(full.size() - 9));
    os.close();
    try {
      read_tensor(tmp.file("trunc.sten"));
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("truncated payload") != std::string::npos);
    }
  }

  SUBCASE("dim overflow") {
    std::ofstream os(tmp.file("huge.sten"), std::ios::binary);
    os << "STEN";
    os.put(0x01);
    os.put(3);
    for (int d = 0; d < 3; ++d) {
      const std::uint64_t v = 1ull << 33;
      for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    os.close();
    try {
      read_tensor(tmp.file("huge.sten"));
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("dim overflow") != std::string::npos);
    }
  }
}

TEST_CASE("PGM import") {
  TempDir tmp;
  {
    std::ofstream os(tmp.file("f0.pgm"), std::ios::binary);
    os << "P5\n2 2\n255\n";
    const unsigned char px[4] = {255, 0, 128, 64};
    os.write(reinterpret_cast<const char*>(px), 4);
  }
  {
    std::ofstream os(tmp.file("f1.pgm"));
    os << "P2\n2 2\n255\n255 255 0 0\n";
  }
  const FrameTensor t = import_pgm_dir(tmp.path.string());
  CHECK(t.frames == 2);
  CHECK(t.at(0, 0, 0) == 1.0);
  CHECK(t.at(0, 0, 1) == 0.0);
  CHECK(t.at(0, 1, 0) == doctest::Approx(128.0 / 255.0));
  CHECK(t.at(1, 0, 0) == 1.0);
  CHECK(t.at(1, 1, 1) == 0.0);
}

TEST_CASE("synthetic generators") {
  SUBCASE("traveling wave: static field is separable, moving wave is not") {
    const auto still = synth_traveling_wave(2, 4, 3, FieldSpec::parse("constant:1.0"),
                                            FieldSpec::parse("linear:0.8,0.2"), 0.0, 0.0, 2, 7);
    Eigen::JacobiSVD<Matrix> svd0(rearrange(still.population_sigma, still.dims).data);
    CHECK(svd0.singularValues()[1] < 1e-10 * svd0.singularValues()[0]);

    const auto moving = synth_traveling_wave(2, 4, 3, FieldSpec::parse("constant:1.0"),
                                             FieldSpec::parse("linear:0.8,0.2"), 0.5, 0.0, 2, 7);
    Eigen::JacobiSVD<Matrix> svd1(rearrange(moving.population_sigma, moving.dims).data);
    CHECK(svd1.singularValues()[1] > 1e-6 * svd1.singularValues()[0]);
    CHECK(svd1.singularValues()[2] < 1e-10 * svd1.singularValues()[0]);
  }

  SUBCASE("traveling wave determinism") {
    const auto a = synth_traveling_wave(2, 3, 4, FieldSpec::parse("bump:1,0.5,0.5,0.3"),
                                        FieldSpec::parse("radial:0.9"), 0.4, 0.1, 5, 42);
    const auto b = synth_traveling_wave(2, 3, 4, FieldSpec::parse("bump:1,0.5,0.5,0.3"),
                                        FieldSpec::parse("radial:0.9"), 0.4, 0.1, 5, 42);
    CHECK((a.samples.x - b.samples.x).norm() == 0.0);
  }

  SUBCASE("flow: zero shift is plainly separable") {
    FlowSpec spec;
    const auto flow = synth_flow(1, 5, 3, 0, spec, 2, 11);
    Eigen::JacobiSVD<Matrix> svd(rearrange(flow.population_sigma, Dims(3, 5)).data);
    CHECK(svd.singularValues()[1] < 1e-10 * svd.singularValues()[0]);
  }

  SUBCASE("flow: seeds control the stream") {
    FlowSpec spec;
    const auto a = synth_flow(1, 5, 3, 1, spec, 4, 11);
    const auto b = synth_flow(1, 5, 3, 1, spec, 4, 11);
    const auto c = synth_flow(1, 5, 3, 1, spec, 4, 12);
    CHECK((a.samples.x - b.samples.x).norm() == 0.0);
    CHECK((a.samples.x - c.samples.x).norm() > 0.0);
  }

  SUBCASE("flow: shift bound enforced") {
    FlowSpec spec;
    CHECK_THROWS_AS(synth_flow(1, 4, 5, 1, spec, 2, 3), BadInputError);
  }

  SUBCASE("escape: labels follow the switch and regimes differ") {
    const EscapeResult esc = synth_escape(2, 2, 40, 25, 13);
    for (int f = 0; f < 40; ++f) CHECK(esc.labels[static_cast<std::size_t>(f)] == (f >= 25 ? 1 : 0));
    const EscapeSpec spec;
    const Matrix pre = escape_population(2, 2, 6, spec.rho_pre, spec);
    const Matrix post = escape_population(2, 2, 6, spec.rho_post, spec);
    CHECK((pre - post).norm() > 0.5 * pre.norm());
    // same per-frame marginal in both regimes
    const int n = 4;
    CHECK((pre.block(0, 0, n, n) - post.block(0, 0, n, n)).norm() < 1e-12);

    const EscapeResult again = synth_escape(2, 2, 40, 25, 13);
    CHECK(esc.tensor.data == again.tensor.data);
  }
}

TEST_CASE("window arithmetic") {
  SUBCASE("window count formula") {
    for (int frames : {20, 33, 64}) {
      for (int clip : {4, 8}) {
        for (int stride : {1, 2, 5}) {
          const auto pos = clip_positions(frames, clip, stride);
          CHECK(static_cast<int>(pos.size()) == (frames - clip) / stride + 1);
        }
      }
    }
  }

  SUBCASE("leave-out discipline") {
    const int frames = 60, win = 4, clip = 8, buffer = 3, position = 24;
    const auto starts = training_starts(frames, win, 1, position, clip, buffer, true);
    CHECK(!starts.empty());
    for (int s : starts) {
      const bool overlaps = (s <= position + clip - 1 + buffer) && (s + win - 1 >= position - buffer);
      CHECK_FALSE(overlaps);
    }
  }

  SUBCASE("buffer can shrink training to one window") {
    const auto starts = training_starts(30, 4, 1, 0, 4, 22, true);
    CHECK(starts.size() == 1);
    CHECK(starts[0] == 26);
  }
}

TEST_CASE("config round trip") {
  ExperimentConfig cfg;
  cfg.estimator = "dc-kron";
  cfg.rank = 3;
  cfg.block_rows = 2;
  cfg.block_cols = 4;
  cfg.shifts = {{0, 1}, {1, 0}};
  cfg.alpha_low = 0.01;
  cfg.lambda = 0.05;
  const ExperimentConfig back = ExperimentConfig::from_text(cfg.to_text());
  CHECK(back.estimator == "dc-kron");
  CHECK(back.rank == 3);
  CHECK(back.block_rows == 2);
  CHECK(back.block_cols == 4);
  CHECK(back.shifts == cfg.shifts);
  CHECK(back.alpha_low == cfg.alpha_low);
  CHECK(back.lambda == cfg.lambda);
  CHECK_THROWS_AS(ExperimentConfig::from_text("what is this"), BadInputError);
}

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.block_rows = 2;
  cfg.block_cols = 2;
  cfg.clip_frames = 6;
  cfg.model_frames = 3;
  cfg.window_stride = 2;
  cfg.buffer_frames = 2;
  cfg.leave_out = false;
  cfg.estimator = "kron";
  cfg.rank = 2;
  cfg.shrinkage = 0.05;
  return cfg;
}

}  // namespace

TEST_CASE("fit and score") {
  const EscapeResult esc = synth_escape(4, 4, 60, 40, 17);

  SUBCASE("tie groups reduce the model count") {
    ExperimentConfig cfg;
    cfg.block_rows = 8;
    cfg.block_cols = 8;
    cfg.tie_rows = 2;
    cfg.tie_cols = 2;
    cfg.clip_frames = 4;
    cfg.model_frames = 2;
    cfg.leave_out = false;
    cfg.estimator = "sample";
    cfg.shrinkage = 0.2;
    const EscapeResult big = synth_escape(8, 8, 30, 20, 19);
    const ModelBundle bundle = fit(cfg, big.tensor);
    CHECK(bundle.n_blocks() == 64);
    CHECK(bundle.n_groups() == 16);
    CHECK(bundle.models[0].size() == 16);
  }

  SUBCASE("single training window degenerates to a rank-1 outer product") {
    ExperimentConfig cfg;
    cfg.block_rows = 1;
    cfg.block_cols = 1;
    cfg.clip_frames = 10;
    cfg.model_frames = 4;
    cfg.window_stride = 21;  // a single test position at frame 0
    cfg.buffer_frames = 2;
    cfg.leave_out = true;
    cfg.estimator = "sample";
    cfg.shrinkage = 0.0;
    const EscapeResult tiny = synth_escape(2, 2, 30, 20, 23);
    const auto starts = training_starts(30, 4, 21, 0, 10, 2, true);
    REQUIRE(starts == std::vector<int>{21});
    const ModelBundle bundle = fit(cfg, tiny.tensor);
    const Vector mean = bundle.means[0][0];
    Vector clip = tiny.tensor.block_clip(21, 4, 0, 0, 2, 2);
    for (int f = 0; f < 4; ++f) clip.segment(4 * f, 4) -= mean;
    const Matrix& stored = bundle.models[0][0].kron.factors[0].second;
    CHECK((stored - clip * clip.transpose()).norm() < 1e-12);
  }

  SUBCASE("deterministic end-to-end and calibration reproduced when scoring the training video") {
    const ExperimentConfig cfg = small_config();
    const ModelBundle bundle = fit(cfg, esc.tensor);
    const auto rows1 = score(bundle, esc.tensor);
    const auto rows2 = score(bundle, esc.tensor);
    REQUIRE(rows1.size() == rows2.size());
    for (std::size_t i = 0; i < rows1.size(); ++i) {
      CHECK(rows1[i].score == rows2[i].score);
      CHECK(rows1[i].decision == rows2[i].decision);
    }
    // without leave-out the calibration windows coincide with the scored ones
    std::vector<double> agg;
    for (const auto& r : rows1)
      if (r.block == -1) agg.push_back(r.score);
    REQUIRE(agg.size() == bundle.calibration_scores.size());
    for (std::size_t i = 0; i < agg.size(); ++i)
      CHECK(agg[i] == bundle.calibration_scores[i]);
  }

  SUBCASE("bundle round trip is score-identical") {
    TempDir tmp;
    const ExperimentConfig cfg = small_config();
    const ModelBundle bundle = fit(cfg, esc.tensor);
    write_bundle(bundle, tmp.file("m.stbm"));
    const ModelBundle back = read_bundle(tmp.file("m.stbm"));
    const auto rows1 = score(bundle, esc.tensor);
    const auto rows2 = score(back, esc.tensor);
    REQUIRE(rows1.size() == rows2.size());
    for (std::size_t i = 0; i < rows1.size(); ++i) {
      CHECK(rows1[i].score == rows2[i].score);
      CHECK(rows1[i].decision == rows2[i].decision);
    }
  }

  SUBCASE("reports round trip through CSV") {
    TempDir tmp;
    const ExperimentConfig cfg = small_config();
    const ModelBundle bundle = fit(cfg, esc.tensor);
    const auto rows = score(bundle, esc.tensor);
    write_reports(rows, tmp.file("r.csv"));
    const auto back = read_reports(tmp.file("r.csv"));
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(back[i].clip_index == rows[i].clip_index);
      CHECK(back[i].block == rows[i].block);
      CHECK(back[i].score == rows[i].score);
      CHECK(back[i].decision == rows[i].decision);
    }
  }

  SUBCASE("evaluate joins labels and yields a sane AUC") {
    ExperimentConfig cfg = small_config();
    cfg.estimator = "kron";
    cfg.rank = 2;
    cfg.leave_out = true;
    cfg.buffer_frames = 4;
    const ModelBundle bundle = fit(cfg, esc.tensor);
    const auto rows = score(bundle, esc.tensor);
    const EvalResult ev = evaluate(rows, esc.labels, cfg.clip_frames);
    CHECK(ev.n_normal > 0);
    CHECK(ev.n_anomalous > 0);
    CHECK(ev.roc.auc > 0.6);  // dynamics change is detectable
    TempDir tmp;
    write_roc(ev.roc, tmp.file("roc.csv"));
    CHECK(read_file(tmp.file("roc.csv")).substr(0, 7) == "fpr,tpr");
  }

  SUBCASE("localize flags concentrate after the switch") {
    ExperimentConfig cfg = small_config();
    cfg.leave_out = false;
    const ModelBundle bundle = fit(cfg, esc.tensor);
    const auto flags = localize_clip(bundle, esc.tensor, bundle.positions.back());
    CHECK(flags.size() == 2);
    CHECK(flags[0].size() == 2);
  }

  SUBCASE("geometry mismatch raises") {
    const ExperimentConfig cfg = small_config();
    const ModelBundle bundle = fit(cfg, esc.tensor);
    const EscapeResult other = synth_escape(6, 6, 60, 40, 29);
    CHECK_THROWS_AS(score(bundle, other.tensor), BadInputError);
  }
}

TEST_CASE("labels file round trip") {
  TempDir tmp;
  const std::vector<int> labels{0, 0, 1, 1, 0};
  write_labels(labels, tmp.file("l.csv"));
  CHECK(read_labels(tmp.file("l.csv")) == labels);
}

TEST_CASE("multires and nonrect estimators through the pipeline") {
  FlowSpec spec;
  spec.rho = 0.9;
  spec.len_scale = 1.4;
  spec.noise_sd = 0.15;
  const FrameTensor video = synth_flow_video(1, 12, 72, 1, spec, 41);

  SUBCASE("multires with a grid shift round-trips score-identically") {
    ExperimentConfig cfg;
    cfg.clip_frames = 4;
    cfg.model_frames = 4;
    cfg.window_stride = 4;
    cfg.buffer_frames = 4;
    cfg.leave_out = false;
    cfg.estimator = "multires";
    cfg.rank = 2;
    cfg.delta_n = 1;
    cfg.lambda = 0.02;
    cfg.em_iters = 15;
    cfg.shrinkage = 0.1;
    cfg.psd_floor = 0.05;
    const ModelBundle bundle = fit(cfg, video);
    CHECK(bundle.models[0][0].type == "multires");
    CHECK(bundle.models[0][0].has_mapping);
    TempDir tmp;
    write_bundle(bundle, tmp.file("mr.stbm"));
    const ModelBundle back = read_bundle(tmp.file("mr.stbm"));
    const auto rows1 = score(bundle, video);
    const auto rows2 = score(back, video);
    REQUIRE(rows1.size() == rows2.size());
    for (std::size_t i = 0; i < rows1.size(); ++i) {
      CHECK(rows1[i].score == rows2[i].score);
      CHECK(rows1[i].decision == rows2[i].decision);
    }
  }

  SUBCASE("nonrect estimator fits and scores with the mapping") {
    ExperimentConfig cfg;
    cfg.clip_frames = 4;
    cfg.model_frames = 4;
    cfg.window_stride = 4;
    cfg.buffer_frames = 4;
    cfg.leave_out = false;
    cfg.estimator = "nonrect";
    cfg.rank = 2;
    cfg.delta_n = 1;
    cfg.psd_floor = 0.05;
    const ModelBundle bundle = fit(cfg, video);
    CHECK(bundle.models[0][0].has_mapping);
    CHECK(bundle.models[0][0].kron.dims.n_len == 12 + 3);  // padded grid
    const auto rows = score(bundle, video);
    TempDir tmp;
    write_bundle(bundle, tmp.file("nr.stbm"));
    const auto rows2 = score(read_bundle(tmp.file("nr.stbm")), video);
    REQUIRE(rows.size() == rows2.size());
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].score == rows2[i].score);
    for (const auto& r : rows)
      if (r.block == -1) CHECK(std::isfinite(r.score));
  }

  SUBCASE("toeplitz-kron estimator scores long clips") {
    ExperimentConfig cfg;
    cfg.clip_frames = 12;
    cfg.model_frames = 4;
    cfg.window_stride = 4;
    cfg.buffer_frames = 4;
    cfg.leave_out = false;
    cfg.estimator = "toeplitz-kron";
    cfg.rank = 3;
    cfg.psd_floor = 0.02;
    const ModelBundle bundle = fit(cfg, video);
    CHECK(bundle.models[0][0].kron.toeplitz_temporal);
    const auto rows = score(bundle, video);
    // the band extension of an inverted fit is not PSD in general, so scores
    // may go negative; they must be finite and reproducible
    for (const auto& r : rows) CHECK(std::isfinite(r.score));
    const auto rows2 = score(bundle, video);
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].score == rows2[i].score);
  }
}
