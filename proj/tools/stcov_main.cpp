// stcov: structured spatio-temporal covariance estimation and video anomaly
// detection. Subcommands: synth, fit, score, eval, localize.

#include <CLI11.hpp>
#include <iostream>

#include "stcov/pipeline.hpp"
#include "stcov/synth.hpp"
#include "stcov/tensor.hpp"

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitFormat = 4;

struct SynthArgs {
  std::string generator;
  int height = 8, width = 8, frames = 8;
  int frames_total = 120, switch_frame = 60;
  int n_clips = 100;
  int delta_n = 1;
  double wave_speed = 0.5, noise_sd = 0.0;
  std::string h_spec = "constant:1.0", g_spec = "linear:0.7,0.3";
  double rho = 0.9, rho_pre = 0.95, rho_post = -0.5, len_scale = 1.5, amp = 1.0;
  double escape_noise = 0.05;
  std::uint64_t seed = 0;
  std::string out, out_labels;
};

int run_synth(const SynthArgs& args) {
  using namespace stcov;
  if (args.out.empty()) throw BadInputError("synth: --out is required");
  if (args.generator == "escape") {
    EscapeSpec spec;
    spec.rho_pre = args.rho_pre;
    spec.rho_post = args.rho_post;
    spec.len_scale = args.len_scale;
    spec.amp = args.amp;
    spec.noise_sd = args.escape_noise;
    EscapeResult res = synth_escape(args.height, args.width, args.frames_total,
                                    args.switch_frame, args.seed, spec);
    write_tensor(res.tensor, args.out);
    if (!args.out_labels.empty()) write_labels(res.labels, args.out_labels);
    std::cout << "escape: " << args.height << "x" << args.width << "x" << args.frames_total
              << " switch=" << args.switch_frame << " -> " << args.out << "\n";
    return 0;
  }
  if (args.generator == "flow") {
    FlowSpec spec;
    spec.rho = args.rho;
    spec.len_scale = args.len_scale;
    spec.amp = args.amp;
    FrameTensor t = synth_flow_video(args.height, args.width, args.frames_total,
                                     args.delta_n, spec, args.seed);
    write_tensor(t, args.out);
    std::cout << "flow: " << args.height << "x" << args.width << "x" << args.frames_total
              << " delta_n=" << args.delta_n << " -> " << args.out << "\n";
    return 0;
  }
  if (args.generator == "traveling-wave") {
    WaveResult res = synth_traveling_wave(
        args.height, args.width, args.frames, stcov::FieldSpec::parse(args.h_spec),
        stcov::FieldSpec::parse(args.g_spec), args.wave_speed, args.noise_sd, args.n_clips,
        args.seed);
    // clips laid out as a tensor: one clip after another along the frame axis
    FrameTensor t(args.height, args.width, args.frames * args.n_clips);
    t.provenance = "synth_traveling_wave";
    const int n = args.height * args.width;
    for (int k = 0; k < args.n_clips; ++k) {
      const Vector clip = res.samples.x.col(k) + res.samples.mu;
      for (int f = 0; f < args.frames; ++f)
        for (int p = 0; p < n; ++p)
          t.data[(static_cast<std::size_t>(k) * args.frames + f) * n + p] = clip[f * n + p];
    }
    write_tensor(t, args.out);
    std::cout << "traveling-wave: " << args.n_clips << " clips of " << args.frames
              << " frames -> " << args.out << "\n";
    return 0;
  }
  throw BadInputError("synth: unknown generator '" + args.generator +
                      "' (traveling-wave|flow|escape)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured spatio-temporal covariance estimation and anomaly detection"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate synthetic video data");
  synth->add_option("generator", synth_args.generator,
                    "traveling-wave | flow | escape")->required();
  synth->add_option("--height", synth_args.height);
  synth->add_option("--width", synth_args.width);
  synth->add_option("--frames", synth_args.frames, "frames per clip (traveling-wave)");
  synth->add_option("--frames-total", synth_args.frames_total);
  synth->add_option("--switch-frame", synth_args.switch_frame);
  synth->add_option("--n-clips", synth_args.n_clips);
  synth->add_option("--delta-n", synth_args.delta_n);
  synth->add_option("--wave-speed", synth_args.wave_speed);
  synth->add_option("--noise-sd", synth_args.noise_sd);
  synth->add_option("--h-spec", synth_args.h_spec);
  synth->add_option("--g-spec", synth_args.g_spec);
  synth->add_option("--rho", synth_args.rho);
  synth->add_option("--rho-pre", synth_args.rho_pre);
  synth->add_option("--rho-post", synth_args.rho_post);
  synth->add_option("--len-scale", synth_args.len_scale);
  synth->add_option("--amp", synth_args.amp);
  synth->add_option("--escape-noise", synth_args.escape_noise);
  synth->add_option("--seed", synth_args.seed);
  synth->add_option("--out", synth_args.out)->required();
  synth->add_option("--out-labels", synth_args.out_labels);

  std::string fit_config, fit_tensor, fit_out;
  auto* fit_cmd = app.add_subcommand("fit", "fit per-block covariance models");
  fit_cmd->add_option("--config", fit_config)->required();
  fit_cmd->add_option("--tensor", fit_tensor)->required();
  fit_cmd->add_option("--out-model", fit_out)->required();

  std::string score_model, score_tensor, score_out;
  auto* score_cmd = app.add_subcommand("score", "score clips under a fitted model bundle");
  score_cmd->add_option("--model", score_model)->required();
  score_cmd->add_option("--tensor", score_tensor)->required();
  score_cmd->add_option("--out-reports", score_out)->required();

  std::string eval_reports, eval_labels, eval_roc;
  int eval_clip_frames = 1;
  double eval_overlap = 0.5;
  auto* eval_cmd = app.add_subcommand("eval", "join reports with labels, emit ROC and AUC");
  eval_cmd->add_option("--reports", eval_reports)->required();
  eval_cmd->add_option("--labels", eval_labels)->required();
  eval_cmd->add_option("--out-roc", eval_roc)->required();
  eval_cmd->add_option("--clip-frames", eval_clip_frames);
  eval_cmd->add_option("--label-overlap", eval_overlap);

  std::string loc_model, loc_tensor;
  int loc_clip = 0;
  auto* loc_cmd = app.add_subcommand("localize", "per-block anomaly flags for one clip");
  loc_cmd->add_option("--model", loc_model)->required();
  loc_cmd->add_option("--tensor", loc_tensor)->required();
  loc_cmd->add_option("--clip-index", loc_clip)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return run_synth(synth_args);
    if (fit_cmd->parsed()) {
      const auto config = stcov::ExperimentConfig::from_file(fit_config);
      const auto tensor = stcov::read_tensor(fit_tensor);
      const auto bundle = stcov::fit(config, tensor);
      stcov::write_bundle(bundle, fit_out);
      std::cout << "fit: " << bundle.positions.size() << " positions, "
                << bundle.n_groups() << " models per position -> " << fit_out << "\n";
      return 0;
    }
    if (score_cmd->parsed()) {
      const auto bundle = stcov::read_bundle(score_model);
      const auto tensor = stcov::read_tensor(score_tensor);
      const auto rows = stcov::score(bundle, tensor);
      stcov::write_reports(rows, score_out);
      std::cout << "score: " << rows.size() << " rows -> " << score_out << "\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      const auto rows = stcov::read_reports(eval_reports);
      const auto labels = stcov::read_labels(eval_labels);
      const auto result = stcov::evaluate(rows, labels, eval_clip_frames, eval_overlap);
      stcov::write_roc(result.roc, eval_roc);
      std::cout << "eval: auc=" << result.roc.auc << " normal=" << result.n_normal
                << " anomalous=" << result.n_anomalous << " -> " << eval_roc << "\n";
      return 0;
    }
    if (loc_cmd->parsed()) {
      const auto bundle = stcov::read_bundle(loc_model);
      const auto tensor = stcov::read_tensor(loc_tensor);
      const auto flags = stcov::localize_clip(bundle, tensor, loc_clip);
      std::cout << "block_row,block_col,flag\n";
      for (std::size_t r = 0; r < flags.size(); ++r)
        for (std::size_t c = 0; c < flags[r].size(); ++c)
          std::cout << r << "," << c << "," << (flags[r][c] ? 1 : 0) << "\n";
      return 0;
    }
  } catch (const stcov::BadInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const stcov::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const stcov::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  return 0;
}
