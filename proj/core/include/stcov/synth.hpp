#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stcov/estimators.hpp"
#include "stcov/tensor.hpp"
#include "stcov/types.hpp"

namespace stcov {

/// Parametric spatial field: kind + numeric parameters.
///   amplitude ("h"): constant:<amp> | bump:<amp>,<cx>,<cy>,<sigma>   (cx, cy in [0,1])
///   phase ("g"):     linear:<kx>,<ky> | radial:<k>
struct FieldSpec {
  std::string kind;
  std::vector<double> params;

  static FieldSpec parse(const std::string& text);
};

struct WaveResult {
  SampleSet samples;
  Dims dims;
  /// Closed-form population covariance of the generated clips (noise included).
  Matrix population_sigma;
};

/// Traveling wave h(x,y) sin(g(x,y) - c t + phase), phase uniform per clip.
/// The population covariance has rearranged rank 2 for c != 0 (rank 1 for
/// c == 0), plus a rank-1 noise term when noise_sd > 0.
WaveResult synth_traveling_wave(int height, int width, int frames, const FieldSpec& h_spec,
                                const FieldSpec& g_spec, double c, double noise_sd,
                                int n_clips, std::uint64_t seed);

struct FlowSpec {
  double len_scale = 1.5;  // squared-exponential spatial kernel length
  double amp = 1.0;
  double rho = 0.9;      // AR(1) temporal correlation
  double noise_sd = 0.0; // additive white observation noise
};

struct FlowResult {
  SampleSet samples;
  GridMapping mapping;
  Matrix population_sigma;  // over the original N*T variables
  Matrix s0_extended;       // spatial kernel over the extended index range
  Matrix t0;                // temporal correlation matrix
};

/// Separable random field translated by delta_n index positions per frame.
FlowResult synth_flow(int height, int width, int frames, int delta_n,
                      const FlowSpec& spec, int n_clips, std::uint64_t seed);

/// Continuous drifting-field video on a spatial torus (shift wraps), for
/// pipeline experiments; the per-clip covariance matches synth_flow with the
/// same parameters up to the wraparound.
FrameTensor synth_flow_video(int height, int width, int frames_total, int delta_n,
                             const FlowSpec& spec, std::uint64_t seed);

struct EscapeSpec {
  double rho_pre = 0.95;
  double rho_post = -0.5;
  double len_scale = 1.5;
  double amp = 1.0;
  double noise_sd = 0.05;
};

struct EscapeResult {
  FrameTensor tensor;
  std::vector<int> labels;  // per frame, 1 from switch_frame on
};

/// Piecewise vector-AR(1) process: slow correlated wander, then fast
/// divergent dynamics with the same per-frame marginal covariance.
EscapeResult synth_escape(int height, int width, int frames_total, int switch_frame,
                          std::uint64_t seed, const EscapeSpec& spec = {});

/// Closed-form T-frame population covariance of either escape regime.
Matrix escape_population(int height, int width, int model_frames, double rho,
                         const EscapeSpec& spec = {});

}  // namespace stcov
