#include "stcov/synth.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <sstream>

namespace stcov {

FieldSpec FieldSpec::parse(const std::string& text) {
  FieldSpec spec;
  const auto colon = text.find(':');
  spec.kind = text.substr(0, colon);
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) spec.params.push_back(std::stod(tok));
  }
  return spec;
}

namespace {

Vector eval_amplitude(const FieldSpec& spec, int height, int width) {
  Vector h(static_cast<Eigen::Index>(height) * width);
  if (spec.kind == "constant") {
    const double amp = spec.params.empty() ? 1.0 : spec.params[0];
    h.setConstant(amp);
  } else if (spec.kind == "bump") {
    if (spec.params.size() < 4) throw BadInputError("bump amplitude needs amp,cx,cy,sigma");
    const double amp = spec.params[0], cx = spec.params[1], cy = spec.params[2],
                 sg = spec.params[3];
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        const double dx = (width > 1 ? static_cast<double>(c) / (width - 1) : 0.5) - cx;
        const double dy = (height > 1 ? static_cast<double>(r) / (height - 1) : 0.5) - cy;
        h[r * width + c] = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sg * sg));
      }
  } else {
    throw BadInputError("unknown amplitude field kind '" + spec.kind + "'");
  }
  return h;
}

Vector eval_phase(const FieldSpec& spec, int height, int width) {
  Vector g(static_cast<Eigen::Index>(height) * width);
  if (spec.kind == "linear") {
    if (spec.params.size() < 2) throw BadInputError("linear phase needs kx,ky");
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        g[r * width + c] = spec.params[0] * c + spec.params[1] * r;
  } else if (spec.kind == "radial") {
    if (spec.params.empty()) throw BadInputError("radial phase needs k");
    const double cr = 0.5 * (height - 1), cc = 0.5 * (width - 1);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        g[r * width + c] = spec.params[0] * std::hypot(r - cr, c - cc);
  } else {
    throw BadInputError("unknown phase field kind '" + spec.kind + "'");
  }
  return g;
}

}  // namespace

WaveResult synth_traveling_wave(int height, int width, int frames, const FieldSpec& h_spec,
                                const FieldSpec& g_spec, double c, double noise_sd,
                                int n_clips, std::uint64_t seed) {
  if (n_clips < 1) throw BadInputError("synth_traveling_wave: need at least one clip");
  const int n = height * width;
  const Dims dims(frames, n);
  const Vector h = eval_amplitude(h_spec, height, width);
  const Vector g = eval_phase(g_spec, height, width);

  Rng rng(seed);
  Matrix raw(dims.side(), n_clips);
  for (int k = 0; k < n_clips; ++k) {
    const double phase = 6.28318530717958647692 * rng.uniform();
    for (int t = 0; t < frames; ++t)
      for (int p = 0; p < n; ++p)
        raw(t * n + p, k) = h[p] * std::sin(g[p] - c * t + phase);
    if (noise_sd > 0.0)
      for (Eigen::Index i = 0; i < raw.rows(); ++i) raw(i, k) += noise_sd * rng.normal();
  }

  WaveResult out;
  out.dims = dims;
  out.samples = make_sample_set(raw, dims);

  // population: 0.5 h_i h_j [cos(g_i-g_j) cos(c dt) + sin(g_i-g_j) sin(c dt)]
  out.population_sigma.resize(dims.side(), dims.side());
  for (int t1 = 0; t1 < frames; ++t1)
    for (int t2 = 0; t2 < frames; ++t2) {
      const double dt = c * (t1 - t2);
      for (int p = 0; p < n; ++p)
        for (int q = 0; q < n; ++q) {
          const double dg = g[p] - g[q];
          out.population_sigma(t1 * n + p, t2 * n + q) =
              0.5 * h[p] * h[q] * (std::cos(dg) * std::cos(dt) + std::sin(dg) * std::sin(dt));
        }
    }
  if (noise_sd > 0.0)
    out.population_sigma.diagonal().array() += noise_sd * noise_sd;
  return out;
}

namespace {

Matrix sqexp_kernel_1d(int size, double len_scale, double amp) {
  Matrix s(size, size);
  for (int a = 0; a < size; ++a)
    for (int b = 0; b < size; ++b) {
      const double d = a - b;
      s(a, b) = amp * std::exp(-d * d / (2.0 * len_scale * len_scale));
    }
  s.diagonal().array() += 1e-9 * amp;
  return s;
}

Matrix ar1_corr(int frames, double rho) {
  Matrix t(frames, frames);
  for (int a = 0; a < frames; ++a)
    for (int b = 0; b < frames; ++b) t(a, b) = std::pow(rho, std::abs(a - b));
  return t;
}

}  // namespace

FlowResult synth_flow(int height, int width, int frames, int delta_n, const FlowSpec& spec,
                      int n_clips, std::uint64_t seed) {
  const int n = height * width;
  if (std::abs(delta_n) * (frames - 1) >= n)
    throw BadInputError("synth_flow: shift bound violated");
  FlowResult out;
  out.mapping = GridMapping(delta_n, n, frames);
  const int ext = out.mapping.padded_n();

  out.s0_extended = sqexp_kernel_1d(ext, spec.len_scale, spec.amp);
  out.t0 = ar1_corr(frames, spec.rho);
  Eigen::LLT<Matrix> ls(out.s0_extended);
  Eigen::LLT<Matrix> lt(out.t0);
  if (ls.info() != Eigen::Success || lt.info() != Eigen::Success)
    throw NumericError("synth_flow: kernel factorization failed");
  const Matrix l_s = ls.matrixL();
  const Matrix l_t = lt.matrixL();

  Rng rng(seed);
  const Dims dims(frames, n);
  Matrix raw(dims.side(), n_clips);
  for (int k = 0; k < n_clips; ++k) {
    const Matrix phi = l_s * rng.normal_matrix(ext, frames) * l_t.transpose();
    for (int f = 0; f < frames; ++f) {
      const int off = out.mapping.frame_offset(f);
      for (int p = 0; p < n; ++p) raw(f * n + p, k) = phi(off + p, f);
    }
  }
  out.samples = make_sample_set(raw, dims);

  out.population_sigma.resize(dims.side(), dims.side());
  for (int f1 = 0; f1 < frames; ++f1) {
    const int o1 = out.mapping.frame_offset(f1);
    for (int f2 = 0; f2 < frames; ++f2) {
      const int o2 = out.mapping.frame_offset(f2);
      for (int p = 0; p < n; ++p)
        for (int q = 0; q < n; ++q)
          out.population_sigma(f1 * n + p, f2 * n + q) =
              out.t0(f1, f2) * out.s0_extended(o1 + p, o2 + q);
    }
  }
  return out;
}

namespace {

Matrix torus_sqexp_kernel(int size, double len_scale, double amp) {
  // wrapped Gaussian: periodizing a PD kernel keeps it PD, plain circular
  // distance does not
  Matrix s(size, size);
  for (int a = 0; a < size; ++a)
    for (int b = 0; b < size; ++b) {
      double acc = 0.0;
      for (int wrap = -3; wrap <= 3; ++wrap) {
        const double d = a - b + wrap * size;
        acc += std::exp(-d * d / (2.0 * len_scale * len_scale));
      }
      s(a, b) = amp * acc;
    }
  s.diagonal().array() += 1e-9 * amp;
  return s;
}

}  // namespace

FrameTensor synth_flow_video(int height, int width, int frames_total, int delta_n,
                             const FlowSpec& spec, std::uint64_t seed) {
  const int n = height * width;
  const Matrix s0 = torus_sqexp_kernel(n, spec.len_scale, spec.amp);
  Eigen::LLT<Matrix> llt(s0);
  if (llt.info() != Eigen::Success) throw NumericError("synth_flow_video: kernel not PD");
  const Matrix l = llt.matrixL();
  const double rho = spec.rho;
  const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));

  Rng rng(seed);
  FrameTensor t(height, width, frames_total);
  t.provenance = "synth_flow_video";
  Vector psi = l * rng.normal_vector(n);
  for (int f = 0; f < frames_total; ++f) {
    if (f > 0) psi = rho * psi + innov * (l * rng.normal_vector(n));
    for (int p = 0; p < n; ++p) {
      const int src = ((p + static_cast<long long>(f) * delta_n) % n + n) % n;
      double v = psi[src];
      if (spec.noise_sd > 0.0) v += spec.noise_sd * rng.normal();
      t.data[static_cast<std::size_t>(f) * n + p] = v;
    }
  }
  return t;
}

EscapeResult synth_escape(int height, int width, int frames_total, int switch_frame,
                          std::uint64_t seed, const EscapeSpec& spec) {
  if (switch_frame >= frames_total)
    throw BadInputError("synth_escape: switch_frame must precede frames_total");
  const int n = height * width;
  Matrix s(n, n);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) {
      const double dr = p / width - q / width;
      const double dc = p % width - q % width;
      s(p, q) = spec.amp * std::exp(-(dr * dr + dc * dc) / (2.0 * spec.len_scale * spec.len_scale));
    }
  s.diagonal().array() += 1e-9 * spec.amp;
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("synth_escape: kernel not PD");
  const Matrix l = llt.matrixL();

  Rng rng(seed);
  EscapeResult out;
  out.tensor = FrameTensor(height, width, frames_total);
  out.tensor.provenance = "synth_escape";
  out.labels.assign(static_cast<std::size_t>(frames_total), 0);

  Vector x = l * rng.normal_vector(n);
  for (int f = 0; f < frames_total; ++f) {
    const double rho = f < switch_frame ? spec.rho_pre : spec.rho_post;
    if (f > 0) {
      const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));
      x = rho * x + innov * (l * rng.normal_vector(n));
    }
    for (int p = 0; p < n; ++p) {
      double v = x[p];
      if (spec.noise_sd > 0.0) v += spec.noise_sd * rng.normal();
      out.tensor.data[static_cast<std::size_t>(f) * n + p] = v;
    }
    if (f >= switch_frame) out.labels[static_cast<std::size_t>(f)] = 1;
  }
  return out;
}

Matrix escape_population(int height, int width, int model_frames, double rho,
                         const EscapeSpec& spec) {
  const int n = height * width;
  Matrix s(n, n);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) {
      const double dr = p / width - q / width;
      const double dc = p % width - q % width;
      s(p, q) = spec.amp * std::exp(-(dr * dr + dc * dc) / (2.0 * spec.len_scale * spec.len_scale));
    }
  const Matrix t = ar1_corr(model_frames, rho);
  Matrix out = assemble_kron_sum({{t, s}});
  if (spec.noise_sd > 0.0) out.diagonal().array() += spec.noise_sd * spec.noise_sd;
  return out;
}

}  // namespace stcov
