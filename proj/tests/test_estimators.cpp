#include <doctest.h>

#include "oracles.hpp"
#include "stcov/estimators.hpp"
#include "stcov/synth.hpp"

using namespace stcov;

namespace {

// SampleSet whose sample covariance is exactly (1/n) X X^T = target, no
// recentering applied.
SampleSet exact_cov_samples(const Matrix& target, const Dims& dims) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(target);
  Vector ev = es.eigenvalues().cwiseMax(0.0);
  const Matrix l = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  SampleSet s;
  s.dims = dims;
  s.x = l * std::sqrt(static_cast<double>(target.rows()));
  s.mu = Vector::Zero(target.rows());
  return s;
}

Matrix t0_2x2() {
  Matrix t(2, 2);
  t << 2.0, 0.6, 0.6, 1.5;
  return t;
}

Matrix s0_3x3() {
  Matrix s(3, 3);
  s << 1.5, 0.4, 0.1, 0.4, 1.2, 0.3, 0.1, 0.3, 1.0;
  return s;
}

}  // namespace

TEST_CASE("sample_covariance") {
  Rng rng(51);

  SUBCASE("single sample, no shrinkage") {
    SampleSet s;
    s.dims = Dims(2, 3);
    s.x = rng.normal_vector(6);
    s.mu = Vector::Zero(6);
    const Matrix cov = sample_covariance(s, 0.0);
    CHECK((cov - s.x * s.x.transpose()).norm() < 1e-14);
  }

  SUBCASE("full shrinkage preserves trace") {
    SampleSet s;
    s.dims = Dims(2, 3);
    s.x = rng.normal_matrix(6, 20);
    s.mu = Vector::Zero(6);
    const Matrix raw = sample_covariance(s, 0.0);
    const Matrix cov = sample_covariance(s, 1.0);
    CHECK((cov - (raw.trace() / 6.0) * Matrix::Identity(6, 6)).norm() < 1e-12);
    CHECK(cov.trace() == doctest::Approx(raw.trace()).epsilon(1e-12));
  }

  SUBCASE("Monte Carlo convergence to a known covariance") {
    const Matrix sigma = oracles::random_psd(6, rng);
    const Matrix l = Eigen::LLT<Matrix>(sigma).matrixL();
    const int n = 100000;
    SampleSet s;
    s.dims = Dims(2, 3);
    s.x = l * rng.normal_matrix(6, n);
    s.mu = Vector::Zero(6);
    const Matrix cov = sample_covariance(s, 0.0);
    CHECK((cov - sigma).cwiseAbs().maxCoeff() < 0.05 * sigma.norm());
  }
}

TEST_CASE("kron_pca_ls") {
  Rng rng(53);

  SUBCASE("exact Kronecker input at rank 1") {
    const Matrix sigma = oracles::kron(t0_2x2(), s0_3x3());
    const KronCovariance kc = kron_pca_ls(sigma, Dims(2, 3), 1);
    CHECK((kc.assemble() - sigma).norm() < 1e-10 * sigma.norm());
    CHECK((kc.assemble_finalized() - sigma).norm() < 1e-9 * sigma.norm());
  }

  SUBCASE("traveling wave population needs exactly two terms") {
    const WaveResult wave = synth_traveling_wave(3, 5, 4, FieldSpec::parse("constant:1.0"),
                                                 FieldSpec::parse("linear:0.7,0.4"), 0.6, 0.0,
                                                 2, 99);
    const Matrix& pop = wave.population_sigma;
    const KronCovariance k2 = kron_pca_ls(pop, wave.dims, 2);
    CHECK((k2.assemble() - pop).norm() < 1e-8 * pop.norm());
    const KronCovariance k1 = kron_pca_ls(pop, wave.dims, 1);
    CHECK((k1.assemble() - pop).norm() > 1e-3 * pop.norm());
  }

  SUBCASE("full separation rank reconstructs any symmetric PSD input") {
    const Matrix sigma = oracles::random_psd(4, rng);
    const KronCovariance kc = kron_pca_ls(sigma, Dims(2, 2), 4);
    CHECK((kc.assemble() - sigma).norm() < 1e-10 * sigma.norm());
  }

  SUBCASE("residual nonincreasing in rank") {
    const Matrix sigma = oracles::random_psd(6, rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int r = 1; r <= 4; ++r) {
      const double resid = (kron_pca_ls(sigma, Dims(2, 3), r).assemble() - sigma).norm();
      CHECK(resid <= prev + 1e-12);
      prev = resid;
    }
  }

  SUBCASE("rank clamp flagged") {
    const Matrix sigma = oracles::random_psd(4, rng);
    const KronCovariance kc = kron_pca_ls(sigma, Dims(2, 2), 99);
    CHECK(kc.rank_clamped);
  }

  SUBCASE("assembled estimate is symmetric with near-PSD finalization") {
    for (int trial = 0; trial < 10; ++trial) {
      const Matrix sigma = oracles::random_psd(6, rng);
      const Matrix fin = kron_pca_ls(sigma, Dims(3, 2), 2).assemble_finalized();
      CHECK((fin - fin.transpose()).norm() < 1e-12);
      CHECK(oracles::min_eig(fin) >= -1e-10);
    }
  }
}

TEST_CASE("dc_kron_pca") {
  SUBCASE("noise-free Kronecker input: off-diagonal matches the plain fit") {
    const Matrix sigma = oracles::kron(t0_2x2(), s0_3x3());
    const SampleSet s = exact_cov_samples(sigma, Dims(2, 3));
    const KronCovariance dc = dc_kron_pca(s, 1, 1e-12, 3000);
    const Matrix assembled = dc.assemble();
    CHECK((assembled.diagonal() - sigma.diagonal()).norm() < 1e-12);
    CHECK((assembled - sigma).norm() < 1e-7 * sigma.norm());
  }

  SUBCASE("additive diagonal is absorbed exactly") {
    Rng rng(57);
    const Matrix base = oracles::kron(t0_2x2(), s0_3x3());
    Vector d(6);
    for (int i = 0; i < 6; ++i) d[i] = 0.5 + rng.uniform();
    const Matrix sigma = base + Matrix(d.asDiagonal());
    const SampleSet s = exact_cov_samples(sigma, Dims(2, 3));
    const KronCovariance dc = dc_kron_pca(s, 1, 1e-13, 5000);
    const Matrix assembled = dc.assemble();
    // diagonal equals sample variances bit-for-bit
    const Matrix sample_cov = sample_covariance(s, 0.0);
    for (int i = 0; i < 6; ++i) CHECK(assembled(i, i) == sample_cov(i, i));
    double off_err = 0.0;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        if (i != j) off_err += std::pow(assembled(i, j) - base(i, j), 2);
    CHECK(std::sqrt(off_err) < 1e-8);
  }

  SUBCASE("PSD enforced on random inputs") {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
      SampleSet s;
      s.dims = Dims(2, 3);
      s.x = rng.normal_matrix(6, 4);
      s.mu = Vector::Zero(6);
      const KronCovariance dc = dc_kron_pca(s, 1, 1e-8, 300);
      CHECK(oracles::min_eig(dc.assemble()) >= -1e-10);
    }
  }
}

TEST_CASE("toeplitz_kron_ls") {
  Rng rng(63);

  SUBCASE("three Toeplitz terms recovered at rank 3") {
    const int t = 4, n = 3;
    std::vector<KronTerm> truth;
    for (int k = 0; k < 3; ++k) {
      Vector diag_vals = rng.normal_vector(2 * t - 1);
      Matrix tf(t, t);
      for (int a = 0; a < t; ++a)
        for (int b = 0; b < t; ++b) tf(a, b) = diag_vals[(b - a) + t - 1];
      truth.emplace_back(tf, oracles::random_symmetric(n, rng));
    }
    Matrix sigma = assemble_kron_sum(truth);
    sigma = (0.5 * (sigma + sigma.transpose())).eval();
    const KronCovariance kc = toeplitz_kron_ls(sigma, Dims(t, n), 3);
    CHECK((kc.assemble() - sigma).norm() < 1e-9 * sigma.norm());
  }

  SUBCASE("2T-1 terms represent any block-Toeplitz matrix exactly") {
    const Dims dims(4, 3);
    const Matrix sigma = oracles::random_block_toeplitz(dims, rng);
    const KronCovariance kc = toeplitz_kron_ls(sigma, dims, 7);
    CHECK((kc.assemble() - sigma).norm() < 1e-8 * sigma.norm());
  }

  SUBCASE("rank-1 Toeplitz-Kronecker input recovered with Toeplitz factor") {
    Matrix tf(3, 3);
    Vector dv(5);
    dv << 0.2, 0.5, 2.0, 0.5, 0.2;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) tf(a, b) = dv[(b - a) + 2];
    const Matrix sigma = oracles::kron(tf, s0_3x3());
    const KronCovariance kc = toeplitz_kron_ls(sigma, Dims(3, 3), 1);
    CHECK((kc.assemble() - sigma).norm() < 1e-10 * sigma.norm());
    CHECK(kc.toeplitz_temporal);
  }

  SUBCASE("temporal factors have constant diagonals") {
    const Dims dims(4, 3);
    const Matrix sigma = oracles::random_psd(12, rng);
    const KronCovariance kc = toeplitz_kron_ls(sigma, dims, 4);
    for (const auto& [tf, sf] : kc.factors) {
      for (int off = -3; off <= 3; ++off) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < 4; ++a) {
          const int b = a + off;
          if (b < 0 || b >= 4) continue;
          lo = std::min(lo, tf(a, b));
          hi = std::max(hi, tf(a, b));
        }
        CHECK(hi - lo < 1e-12);
      }
    }
  }

  SUBCASE("reduction preserves the LS optimum on block-Toeplitz input") {
    const Dims dims(4, 3);
    const Matrix sigma = oracles::random_block_toeplitz(dims, rng);
    for (int r = 1; r <= 3; ++r) {
      const double toep_resid = (toeplitz_kron_ls(sigma, dims, r).assemble() - sigma).norm();
      const double free_resid = (kron_pca_ls(sigma, dims, r).assemble() - sigma).norm();
      CHECK(toep_resid == doctest::Approx(free_resid).epsilon(1e-9));
    }
  }

  SUBCASE("both_dims constrains the spatial factors too") {
    const Dims dims(3, 4);
    Matrix tf(3, 3), sf(4, 4);
    Vector dt(5), ds(7);
    dt << 0.1, 0.4, 1.5, 0.4, 0.1;
    ds << 0.05, 0.1, 0.3, 1.2, 0.3, 0.1, 0.05;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) tf(a, b) = dt[(b - a) + 2];
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) sf(a, b) = ds[(b - a) + 3];
    const Matrix sigma = oracles::kron(tf, sf);
    const KronCovariance kc = toeplitz_kron_ls(sigma, dims, 1, true);
    CHECK((kc.assemble() - sigma).norm() < 1e-9 * sigma.norm());
    // spatial factor Toeplitz as well
    const Matrix& s_hat = kc.factors[0].second;
    for (int off = -3; off <= 3; ++off) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (int a = 0; a < 4; ++a) {
        const int b = a + off;
        if (b < 0 || b >= 4) continue;
        lo = std::min(lo, s_hat(a, b));
        hi = std::max(hi, s_hat(a, b));
      }
      CHECK(hi - lo < 1e-12);
    }
  }

  SUBCASE("banded mode zeroes long offsets") {
    const Dims dims(4, 3);
    const Matrix sigma = oracles::random_block_toeplitz(dims, rng);
    const KronCovariance kc = toeplitz_kron_ls(sigma, dims, 2, false, 2);
    for (const auto& [tf, sf] : kc.factors) {
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
          if (std::abs(b - a) >= 2) CHECK(tf(a, b) == 0.0);
    }
  }

  SUBCASE("rank above 2T-1 raises") {
    const Dims dims(3, 3);
    const Matrix sigma = oracles::random_psd(9, rng);
    CHECK_THROWS_AS(toeplitz_kron_ls(sigma, dims, 6), BadInputError);
  }
}

TEST_CASE("GridMapping and nonrect_kron") {
  SUBCASE("dummy slot counting") {
    GridMapping gm(2, 5, 3);
    CHECK(gm.padded_n() == 9);
    CHECK(gm.dummy_count() == 12);
    int valid = 0;
    for (int f = 0; f < 3; ++f)
      for (int s = 0; s < gm.padded_n(); ++s) valid += gm.valid(f, s) ? 1 : 0;
    CHECK(valid == 15);
  }

  SUBCASE("zero shift reproduces the rectangular path exactly") {
    Rng rng(67);
    SampleSet s;
    s.dims = Dims(3, 4);
    s.x = rng.normal_matrix(12, 30);
    s.mu = Vector::Zero(12);
    const NonrectFit fit = nonrect_kron(s, GridMapping(0, 4, 3), 2);
    const KronCovariance plain = kron_pca_ls(sample_covariance(s, 0.0), s.dims, 2);
    CHECK((fit.extract_covariance() - plain.assemble()).norm() < 1e-12);
  }

  SUBCASE("drifting separable population becomes rank-1 after embedding") {
    FlowSpec spec;
    spec.rho = 0.85;
    spec.len_scale = 1.2;
    const FlowResult flow = synth_flow(1, 6, 3, 1, spec, 2, 5);
    const Dims dims(3, 6);
    // unembedded: the drifted covariance is not rank-1 in the rearranged domain
    Eigen::JacobiSVD<Matrix> svd(rearrange(flow.population_sigma, dims).data);
    CHECK(svd.singularValues()[1] > 1e-6 * svd.singularValues()[0]);

    // embedded population: valid entries reproduced by a rank-1 padded fit
    const GridMapping& gm = flow.mapping;
    SampleSet pop_samples = exact_cov_samples(flow.population_sigma, dims);
    const NonrectFit fit = nonrect_kron(pop_samples, gm, 1, 8192, 1e-12, 3000);
    const Matrix recon = fit.extract_covariance();
    CHECK(gm.padded_n() == 8);
    CHECK((recon - flow.population_sigma).norm() < 1e-8 * flow.population_sigma.norm());
  }
}
