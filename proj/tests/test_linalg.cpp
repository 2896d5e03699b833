#include <doctest.h>

#include "oracles.hpp"
#include "stcov/linalg.hpp"

using namespace stcov;

TEST_CASE("rearrange maps Kronecker products to rank-1") {
  SUBCASE("identity") {
    const Matrix sigma = Matrix::Identity(4, 4);
    const auto r = rearrange(sigma, Dims(2, 2));
    Eigen::JacobiSVD<Matrix> svd(r.data);
    CHECK(svd.singularValues()[0] > 1e-12);
    CHECK(svd.singularValues()[1] < 1e-12);
    // vec(I2) vec(I2)^T
    Vector v(4);
    v << 1, 0, 0, 1;
    CHECK((r.data - v * v.transpose()).norm() == doctest::Approx(0.0).epsilon(1e-14));
  }

  SUBCASE("T0 kron S0 against block-extraction oracle") {
    Matrix t0(2, 2), s0(2, 2);
    t0 << 2, 1, 1, 2;
    s0 << 1, 0, 0, 1;
    const Matrix sigma = oracles::kron(t0, s0);
    const auto r = rearrange(sigma, Dims(2, 2));
    CHECK((r.data - oracles::rearrange_blocks(sigma, Dims(2, 2))).norm() == 0.0);
    Vector vt(4), vs(4);
    vt << 2, 1, 1, 2;
    vs << 1, 0, 0, 1;
    CHECK((r.data - vt * vs.transpose()).norm() == 0.0);
  }

  SUBCASE("round trip is exact") {
    Rng rng(7);
    const Matrix sym = oracles::random_symmetric(6, rng);
    const auto r = rearrange(sym, Dims(2, 3));
    CHECK((unrearrange(r) - sym).norm() == 0.0);
    const Matrix any = rng.normal_matrix(9, 9);
    const auto r2 = rearrange(any, Dims(3, 3));
    CHECK((unrearrange(r2) - any).norm() == 0.0);
  }

  SUBCASE("dimension mismatch raises") {
    CHECK_THROWS_AS(rearrange(Matrix::Identity(4, 4), Dims(2, 3)), BadInputError);
    RearrangedMatrix bad{Matrix::Zero(3, 4), Dims(2, 2)};
    CHECK_THROWS_AS(unrearrange(bad), BadInputError);
  }

  SUBCASE("Frobenius norm preserved") {
    Rng rng(11);
    const Matrix m = rng.normal_matrix(12, 12);
    CHECK(rearrange(m, Dims(3, 4)).data.norm() == doctest::Approx(m.norm()).epsilon(1e-15));
  }

  SUBCASE("rank equals number of independent Kronecker terms") {
    Rng rng(13);
    for (int r = 1; r <= 3; ++r) {
      std::vector<KronTerm> terms;
      for (int k = 0; k < r; ++k)
        terms.emplace_back(oracles::random_symmetric(3, rng), oracles::random_symmetric(4, rng));
      const Matrix sigma = assemble_kron_sum(terms);
      Eigen::JacobiSVD<Matrix> svd(rearrange(sigma, Dims(3, 4)).data);
      int rank = 0;
      for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()[i] > 1e-10 * svd.singularValues()[0]) ++rank;
      CHECK(rank == r);
    }
  }
}

TEST_CASE("unrearrange expands rank-1 factor pairs") {
  Matrix left(4, 1), right(4, 1);
  Matrix tf(2, 2), s0(2, 2);
  tf << 1, 0, 0, 0;
  s0 << 3, 1, 1, 2;
  left << 1, 0, 0, 0;
  right << 3, 1, 1, 2;
  RearrangedMatrix r{left * right.transpose(), Dims(2, 2)};
  const Matrix out = unrearrange(r);
  CHECK((out - oracles::kron(tf, s0)).norm() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK((out.block(0, 0, 2, 2) - s0).norm() == 0.0);
  CHECK(out.block(2, 2, 2, 2).norm() == 0.0);
}

TEST_CASE("truncated_svd_approx") {
  Rng rng(17);

  SUBCASE("rank-1 input reconstructs exactly") {
    const Vector u = rng.normal_vector(5), v = rng.normal_vector(7);
    const Matrix m = u * v.transpose();
    const auto lr = truncated_svd_approx(m, 1);
    CHECK((m - lr.left * lr.right.transpose()).norm() < 1e-12 * m.norm());
    CHECK_FALSE(lr.rank_clamped);
  }

  SUBCASE("Eckart-Young residual on a diagonal matrix") {
    Matrix m = Matrix::Zero(3, 3);
    m.diagonal() << 3, 2, 1;
    const auto lr = truncated_svd_approx(m, 2);
    CHECK((m - lr.left * lr.right.transpose()).norm() == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("residual matches tail singular values from a Gram oracle") {
    const Matrix m = rng.normal_matrix(6, 4);
    const auto lr = truncated_svd_approx(m, 3);
    const double resid2 = (m - lr.left * lr.right.transpose()).squaredNorm();
    Eigen::SelfAdjointEigenSolver<Matrix> es(m.transpose() * m);
    // eigenvalues ascending: the residual is the smallest of them
    CHECK(resid2 == doctest::Approx(es.eigenvalues()[0]).epsilon(1e-9));
  }

  SUBCASE("rank clamp flagged") {
    const auto lr = truncated_svd_approx(rng.normal_matrix(3, 3), 10);
    CHECK(lr.rank_clamped);
    CHECK(lr.rank == 3);
  }

  SUBCASE("residual nonincreasing in rank, zero at full rank") {
    const Matrix m = rng.normal_matrix(4, 9);
    double prev = std::numeric_limits<double>::infinity();
    for (int r = 1; r <= 4; ++r) {
      const auto lr = truncated_svd_approx(m, r);
      const double resid = (m - lr.left * lr.right.transpose()).norm();
      CHECK(resid <= prev + 1e-12);
      prev = resid;
    }
    CHECK(prev < 1e-10);
  }

  SUBCASE("sign convention is deterministic") {
    const Matrix m = rng.normal_matrix(5, 5);
    const auto a = truncated_svd_approx(m, 3);
    const auto b = truncated_svd_approx(m, 3);
    CHECK((a.left - b.left).norm() == 0.0);
    for (int k = 0; k < 3; ++k) {
      for (Eigen::Index i = 0; i < a.left.rows(); ++i) {
        if (std::abs(a.left(i, k)) > 1e-12) {
          CHECK(a.left(i, k) > 0.0);
          break;
        }
      }
    }
  }
}

TEST_CASE("weighted_low_rank") {
  Rng rng(23);

  SUBCASE("all-ones mask reduces to the SVD") {
    const Matrix m = rng.normal_matrix(6, 8);
    WeightMask w{Matrix::Ones(6, 8)};
    const auto res = weighted_low_rank(m, w, 2);
    const auto svd = truncated_svd_approx(m, 2);
    const double r1 = (m - res.factors.left * res.factors.right.transpose()).norm();
    const double r2 = (m - svd.left * svd.right.transpose()).norm();
    CHECK(std::abs(r1 - r2) < 1e-12);
  }

  SUBCASE("masked entries of a rank-1 matrix are recovered") {
    const Vector u = rng.normal_vector(8), v = rng.normal_vector(10);
    const Matrix m = u * v.transpose();
    WeightMask w{Matrix::Ones(8, 10)};
    int masked = 0;
    for (Eigen::Index i = 0; i < 8; ++i)
      for (Eigen::Index j = 0; j < 10; ++j)
        if (rng.uniform() < 0.2) {
          w.entries(i, j) = 0.0;
          ++masked;
        }
    REQUIRE(masked > 0);
    const auto res = weighted_low_rank(m, w, 1, 1e-12, 2000);
    const Matrix fit = res.factors.left * res.factors.right.transpose();
    const double err = (w.entries.array() * (m - fit).array()).matrix().norm();
    CHECK(err < 1e-10);
  }

  SUBCASE("corrupted diagonal is ignored under a zero-weight mask") {
    const Vector u = rng.normal_vector(6), v = rng.normal_vector(6);
    const Matrix clean = u * v.transpose();
    Matrix m = clean;
    m.diagonal().array() += 25.0;
    WeightMask w{Matrix::Ones(6, 6)};
    w.entries.diagonal().setZero();
    const auto res = weighted_low_rank(m, w, 1, 1e-13, 5000);
    const Matrix fit = res.factors.left * res.factors.right.transpose();
    double off_err = 0.0;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        if (i != j) off_err += std::pow(fit(i, j) - clean(i, j), 2);
    CHECK(std::sqrt(off_err) < 1e-10);
  }

  SUBCASE("all-zero mask raises") {
    WeightMask w{Matrix::Zero(3, 3)};
    CHECK_THROWS_AS(weighted_low_rank(Matrix::Ones(3, 3), w, 1), BadInputError);
  }
}

TEST_CASE("project_psd") {
  SUBCASE("clips a negative eigenvalue") {
    Matrix m = Matrix::Zero(2, 2);
    m.diagonal() << 1.0, -0.5;
    const Matrix p = project_psd(m, 0.0);
    Matrix expect = Matrix::Zero(2, 2);
    expect(0, 0) = 1.0;
    CHECK((p - expect).norm() < 1e-14);
  }

  SUBCASE("idempotent on PSD input") {
    Rng rng(29);
    const Matrix s = oracles::random_psd(4, rng);
    CHECK((project_psd(s, 0.0) - s).norm() < 1e-12 * s.norm());
  }

  SUBCASE("floor respected and projection is Frobenius-nearest") {
    Rng rng(31);
    const Matrix m = oracles::random_symmetric(5, rng);
    const Matrix p = project_psd(m, 1e-6);
    CHECK(oracles::min_eig(p) >= 1e-6 - 1e-12);
    // any other feasible matrix is at least as far away
    for (int trial = 0; trial < 10; ++trial) {
      Matrix y = oracles::random_psd(5, rng);
      y.diagonal().array() += 1e-6;
      CHECK((m - p).norm() <= (m - y).norm() + 1e-12);
    }
  }
}

TEST_CASE("assemble_kron_sum") {
  SUBCASE("single identity term") {
    const Matrix out = assemble_kron_sum({{Matrix::Identity(2, 2), Matrix::Identity(2, 2)}});
    CHECK((out - Matrix::Identity(4, 4)).norm() == 0.0);
  }

  SUBCASE("two terms against the 4-loop oracle") {
    Rng rng(37);
    const Matrix a = rng.normal_matrix(2, 2), b = rng.normal_matrix(2, 2);
    const Matrix c = rng.normal_matrix(2, 2), d = rng.normal_matrix(2, 2);
    const Matrix out = assemble_kron_sum({{a, b}, {c, d}});
    CHECK((out - oracles::kron(a, b) - oracles::kron(c, d)).norm() < 1e-14);
  }

  SUBCASE("empty list raises") {
    CHECK_THROWS_AS(assemble_kron_sum({}), BadInputError);
  }

  SUBCASE("matrix-free application matches the dense product") {
    Rng rng(41);
    std::vector<KronTerm> terms;
    terms.emplace_back(rng.normal_matrix(3, 3), rng.normal_matrix(4, 4));
    terms.emplace_back(rng.normal_matrix(3, 3), rng.normal_matrix(4, 4));
    const Matrix dense = assemble_kron_sum(terms);
    const Vector x = rng.normal_vector(12);
    CHECK((apply_kron_sum(terms, x) - dense * x).norm() < 1e-12 * dense.norm());
  }
}

TEST_CASE("block_toeplitz_extend_inverse") {
  Rng rng(43);

  SUBCASE("t1 == T is the plain quadratic form") {
    const Matrix j = oracles::random_psd(6, rng);
    BlockToeplitzExtension ext(j, Dims(2, 3), 2);
    const Vector x = rng.normal_vector(6);
    CHECK(ext.quadratic_form(x) == doctest::Approx(x.dot(j * x)).epsilon(1e-14));
  }

  SUBCASE("T=2 N=2 t1=4 against the explicit banded oracle") {
    const Matrix j = oracles::random_symmetric(4, rng);
    const Dims dims(2, 2);
    BlockToeplitzExtension ext(j, dims, 4);
    const Matrix dense = oracles::block_toeplitz_extension(j, dims, 4);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector x = rng.normal_vector(8);
      CHECK(ext.quadratic_form(x) ==
            doctest::Approx(x.dot(dense * x)).epsilon(1e-12));
    }
  }

  SUBCASE("zero vector gives zero") {
    const Matrix j = oracles::random_psd(6, rng);
    BlockToeplitzExtension ext(j, Dims(3, 2), 7);
    CHECK(ext.quadratic_form(Vector::Zero(14)) == 0.0);
  }

  SUBCASE("t1 < T raises") {
    const Matrix j = oracles::random_psd(6, rng);
    CHECK_THROWS_AS(BlockToeplitzExtension(j, Dims(3, 2), 2), BadInputError);
  }
}
