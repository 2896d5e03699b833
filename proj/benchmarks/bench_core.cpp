#include <benchmark/benchmark.h>

#include "stcov/anomaly.hpp"
#include "stcov/estimators.hpp"
#include "stcov/multires.hpp"
#include "stcov/synth.hpp"

using namespace stcov;

namespace {

Matrix random_covariance(int side, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix g = rng.normal_matrix(side, side);
  Matrix s = g * g.transpose() / side;
  s.diagonal().array() += 0.5;
  return s;
}

SampleSet random_samples(const Dims& dims, int n, std::uint64_t seed) {
  Rng rng(seed);
  SampleSet s;
  s.dims = dims;
  s.x = rng.normal_matrix(dims.side(), n);
  s.mu = Vector::Zero(dims.side());
  return s;
}

}  // namespace

static void BM_Rearrange(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const Matrix sigma = random_covariance(t * n, 1);
  const Dims dims(t, n);
  for (auto _ : state) {
    auto r = rearrange(sigma, dims);
    benchmark::DoNotOptimize(r.data.data());
  }
}
BENCHMARK(BM_Rearrange)->Args({8, 16})->Args({8, 64})->Args({16, 64});

static void BM_KronPcaLs(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const int r = static_cast<int>(state.range(2));
  const Matrix sigma = random_covariance(t * n, 2);
  const Dims dims(t, n);
  for (auto _ : state) {
    auto kc = kron_pca_ls(sigma, dims, r);
    benchmark::DoNotOptimize(kc.factors.data());
  }
}
BENCHMARK(BM_KronPcaLs)->Args({8, 16, 3})->Args({8, 64, 3});

static void BM_ToeplitzKronLs(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const Matrix sigma = random_covariance(t * n, 3);
  const Dims dims(t, n);
  for (auto _ : state) {
    auto kc = toeplitz_kron_ls(sigma, dims, 3);
    benchmark::DoNotOptimize(kc.factors.data());
  }
}
BENCHMARK(BM_ToeplitzKronLs)->Args({8, 16})->Args({8, 64});

static void BM_DcKronPca(benchmark::State& state) {
  const SampleSet s = random_samples(Dims(4, 16), 40, 4);
  for (auto _ : state) {
    auto kc = dc_kron_pca(s, 2, 1e-8, 200);
    benchmark::DoNotOptimize(kc.factors.data());
  }
}
BENCHMARK(BM_DcKronPca);

static void BM_ArScore(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const int t1 = static_cast<int>(state.range(2));
  const Matrix sigma = random_covariance(t * n, 5);
  const ArScorer scorer = ArScorer::from_covariance(sigma, Vector::Zero(n), Dims(t, n), 1, n);
  Rng rng(6);
  const Vector clip = rng.normal_vector(static_cast<Eigen::Index>(n) * t1);
  for (auto _ : state) benchmark::DoNotOptimize(ar_score(scorer, clip));
}
BENCHMARK(BM_ArScore)->Args({8, 16, 8})->Args({8, 16, 32})->Args({8, 64, 32});

static void BM_SparsifyLogdet(benchmark::State& state) {
  const Matrix j = random_covariance(static_cast<int>(state.range(0)), 7);
  for (auto _ : state) {
    auto out = sparsify_logdet(j, 0.05, 1e-7, 300);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_SparsifyLogdet)->Arg(16)->Arg(48);

static void BM_MultiresFit(benchmark::State& state) {
  const int grid = static_cast<int>(state.range(0));
  const TreeTopology topo = build_quadtree(grid, grid, 2);
  const SampleSet s = random_samples(Dims(2, grid * grid), 60, 8);
  MultiresFitOptions opts;
  opts.em_max_iter = 15;
  for (auto _ : state) {
    auto model = fit_multires(topo, s, opts);
    benchmark::DoNotOptimize(model.total_vars());
  }
}
BENCHMARK(BM_MultiresFit)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_MultiresScore(benchmark::State& state) {
  const int grid = static_cast<int>(state.range(0));
  const TreeTopology topo = build_quadtree(grid, grid, 2);
  const SampleSet s = random_samples(Dims(2, grid * grid), 60, 9);
  MultiresFitOptions opts;
  opts.em_max_iter = 10;
  const MultiresModel model = fit_multires(topo, s, opts);
  Rng rng(10);
  const Vector y = rng.normal_vector(model.observed_vars());
  for (auto _ : state) benchmark::DoNotOptimize(model.observed_score(y));
}
BENCHMARK(BM_MultiresScore)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_SynthEscape(benchmark::State& state) {
  for (auto _ : state) {
    auto esc = synth_escape(8, 8, 120, 80, 11);
    benchmark::DoNotOptimize(esc.tensor.data.data());
  }
}
BENCHMARK(BM_SynthEscape)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
