#pragma once

// Experimental machinery: synthetic instances drawn from the prior, the
// permutation-minimized reconstruction error between weight-augmented
// barcode matrices, the statistical benchmark harness, and the
// error-versus-weights map over the n = 3 simplex.

#include "strainsolve/bcd.hpp"
#include "strainsolve/core.hpp"
#include "strainsolve/detail/parallel.hpp"
#include "strainsolve/detail/rng.hpp"
#include "strainsolve/posterior.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace strainsolve::eval {

/// tau(M) diag(w): each site block gains its missing reference-class
/// row (so block column sums are exactly one) and column j is scaled by
/// w_j. Two strains then compare by total probability mass regardless
/// of which class differs.
struct WeightedBarcode {
  Matrix augmented;  // (m*p) x n

  static WeightedBarcode build(const StrainMatrix& matrix,
                               const FrequencyVector& weights) {
    const ProblemDims& dims = matrix.dims();
    if (weights.size() != dims.strains)
      throw ShapeError("WeightedBarcode: weight length != strain count");
    const int br = dims.block_rows();
    const int p = dims.classes;
    Matrix aug(dims.sites * p, dims.strains);
    for (int k = 0; k < dims.sites; ++k) {
      for (int j = 0; j < dims.strains; ++j) {
        int sum = 0;
        for (int r = 0; r < br; ++r) sum += matrix.entries()(k * br + r, j);
        aug(k * p, j) = (1 - sum) * weights[j];
        for (int r = 0; r < br; ++r)
          aug(k * p + 1 + r, j) = matrix.entries()(k * br + r, j) * weights[j];
      }
    }
    return WeightedBarcode{std::move(aug)};
  }
};

/// Permutation-minimized entrywise 1-norm distance between the
/// weight-augmented barcodes of two estimates. Full enumeration over
/// the n! strain permutations.
inline double recon_error(const StrainMatrix& truth_matrix,
                          const FrequencyVector& truth_weights,
                          const StrainMatrix& estimate_matrix,
                          const FrequencyVector& estimate_weights) {
  if (!(truth_matrix.dims() == estimate_matrix.dims()))
    throw ShapeError("recon_error: dims disagree");
  const int n = truth_matrix.dims().strains;
  Matrix a = WeightedBarcode::build(truth_matrix, truth_weights).augmented;
  Matrix b = WeightedBarcode::build(estimate_matrix, estimate_weights).augmented;

  // Pairwise column distances, then minimize the assignment over
  // permutations.
  Matrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cost(i, j) = (a.col(i) - b.col(j)).lpNorm<1>();
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double recon_error(const Reconstruction& truth,
                          const Reconstruction& estimate) {
  return recon_error(truth.matrix, truth.weights, estimate.matrix,
                     estimate.weights);
}

/// Ground truth from the prior: the matrix uniform over the feasible
/// set conditioned on pairwise-distinct columns (rejection sampling,
/// capped), the weights uniform over the ordered simplex.
inline std::pair<StrainMatrix, FrequencyVector> sample_ground_truth(
    const ProblemDims& dims, std::uint64_t rng_seed) {
  // Distinct columns need at least n distinct site-class words.
  long distinct = 1;
  bool enough = false;
  for (int k = 0; k < dims.sites && !enough; ++k) {
    distinct *= dims.classes;
    if (distinct >= dims.strains) enough = true;
  }
  if (!enough)
    throw CapacityError("sample_ground_truth: only " + std::to_string(distinct) +
                        " distinct columns exist for n = " +
                        std::to_string(dims.strains));

  const auto candidates =
      enumerate_block_candidates(dims.strains, dims.classes);
  auto engine = detail::make_engine(detail::derive_seed(rng_seed, 0x6007u));
  std::uniform_int_distribution<long> pick(0,
                                           static_cast<long>(candidates.size()) - 1);
  const int br = dims.block_rows();
  constexpr int kMaxRejects = 10000;
  for (int attempt = 0; attempt < kMaxRejects; ++attempt) {
    BinaryMatrix bits(dims.rows(), dims.strains);
    for (int k = 0; k < dims.sites; ++k)
      bits.block(k * br, 0, br, dims.strains) =
          candidates[static_cast<std::size_t>(pick(engine))];
    bool duplicate = false;
    for (int a = 0; a < dims.strains && !duplicate; ++a)
      for (int b = a + 1; b < dims.strains && !duplicate; ++b)
        duplicate = bits.col(a) == bits.col(b);
    if (duplicate) continue;
    FrequencyVector w = posterior::sample_weights_uniform(
        dims.strains, 1, detail::derive_seed(rng_seed, 0x6008u))[0];
    return {StrainMatrix(dims, std::move(bits)), w};
  }
  throw CapacityError(
      "sample_ground_truth: rejection sampling found no duplicate-free matrix "
      "within 10000 attempts");
}

/// Adds independent zero-mean Gaussian noise with the model's per-row
/// standard deviations; deterministic per seed.
inline Measurement add_noise(const ProblemDims& dims, const Vector& clean,
                             const NoiseModel& noise, std::uint64_t rng_seed) {
  if (clean.size() != dims.rows() || noise.size() != clean.size())
    throw ShapeError("add_noise: length mismatch");
  auto engine = detail::make_engine(detail::derive_seed(rng_seed, 0xadd0u));
  std::normal_distribution<double> unit(0.0, 1.0);
  Vector noisy = clean;
  for (int i = 0; i < noisy.size(); ++i) noisy[i] += noise.stddev(i) * unit(engine);
  return Measurement(dims, std::move(noisy));
}

/// Benchmark specification; defaults mirror the desk-scale protocol
/// (200 samples per cell rather than a full 10000-sample run).
struct BenchmarkSpec {
  std::vector<ProblemDims> cells;
  std::vector<double> noise_levels;
  int sample_count = 200;
  std::vector<bcd::Backend> backends{bcd::Backend::bcd, bcd::Backend::global};
  std::uint64_t rng_seed = 0;
  bcd::BcdConfig bcd_config;
  double mip_gap = 1e-6;
  long node_limit = 1000000;
  int baseline_pairs = 10000;
  int threads = 0;

  void validate() const {
    if (cells.empty() || noise_levels.empty() || backends.empty())
      throw ShapeError("benchmark spec needs cells, noise levels and backends");
    if (sample_count < 1) throw ShapeError("benchmark spec: sample_count >= 1");
    for (double g : noise_levels)
      if (!(g > 0.0)) throw ShapeError("benchmark spec: noise levels must be > 0");
  }
};

struct BenchmarkRow {
  ProblemDims dims;
  double gamma = 0.0;
  int sample = 0;
  bcd::Backend backend = bcd::Backend::bcd;
  double error = 0.0;
  double objective = 0.0;
  bool certified = false;
  double wall_seconds = 0.0;  // excluded from the deterministic table
};

struct BenchmarkCellSummary {
  ProblemDims dims;
  double gamma = 0.0;
  bcd::Backend backend = bcd::Backend::bcd;
  double mean_error = 0.0;
  double median_error = 0.0;
  double q90_error = 0.0;
  double baseline_mean_error = 0.0;  // random prior pair distance
  std::vector<double> sorted_errors;
};

struct BenchmarkResult {
  std::vector<BenchmarkRow> rows;
  std::vector<BenchmarkCellSummary> summaries;
};

namespace impl {

inline double quantile_of_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * (static_cast<double>(sorted.size()) - 1.0);
  std::size_t lo = static_cast<std::size_t>(pos);
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace impl

/// Runs every (dims, gamma) cell of the spec: per sample draw a ground
/// truth, contaminate the forward data, reconstruct with every backend,
/// and record the reconstruction error; the per-cell baseline is the
/// mean error between fresh independent prior pairs. Rows are assembled
/// in deterministic (cell, sample, backend) order regardless of worker
/// scheduling.
inline BenchmarkResult run_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  BenchmarkResult result;

  int cell_index = 0;
  for (const ProblemDims& dims : spec.cells) {
    for (double gamma : spec.noise_levels) {
      const NoiseModel noise = NoiseModel::uniform(gamma, dims.rows());
      const std::uint64_t cell_seed = detail::derive_seed(
          spec.rng_seed, 0xbe9cu, static_cast<std::uint64_t>(cell_index));

      const int per_sample = static_cast<int>(spec.backends.size());
      std::vector<BenchmarkRow> rows(
          static_cast<std::size_t>(spec.sample_count * per_sample));
      detail::parallel_for(
          spec.sample_count,
          [&](int s) {
            const std::uint64_t s_seed = detail::derive_seed(
                cell_seed, 0x5a3fu, static_cast<std::uint64_t>(s));
            auto [truth_m, truth_w] = sample_ground_truth(dims, s_seed);
            Measurement data =
                add_noise(dims, forward(truth_m, truth_w), noise,
                          detail::derive_seed(s_seed, 0x401u));
            for (int b = 0; b < per_sample; ++b) {
              bcd::BcdConfig cfg = spec.bcd_config;
              cfg.rng_seed = detail::derive_seed(s_seed, 0x8cdu,
                                                 static_cast<std::uint64_t>(b));
              cfg.threads = 1;  // parallelism lives at the sample level
              auto t0 = std::chrono::steady_clock::now();
              Reconstruction est = bcd::solve_map(
                  data, noise, dims, spec.backends[static_cast<std::size_t>(b)],
                  cfg, spec.mip_gap, spec.node_limit);
              double secs = std::chrono::duration<double>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
              BenchmarkRow row;
              row.dims = dims;
              row.gamma = gamma;
              row.sample = s;
              row.backend = spec.backends[static_cast<std::size_t>(b)];
              row.error = recon_error(truth_m, truth_w, est.matrix, est.weights);
              row.objective = est.objective;
              row.certified = est.certified;
              row.wall_seconds = secs;
              rows[static_cast<std::size_t>(s * per_sample + b)] = row;
            }
          },
          spec.threads);

      // Random-pair baseline from fresh prior draws.
      std::vector<double> pair_errors(
          static_cast<std::size_t>(spec.baseline_pairs));
      detail::parallel_for(
          spec.baseline_pairs,
          [&](int i) {
            auto [m1, w1] = sample_ground_truth(
                dims, detail::derive_seed(cell_seed, 0xba5e + 1u,
                                          static_cast<std::uint64_t>(i)));
            auto [m2, w2] = sample_ground_truth(
                dims, detail::derive_seed(cell_seed, 0xba5e + 2u,
                                          static_cast<std::uint64_t>(i)));
            pair_errors[static_cast<std::size_t>(i)] =
                recon_error(m1, w1, m2, w2);
          },
          spec.threads);
      double baseline = 0.0;
      for (double e : pair_errors) baseline += e;
      baseline /= static_cast<double>(pair_errors.size());

      for (std::size_t b = 0; b < spec.backends.size(); ++b) {
        BenchmarkCellSummary summary;
        summary.dims = dims;
        summary.gamma = gamma;
        summary.backend = spec.backends[b];
        summary.baseline_mean_error = baseline;
        for (int s = 0; s < spec.sample_count; ++s)
          summary.sorted_errors.push_back(
              rows[static_cast<std::size_t>(s) * spec.backends.size() + b]
                  .error);
        std::sort(summary.sorted_errors.begin(), summary.sorted_errors.end());
        summary.mean_error =
            std::accumulate(summary.sorted_errors.begin(),
                            summary.sorted_errors.end(), 0.0) /
            static_cast<double>(summary.sorted_errors.size());
        summary.median_error = impl::quantile_of_sorted(summary.sorted_errors, 0.5);
        summary.q90_error = impl::quantile_of_sorted(summary.sorted_errors, 0.9);
        result.summaries.push_back(std::move(summary));
      }
      result.rows.insert(result.rows.end(), rows.begin(), rows.end());
      ++cell_index;
    }
  }
  return result;
}

/// Reconstruction error as a function of the true weights for a fixed
/// matrix (n = 3 only): per lattice point of the ordered simplex, draw
/// noisy data and reconstruct with the descent solver.
struct ErrorMap {
  double gamma = 0.0;
  std::vector<std::array<double, 4>> rows;  // w1, w2, w3, error
};

inline std::vector<ErrorMap> error_map(const StrainMatrix& truth_matrix,
                                       const std::vector<double>& noise_levels,
                                       int resolution, std::uint64_t rng_seed,
                                       const bcd::BcdConfig& config = {},
                                       int threads = 0) {
  const ProblemDims& dims = truth_matrix.dims();
  if (dims.strains != 3)
    throw UnsupportedDimsError("error_map requires n = 3");
  if (resolution < 1) throw ShapeError("error_map: resolution >= 1");

  std::vector<Vector> grid;
  for (int a = 0; a <= resolution; ++a)
    for (int b = 0; b <= resolution - a; ++b) {
      int c = resolution - a - b;
      if (a < b || b < c) continue;
      Vector w(3);
      w << static_cast<double>(a) / resolution,
          static_cast<double>(b) / resolution,
          static_cast<double>(c) / resolution;
      grid.push_back(std::move(w));
    }

  std::vector<ErrorMap> maps;
  for (std::size_t level = 0; level < noise_levels.size(); ++level) {
    const double gamma = noise_levels[level];
    NoiseModel noise = NoiseModel::uniform(gamma, dims.rows());
    ErrorMap map;
    map.gamma = gamma;
    map.rows.resize(grid.size());
    detail::parallel_for(
        static_cast<int>(grid.size()),
        [&](int g) {
          const Vector& w = grid[static_cast<std::size_t>(g)];
          FrequencyVector truth_w = FrequencyVector::from_values(w);
          std::uint64_t point_seed = detail::derive_seed(
              rng_seed, 0xe77 + static_cast<std::uint64_t>(level),
              static_cast<std::uint64_t>(g));
          Measurement data = add_noise(dims, forward(truth_matrix, truth_w),
                                       noise, point_seed);
          bcd::BcdConfig cfg = config;
          cfg.rng_seed = detail::derive_seed(point_seed, 0x8cdu);
          cfg.threads = 1;
          Reconstruction est = bcd::map_estimate(data, noise, dims, cfg).best();
          map.rows[static_cast<std::size_t>(g)] = {
              w[0], w[1], w[2],
              recon_error(truth_matrix, truth_w, est.matrix, est.weights)};
        },
        threads);
    maps.push_back(std::move(map));
  }
  return maps;
}

}  // namespace strainsolve::eval
