#pragma once

// Multi-start block coordinate descent for MAP estimation: alternating
// exact per-site matrix updates (full enumeration of the block feasible
// set) with simplex-QP weight updates, run from several random starting
// weights. Also hosts the discrepancy-principle estimator for the
// number of strains and the common MAP backend dispatch.

#include "strainsolve/core.hpp"
#include "strainsolve/detail/parallel.hpp"
#include "strainsolve/detail/rng.hpp"
#include "strainsolve/miqp.hpp"
#include "strainsolve/posterior.hpp"
#include "strainsolve/qp.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace strainsolve::bcd {

struct BcdConfig {
  int n_trials = 20;
  double tol_w = 1e-3;
  int max_iters = 10;
  std::uint64_t rng_seed = 0;
  bool keep_all_modes = false;
  int threads = 0;

  void validate() const {
    if (n_trials < 1 || max_iters < 1 || !(tol_w > 0.0))
      throw ShapeError("BcdConfig requires n_trials >= 1, max_iters >= 1, "
                       "tol_w > 0");
  }
};

/// Exact matrix update for fixed weights. Site k gets the candidate
/// block minimizing its weighted residual; ties (within 1e-12 absolute)
/// go to the smallest candidate index and set the site's tie flag.
struct MatrixUpdate {
  StrainMatrix matrix;
  std::vector<bool> site_ties;
};

inline MatrixUpdate solve_matrix(const FrequencyVector& weights,
                                 const Measurement& data,
                                 const NoiseModel& noise) {
  const ProblemDims& dims = data.dims();
  if (weights.size() != dims.strains)
    throw ShapeError("solve_matrix: weight length != strain count");
  if (noise.size() != data.size())
    throw ShapeError("solve_matrix: noise length != measurement length");
  constexpr double kTieTol = 1e-12;

  const auto candidates =
      enumerate_block_candidates(dims.strains, dims.classes);
  const Matrix values = candidate_block_values(weights.values(), dims.classes);
  const long count = values.cols();
  const int br = dims.block_rows();

  BinaryMatrix bits(dims.rows(), dims.strains);
  std::vector<bool> ties(static_cast<std::size_t>(dims.sites), false);
  for (int k = 0; k < dims.sites; ++k) {
    auto d_block = data.block(k);
    auto iv = noise.block_inverse_variances(k, br);
    long best = 0;
    double best_res = std::numeric_limits<double>::infinity();
    for (long j = 0; j < count; ++j) {
      double acc = 0.0;
      for (int r = 0; r < br; ++r) {
        double resid = values(r, j) - d_block[r];
        acc += resid * resid * iv[r];
      }
      if (acc < best_res) {
        best_res = acc;
        best = j;
      }
    }
    int within = 0;
    for (long j = 0; j < count && within < 2; ++j) {
      double acc = 0.0;
      for (int r = 0; r < br; ++r) {
        double resid = values(r, j) - d_block[r];
        acc += resid * resid * iv[r];
      }
      if (acc <= best_res + kTieTol) ++within;
    }
    ties[static_cast<std::size_t>(k)] = within >= 2;
    bits.block(k * br, 0, br, dims.strains) =
        candidates[static_cast<std::size_t>(best)];
  }
  return {StrainMatrix(dims, std::move(bits)), std::move(ties)};
}

/// One terminal point of a descent trial.
struct Mode {
  Reconstruction estimate;
  int trial = 0;
  bool converged = false;
  int iterations = 0;
};

/// All modes found by the multi-start run. Unless keep_all_modes was
/// set, modes are deduplicated by (matrix, weights rounded to 1e-6) in
/// trial order; best_index attains the minimum objective, ties broken
/// by (objective, lexicographic matrix, trial index).
struct ModeSet {
  std::vector<Mode> modes;
  int best_index = 0;

  const Reconstruction& best() const {
    return modes[static_cast<std::size_t>(best_index)].estimate;
  }
};

namespace impl {

inline Mode run_trial(const Measurement& data, const NoiseModel& noise,
                      const ProblemDims& dims, const BcdConfig& config,
                      int trial) {
  const std::uint64_t seed =
      detail::derive_seed(config.rng_seed, 0xb1c0u, static_cast<std::uint64_t>(trial));
  FrequencyVector w = posterior::sample_weights_uniform(dims.strains, 1, seed)[0];

  std::optional<StrainMatrix> prev;
  std::optional<StrainMatrix> current;
  bool converged = false;
  int iterations = 0;
  for (int i = 1; i <= config.max_iters; ++i) {
    iterations = i;
    MatrixUpdate mu = solve_matrix(w, data, noise);
    qp::WeightsUpdate wu = qp::solve_weights(mu.matrix, data, noise, w);
    StrainMatrix updated = mu.matrix.with_permuted_columns(wu.permutation);
    double step = (wu.weights.values() - w.values()).norm();
    bool matrix_stagnant = i >= 2 && prev && *prev == updated;
    prev = updated;
    current = std::move(updated);
    w = wu.weights;
    if (matrix_stagnant && step < config.tol_w) {
      converged = true;
      break;
    }
  }
  double value = objective(*current, w, data, noise);
  return Mode{Reconstruction{*current, w, value, false, std::nullopt}, trial,
              converged, iterations};
}

inline std::string mode_key(const Reconstruction& r) {
  std::string key;
  const BinaryMatrix& bits = r.matrix.entries();
  key.reserve(static_cast<std::size_t>(bits.size()) +
              static_cast<std::size_t>(r.weights.size()) * 16);
  for (int i = 0; i < bits.rows(); ++i)
    for (int j = 0; j < bits.cols(); ++j)
      key.push_back(bits(i, j) ? '1' : '0');
  for (int t = 0; t < r.weights.size(); ++t) {
    key.push_back('|');
    key += std::to_string(std::llround(r.weights[t] * 1e6));
  }
  return key;
}

inline bool mode_before(const Mode& a, const Mode& b) {
  if (a.estimate.objective != b.estimate.objective)
    return a.estimate.objective < b.estimate.objective;
  if (a.estimate.matrix != b.estimate.matrix)
    return StrainMatrix::lex_less(a.estimate.matrix, b.estimate.matrix);
  return a.trial < b.trial;
}

}  // namespace impl

/// Algorithm-1 MAP estimation: n_trials independent descent trials from
/// uniform starting weights, each alternating matrix and weight updates
/// until the matrix stagnates and the weight step drops below tol_w (or
/// max_iters). Deterministic for a fixed rng_seed, independent of the
/// worker count.
inline ModeSet map_estimate(const Measurement& data, const NoiseModel& noise,
                            const ProblemDims& dims, const BcdConfig& config) {
  config.validate();
  if (!(dims == data.dims()))
    throw ShapeError("map_estimate: dims disagree with measurement");

  std::vector<std::optional<Mode>> trials(
      static_cast<std::size_t>(config.n_trials));
  detail::parallel_for(
      config.n_trials,
      [&](int t) {
        trials[static_cast<std::size_t>(t)] =
            impl::run_trial(data, noise, dims, config, t);
      },
      config.threads);

  ModeSet out;
  std::unordered_set<std::string> seen;
  for (int t = 0; t < config.n_trials; ++t) {
    Mode& mode = *trials[static_cast<std::size_t>(t)];
    if (!config.keep_all_modes) {
      std::string key = impl::mode_key(mode.estimate);
      if (!seen.insert(std::move(key)).second) continue;
    }
    out.modes.push_back(std::move(mode));
  }
  out.best_index = 0;
  for (std::size_t i = 1; i < out.modes.size(); ++i)
    if (impl::mode_before(out.modes[i],
                          out.modes[static_cast<std::size_t>(out.best_index)]))
      out.best_index = static_cast<int>(i);
  return out;
}

enum class Backend { bcd, global, hybrid };

inline const char* backend_name(Backend b) {
  switch (b) {
    case Backend::bcd: return "bcd";
    case Backend::global: return "global";
    case Backend::hybrid: return "hybrid";
  }
  return "?";
}

/// Single MAP estimate through the selected backend. hybrid runs the
/// descent first and hands its best mode to the global solver as the
/// starting incumbent.
inline Reconstruction solve_map(const Measurement& data, const NoiseModel& noise,
                                const ProblemDims& dims, Backend backend,
                                const BcdConfig& config, double mip_gap = 1e-6,
                                long node_limit = 1000000) {
  switch (backend) {
    case Backend::bcd:
      return map_estimate(data, noise, dims, config).best();
    case Backend::global:
      return miqp::solve_global(data, noise, dims, mip_gap, node_limit)
          .incumbent;
    case Backend::hybrid: {
      Reconstruction warm = map_estimate(data, noise, dims, config).best();
      return miqp::solve_global(data, noise, dims, mip_gap, node_limit, warm)
          .incumbent;
    }
  }
  throw Error("solve_map: unknown backend");
}

/// Discrepancy-principle estimate of the number of strains: the MAP
/// residual is recomputed for n = 1, 2, ... until it drops below the
/// total noise energy sum_i gamma_i^2.
struct MoiEstimate {
  int strain_count = 0;
  std::vector<double> discrepancies;
  bool threshold_reached = false;
};

inline MoiEstimate estimate_moi(const Measurement& data,
                                const NoiseModel& noise, int sites, int classes,
                                int n_max, Backend backend,
                                const BcdConfig& config, double mip_gap = 1e-6,
                                long node_limit = 1000000) {
  if (n_max < 1) throw ShapeError("estimate_moi: n_max >= 1");
  if (sites * (classes - 1) != data.size())
    throw ShapeError("estimate_moi: m, p inconsistent with measurement length");
  const double threshold = noise.total_variance();
  MoiEstimate out;
  for (int n = 1; n <= n_max; ++n) {
    ProblemDims dims(sites, n, classes);
    Measurement sized(dims, data.data());
    BcdConfig cfg = config;
    cfg.rng_seed = detail::derive_seed(config.rng_seed, 0x301u,
                                       static_cast<std::uint64_t>(n));
    Reconstruction est =
        solve_map(sized, noise, dims, backend, cfg, mip_gap, node_limit);
    double discrepancy =
        (forward(est.matrix, est.weights) - data.data()).squaredNorm();
    out.discrepancies.push_back(discrepancy);
    out.strain_count = n;
    if (discrepancy <= threshold) {
      out.threshold_reached = true;
      return out;
    }
  }
  out.threshold_reached = false;
  return out;
}

}  // namespace strainsolve::bcd
