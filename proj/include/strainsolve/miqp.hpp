#pragma once

// Certified global MAP estimation. The bilinear products M_ij * w_j are
// replaced by auxiliary variables Z_ij constrained to the McCormick
// envelope, which is exact at binary M; branch-and-bound over the
// binary entries with convex QP relaxations closes the optimality gap.

#include "strainsolve/core.hpp"
#include "strainsolve/qp.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <unordered_set>
#include <vector>

namespace strainsolve::miqp {

/// The convex reformulation: objective sum_i (sum_j Z_ij - d_i)^2 /
/// gamma_i^2 with the four McCormick rows per (i,j), the block
/// column-sum rows, and the ordered-simplex rows on w. Feasible binary
/// points satisfy Z_ij = M_ij w_j exactly, so the objective agrees with
/// the original one there.
struct McCormickModel {
  ProblemDims dims;
  Measurement data;
  NoiseModel noise;

  McCormickModel(const ProblemDims& d, Measurement meas, NoiseModel nm)
      : dims(d), data(std::move(meas)), noise(std::move(nm)) {}

  long mccormick_inequality_count() const {
    return 4L * dims.rows() * dims.strains;
  }
  /// One group of column-sum constraints per site block (vacuous when
  /// p = 2, where a block has a single row).
  int block_constraint_count() const { return dims.sites; }
  int ordering_constraint_count() const { return dims.strains - 1; }

  /// Z implied by the envelope at a binary point: M_ij = 0 forces
  /// Z_ij = 0 and M_ij = 1 forces Z_ij = w_j.
  Matrix implied_z(const StrainMatrix& matrix, const FrequencyVector& w) const {
    Matrix z(dims.rows(), dims.strains);
    for (int i = 0; i < dims.rows(); ++i)
      for (int j = 0; j < dims.strains; ++j)
        z(i, j) = matrix.entries()(i, j) ? w[j] : 0.0;
    return z;
  }

  double objective_of_z(const Matrix& z) const {
    double acc = 0.0;
    for (int i = 0; i < dims.rows(); ++i) {
      double resid = z.row(i).sum() - data[i];
      acc += resid * resid * noise.inverse_variances()[i];
    }
    return acc;
  }

  double objective_at(const StrainMatrix& matrix, const FrequencyVector& w) const {
    return objective_of_z(implied_z(matrix, w));
  }

  /// Checks every constraint of the reformulation at a (possibly
  /// fractional) point, within tol.
  bool satisfies(const Matrix& m_relaxed, const Vector& w, const Matrix& z,
                 double tol = 1e-9) const {
    const int q = dims.rows();
    const int n = dims.strains;
    if (m_relaxed.rows() != q || m_relaxed.cols() != n || w.size() != n ||
        z.rows() != q || z.cols() != n)
      return false;
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < n; ++j) {
        double m = m_relaxed(i, j);
        if (m < -tol || m > 1.0 + tol) return false;
        if (z(i, j) < -tol) return false;
        if (z(i, j) > m + tol) return false;
        if (z(i, j) > w[j] + tol) return false;
        if (z(i, j) < m + w[j] - 1.0 - tol) return false;
      }
    const int br = dims.block_rows();
    for (int k = 0; k < dims.sites; ++k)
      for (int j = 0; j < n; ++j) {
        double sum = 0.0;
        for (int r = 0; r < br; ++r) sum += m_relaxed(k * br + r, j);
        if (sum > 1.0 + tol) return false;
      }
    if (std::abs(w.sum() - 1.0) > tol) return false;
    for (int j = 0; j + 1 < n; ++j)
      if (w[j + 1] > w[j] + tol) return false;
    if (w[n - 1] < -tol || w[0] > 1.0 + tol) return false;
    return true;
  }
};

inline McCormickModel build_mccormick(const Measurement& data,
                                      const NoiseModel& noise,
                                      const ProblemDims& dims) {
  if (!(dims == data.dims()))
    throw ShapeError("build_mccormick: dims disagree with measurement");
  if (noise.size() != data.size())
    throw ShapeError("build_mccormick: noise length != measurement length");
  return McCormickModel(dims, data, noise);
}

/// Partial assignment of the binary entries, row-major: -1 free, else 0/1.
using FixedAssignment = std::vector<std::int8_t>;

inline FixedAssignment all_free(const ProblemDims& dims) {
  return FixedAssignment(
      static_cast<std::size_t>(dims.rows()) *
          static_cast<std::size_t>(dims.strains),
      -1);
}

/// Minimizer of a node relaxation: weights, envelope variables, and a
/// feasible relaxed matrix attaining the same optimum (the branching
/// signal; fractional entries are recovered as Z_ij / w_j and rescaled
/// within block columns to respect the column-sum rows).
struct RelaxationPoint {
  Vector w;
  Matrix z;
  Matrix matrix;
};

struct RelaxationResult {
  bool feasible = false;
  double lower_bound = 0.0;
  RelaxationPoint point;
  qp::ConvergenceReport report;
};

namespace impl {

// Entry state for one node after propagating block-column consequences:
// a fixed one forces every other entry of its block column to zero.
struct NodePattern {
  std::vector<std::int8_t> state;  // 0, 1, or -1 (free), row-major
  std::vector<int> free_index;     // var index of each free entry, else -1
  std::vector<std::pair<int, int>> free_entries;  // (row, col) per free var
  bool consistent = true;
};

inline NodePattern propagate(const ProblemDims& dims,
                             const FixedAssignment& fixed) {
  const int q = dims.rows();
  const int n = dims.strains;
  const int br = dims.block_rows();
  NodePattern pat;
  pat.state.assign(fixed.begin(), fixed.end());
  if (static_cast<int>(fixed.size()) != q * n)
    throw ShapeError("fixed assignment has wrong length");
  for (int k = 0; k < dims.sites; ++k)
    for (int j = 0; j < n; ++j) {
      int ones = 0;
      for (int r = 0; r < br; ++r)
        if (fixed[static_cast<std::size_t>((k * br + r) * n + j)] == 1) ++ones;
      if (ones > 1) {
        pat.consistent = false;
        return pat;
      }
      if (ones == 1)
        for (int r = 0; r < br; ++r) {
          std::size_t e = static_cast<std::size_t>((k * br + r) * n + j);
          if (pat.state[e] == -1) pat.state[e] = 0;
        }
    }
  pat.free_index.assign(static_cast<std::size_t>(q) * n, -1);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < n; ++j) {
      std::size_t e = static_cast<std::size_t>(i * n + j);
      if (pat.state[e] == -1) {
        pat.free_index[e] = static_cast<int>(pat.free_entries.size());
        pat.free_entries.emplace_back(i, j);
      }
    }
  return pat;
}

}  // namespace impl

/// Solves the node's convex QP: the McCormick model with the assigned
/// entries fixed and the rest relaxed to [0,1]. The relaxed matrix is
/// eliminated exactly (it enters constraints only; its projection onto
/// (w, Z) is 0 <= Z_ij <= w_j plus per-block-column budgets), so the
/// value equals the full QP's optimum; a ridge-corrected valid lower
/// bound for every completion of `fixed` is returned alongside the
/// minimizer. An optional warm point (any relaxation point of an
/// ancestor node) seeds the active-set solve.
inline RelaxationResult solve_relaxation(const McCormickModel& model,
                                         const FixedAssignment& fixed,
                                         const RelaxationPoint* warm = nullptr) {
  const ProblemDims& dims = model.dims;
  const int q = dims.rows();
  const int n = dims.strains;
  const int br = dims.block_rows();

  impl::NodePattern pat = impl::propagate(dims, fixed);
  RelaxationResult out;
  if (!pat.consistent) return out;  // two ones in a block column: prune

  const int nfree = static_cast<int>(pat.free_entries.size());
  const int nvar = n + nfree;
  const Vector& iv = model.noise.inverse_variances();

  // Residual of row i: sum of w_j over fixed ones + sum of the row's
  // free Z - d_i. Assemble H = 2 T' D T, g = -2 T' D d, constant d' D d.
  Matrix hessian = Matrix::Zero(nvar, nvar);
  Vector gradient = Vector::Zero(nvar);
  double constant = 0.0;
  std::vector<int> row_vars;
  for (int i = 0; i < q; ++i) {
    row_vars.clear();
    for (int j = 0; j < n; ++j) {
      std::size_t e = static_cast<std::size_t>(i * n + j);
      if (pat.state[e] == 1) row_vars.push_back(j);
      else if (pat.state[e] == -1) row_vars.push_back(n + pat.free_index[e]);
    }
    const double weight = iv[i];
    for (int a : row_vars) {
      for (int b : row_vars) hessian(a, b) += 2.0 * weight;
      gradient[a] -= 2.0 * weight * model.data[i];
    }
    constant += weight * model.data[i] * model.data[i];
  }

  // Constraint rows in a fixed order (Bland's rule needs stable indices):
  // ordering chain, w_n >= 0, Z lower bounds, Z <= w couplings, budgets.
  std::vector<std::array<int, 2>> budget_cols;  // (site, col) with >= 2 free
  if (br > 1) {
    for (int k = 0; k < dims.sites; ++k)
      for (int j = 0; j < n; ++j) {
        int free_in_col = 0;
        for (int r = 0; r < br; ++r)
          if (pat.state[static_cast<std::size_t>((k * br + r) * n + j)] == -1)
            ++free_in_col;
        if (free_in_col >= 2) budget_cols.push_back({k, j});
      }
  }
  const int n_ineq = (n - 1) + 1 + 2 * nfree +
                     static_cast<int>(budget_cols.size());
  qp::LinearConstraints cons;
  cons.eq_coeffs = Matrix::Zero(1, nvar);
  cons.eq_coeffs.block(0, 0, 1, n).setOnes();
  cons.eq_rhs = Vector::Constant(1, 1.0);
  cons.in_coeffs = Matrix::Zero(n_ineq, nvar);
  cons.in_rhs = Vector::Zero(n_ineq);
  int row = 0;
  for (int j = 0; j + 1 < n; ++j, ++row) {  // w_{j+1} <= w_j
    cons.in_coeffs(row, j) = -1.0;
    cons.in_coeffs(row, j + 1) = 1.0;
  }
  cons.in_coeffs(row, n - 1) = -1.0;  // w_n >= 0
  ++row;
  for (int f = 0; f < nfree; ++f, ++row) cons.in_coeffs(row, n + f) = -1.0;
  for (int f = 0; f < nfree; ++f, ++row) {
    cons.in_coeffs(row, n + f) = 1.0;
    cons.in_coeffs(row, pat.free_entries[static_cast<std::size_t>(f)].second) =
        -1.0;
  }
  for (const auto& bc : budget_cols) {
    for (int r = 0; r < br; ++r) {
      std::size_t e = static_cast<std::size_t>((bc[0] * br + r) * n + bc[1]);
      if (pat.state[e] == -1) cons.in_coeffs(row, n + pat.free_index[e]) = 1.0;
    }
    cons.in_rhs[row] = 1.0;
    ++row;
  }

  // Feasible start; a warm point only needs its w and free-entry Z.
  Vector start = Vector::Zero(nvar);
  if (warm && warm->w.size() == n) {
    Vector w = warm->w.cwiseMax(0.0).cwiseMin(1.0);
    double sum = w.sum();
    if (sum > 0.0) w /= sum;
    else w.setConstant(1.0 / n);
    for (int j = 1; j < n; ++j) w[j] = std::min(w[j], w[j - 1]);
    double drop = 1.0 - w.sum();
    w[0] += drop;  // re-normalization shifted mass; largest entry absorbs it
    start.head(n) = w;
    for (int f = 0; f < nfree; ++f) {
      auto [i, j] = pat.free_entries[static_cast<std::size_t>(f)];
      double z = warm->z.size() > 0 ? warm->z(i, j) : 0.0;
      start[n + f] = std::min(std::max(z, 0.0), w[j]);
    }
    for (const auto& bc : budget_cols) {
      double sum_z = 0.0;
      for (int r = 0; r < br; ++r) {
        std::size_t e = static_cast<std::size_t>((bc[0] * br + r) * n + bc[1]);
        if (pat.state[e] == -1) sum_z += start[n + pat.free_index[e]];
      }
      if (sum_z > 1.0) {
        double scale = 1.0 / sum_z;
        for (int r = 0; r < br; ++r) {
          std::size_t e = static_cast<std::size_t>((bc[0] * br + r) * n + bc[1]);
          if (pat.state[e] == -1) start[n + pat.free_index[e]] *= scale;
        }
      }
    }
  } else {
    for (int j = 0; j < n; ++j)
      start[j] = 2.0 * (n - j) / (static_cast<double>(n) * (n + 1));
  }

  qp::ActiveSetOptions opts;
  opts.max_iters = 40 * nvar + 100;
  opts.tol = 1e-11;
  opts.ridge = 1e-12 * std::max(1.0, hessian.lpNorm<Eigen::Infinity>());
  opts.bind_tight_start = true;
  qp::ActiveSetSolution sol =
      qp::solve_active_set(hessian, gradient, cons, start, opts);

  // Valid bound for every completion: subtract the ridge's maximal
  // contribution over the unit box and the measured KKT slack.
  const double value = sol.ridged_objective + constant;
  out.lower_bound = std::max(
      0.0, value - 0.5 * opts.ridge * nvar -
               sol.report.stationarity * std::sqrt(static_cast<double>(nvar)));
  out.report = sol.report;
  out.feasible = true;

  // Assemble the full-size point.
  Vector w = sol.x.head(n).cwiseMax(0.0).cwiseMin(1.0);
  Matrix z = Matrix::Zero(q, n);
  Matrix m_rel = Matrix::Zero(q, n);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < n; ++j) {
      std::size_t e = static_cast<std::size_t>(i * n + j);
      if (pat.state[e] == 1) {
        z(i, j) = w[j];
        m_rel(i, j) = 1.0;
      } else if (pat.state[e] == -1) {
        double zv = std::min(std::max(sol.x[n + pat.free_index[e]], 0.0), w[j]);
        z(i, j) = zv;
        m_rel(i, j) = w[j] > 1e-12 ? std::min(1.0, zv / w[j]) : 0.0;
      }
    }
  // Rescale free fractional entries so block column sums stay <= 1
  // (possible because sum of Z over a feasible column is <= 1).
  if (br > 1) {
    for (int k = 0; k < dims.sites; ++k)
      for (int j = 0; j < n; ++j) {
        double sum_m = 0.0, sum_z = 0.0;
        bool any_free = false;
        for (int r = 0; r < br; ++r) {
          std::size_t e = static_cast<std::size_t>((k * br + r) * n + j);
          if (pat.state[e] == -1) {
            any_free = true;
            sum_m += m_rel(k * br + r, j);
            sum_z += z(k * br + r, j);
          }
        }
        if (!any_free || sum_m <= 1.0) continue;
        double t = sum_m > sum_z ? (1.0 - sum_z) / (sum_m - sum_z) : 0.0;
        for (int r = 0; r < br; ++r) {
          std::size_t e = static_cast<std::size_t>((k * br + r) * n + j);
          if (pat.state[e] == -1) {
            int i = k * br + r;
            m_rel(i, j) = z(i, j) + t * (m_rel(i, j) - z(i, j));
          }
        }
      }
  }
  out.point = RelaxationPoint{std::move(w), std::move(z), std::move(m_rel)};
  return out;
}

/// One search-tree node: a partial assignment, the bound its relaxation
/// certified for the subtree, and the relaxation's minimizer.
struct BnbNode {
  FixedAssignment fixed;
  double lower_bound = 0.0;
  RelaxationPoint relaxation;
};

struct GlobalSolveReport {
  Reconstruction incumbent;
  long nodes_explored = 0;
  double final_gap = 0.0;
  double wall_time_seconds = 0.0;
};

namespace impl {

inline std::string matrix_key(const BinaryMatrix& bits) {
  std::string key(static_cast<std::size_t>(bits.size()), '0');
  std::size_t pos = 0;
  for (int i = 0; i < bits.rows(); ++i)
    for (int j = 0; j < bits.cols(); ++j)
      key[pos++] = bits(i, j) ? '1' : '0';
  return key;
}

// Exact per-site update at the relaxation's weights: the strongest
// rounding of a relaxation point, and what keeps node-capped runs near
// the optimum.
inline BinaryMatrix best_response_matrix(const Vector& w,
                                         const Measurement& data,
                                         const NoiseModel& noise) {
  const ProblemDims& dims = data.dims();
  const int br = dims.block_rows();
  Vector wc = w.cwiseMax(0.0);
  const auto candidates = enumerate_block_candidates(dims.strains, dims.classes);
  const Matrix values = candidate_block_values(wc, dims.classes);
  BinaryMatrix bits(dims.rows(), dims.strains);
  for (int k = 0; k < dims.sites; ++k) {
    auto d_block = data.block(k);
    auto iv = noise.block_inverse_variances(k, br);
    long best = 0;
    double best_res = std::numeric_limits<double>::infinity();
    for (long j = 0; j < values.cols(); ++j) {
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
    bits.block(k * br, 0, br, dims.strains) =
        candidates[static_cast<std::size_t>(best)];
  }
  return bits;
}

inline bool site_is_free(const FixedAssignment& fixed, const ProblemDims& dims,
                         int site) {
  const int br = dims.block_rows();
  for (int r = 0; r < br; ++r)
    for (int j = 0; j < dims.strains; ++j)
      if (fixed[static_cast<std::size_t>((site * br + r) * dims.strains + j)] !=
          -1)
        return false;
  return true;
}

// Threshold rounding with block-column repair: within each block column
// keep the largest fractional entry (smallest row on ties), drop the rest.
inline BinaryMatrix round_with_repair(const Matrix& m_frac,
                                      const ProblemDims& dims) {
  const int br = dims.block_rows();
  const int n = dims.strains;
  BinaryMatrix bits(dims.rows(), n);
  for (int i = 0; i < dims.rows(); ++i)
    for (int j = 0; j < n; ++j) bits(i, j) = m_frac(i, j) >= 0.5 ? 1 : 0;
  for (int k = 0; k < dims.sites; ++k)
    for (int j = 0; j < n; ++j) {
      int ones = 0;
      for (int r = 0; r < br; ++r) ones += bits(k * br + r, j);
      if (ones <= 1) continue;
      int keep = -1;
      double best = -1.0;
      for (int r = 0; r < br; ++r)
        if (bits(k * br + r, j) && m_frac(k * br + r, j) > best) {
          best = m_frac(k * br + r, j);
          keep = r;
        }
      for (int r = 0; r < br; ++r)
        if (r != keep) bits(k * br + r, j) = 0;
    }
  return bits;
}

}  // namespace impl

/// Best-first branch-and-bound on the McCormick model. Nodes are
/// expanded by smallest lower bound; branching fixes the most
/// fractional relaxed entry (ties resolved lexicographically by (i,j)).
/// Incumbents come from rounding relaxation points (with block-column
/// repair) followed by an exact weight solve. Terminates when the
/// relative gap reaches mip_gap (certified) or node_limit is exhausted.
inline GlobalSolveReport solve_global(
    const Measurement& data, const NoiseModel& noise, const ProblemDims& dims,
    double mip_gap = 1e-6, long node_limit = 1000000,
    const std::optional<Reconstruction>& warm_start = std::nullopt) {
  if (!(mip_gap > 0.0)) throw ShapeError("solve_global: mip_gap must be > 0");
  if (node_limit < 1) throw ShapeError("solve_global: node_limit must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  McCormickModel model = build_mccormick(data, noise, dims);
  const int n = dims.strains;

  // Per-site, per-candidate residual floors over the whole ordered
  // simplex. A candidate's row value sum_{j in S} w_j is linear, so its
  // exact range comes from the simplex vertices (1/r, ..., 1/r, 0, ...).
  // floor(k,c) bounds site k's residual below for ANY weights once the
  // site uses candidate c; forced(k) is the part already counted by a
  // relaxation in which the site is fully free (row range [0,1]).
  const auto candidates = enumerate_block_candidates(n, dims.classes);
  const long candidate_count = static_cast<long>(candidates.size());
  const int block_rows = dims.block_rows();
  Matrix row_lo(candidate_count, block_rows), row_hi(candidate_count, block_rows);
  for (long c = 0; c < candidate_count; ++c) {
    const BinaryMatrix& block = candidates[static_cast<std::size_t>(c)];
    for (int r = 0; r < block_rows; ++r) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      int prefix = 0;
      for (int v = 1; v <= n; ++v) {
        prefix += block(r, v - 1);
        double value = static_cast<double>(prefix) / v;
        lo = std::min(lo, value);
        hi = std::max(hi, value);
      }
      row_lo(c, r) = lo;
      row_hi(c, r) = hi;
    }
  }
  Matrix site_floor(dims.sites, candidate_count);
  Vector site_forced(dims.sites);
  for (int k = 0; k < dims.sites; ++k) {
    auto d_block = data.block(k);
    auto iv = noise.block_inverse_variances(k, block_rows);
    double forced = 0.0;
    for (int r = 0; r < block_rows; ++r) {
      double outside = std::max({0.0, d_block[r] - 1.0, -d_block[r]});
      forced += outside * outside * iv[r];
    }
    site_forced[k] = forced;
    for (long c = 0; c < candidate_count; ++c) {
      double acc = 0.0;
      for (int r = 0; r < block_rows; ++r) {
        double gap_below = row_lo(c, r) - d_block[r];
        double gap_above = d_block[r] - row_hi(c, r);
        double dist = std::max({0.0, gap_below, gap_above});
        acc += dist * dist * iv[r];
      }
      site_floor(k, c) = acc;
    }
  }

  double upper = std::numeric_limits<double>::infinity();
  std::optional<Reconstruction> incumbent;
  std::unordered_set<std::string> tried;

  // Exact weight solve for a rounded matrix, then a few best-response
  // alternations: relaxation points deep in a wrong subtree still tend
  // to polish into strong incumbents, which is what prunes the frontier.
  auto offer = [&](BinaryMatrix bits, const Vector& w_hint) {
    Vector hint = w_hint.cwiseMax(0.0);
    if (!(hint.sum() > 0.0)) hint = Vector::Ones(n);
    FrequencyVector weights = FrequencyVector::sorted_from(hint);
    for (int round = 0; round < 4; ++round) {
      std::string key = impl::matrix_key(bits);
      if (!tried.insert(std::move(key)).second) break;
      StrainMatrix matrix(dims, bits);
      qp::WeightsUpdate wu = qp::solve_weights(matrix, data, noise, weights);
      StrainMatrix permuted = matrix.with_permuted_columns(wu.permutation);
      double value = objective(permuted, wu.weights, data, noise);
      weights = wu.weights;
      if (value < upper) {
        upper = value;
        incumbent = Reconstruction{permuted, wu.weights, value, false,
                                   std::nullopt};
      }
      BinaryMatrix next =
          impl::best_response_matrix(weights.values(), data, noise);
      if (next == permuted.entries()) break;  // alternation reached a mode
      bits = std::move(next);
    }
  };

  if (warm_start)
    offer(warm_start->matrix.entries(), warm_start->weights.values());

  auto gap_of = [&](double lower) {
    if (!std::isfinite(upper)) return std::numeric_limits<double>::infinity();
    return std::max(0.0, (upper - std::min(lower, upper)) /
                             std::max(1e-10, std::abs(upper)));
  };

  struct HeapEntry {
    double lower_bound;
    long id;
  };
  // Best-first by bound; ties go to the youngest node, so equal-bound
  // regions are explored by diving (matters under node limits, where the
  // deep roundings supply the incumbents).
  auto heap_after = [](const HeapEntry& a, const HeapEntry& b) {
    if (a.lower_bound != b.lower_bound) return a.lower_bound > b.lower_bound;
    return a.id < b.id;
  };
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, decltype(heap_after)>
      heap(heap_after);
  std::vector<BnbNode> nodes;
  long next_id = 0;

  RelaxationResult root = solve_relaxation(model, all_free(dims));
  nodes.push_back(BnbNode{all_free(dims), root.lower_bound,
                          std::move(root.point)});
  heap.push({nodes[0].lower_bound, next_id++});

  long explored = 0;
  double final_lower = root.lower_bound;
  bool budget_exhausted = false;
  while (!heap.empty()) {
    HeapEntry top = heap.top();
    heap.pop();
    BnbNode node = std::move(nodes[static_cast<std::size_t>(top.id)]);
    final_lower = std::min(top.lower_bound, upper);
    if (gap_of(top.lower_bound) <= mip_gap) break;
    if (explored >= node_limit) {
      budget_exhausted = true;
      break;
    }
    ++explored;

#ifdef STRAINSOLVE_BNB_TRACE
    if (explored % 500 == 1)
      std::fprintf(stderr, "[bnb] nodes=%ld lb=%.6g ub=%.6g heap=%zu\n",
                   explored, top.lower_bound, upper, heap.size());
#endif
    offer(impl::round_with_repair(node.relaxation.matrix, dims),
          node.relaxation.w);
    offer(impl::best_response_matrix(node.relaxation.w, data, noise),
          node.relaxation.w);
    if (gap_of(top.lower_bound) <= mip_gap) {
      final_lower = std::min(top.lower_bound, upper);
      break;
    }

    // Branching completes one site block before opening another (a
    // fully fixed site contributes its residual to every descendant's
    // relaxation, which is what makes the bounds climb). A fresh site
    // is opened only when none is partially fixed, choosing the free
    // site with the fewest candidates surviving the interval floor:
    // discriminating sites first keeps the frontier narrow. Inside the
    // chosen site the most fractional entry is branched 0/1, so the
    // relaxation prunes partial candidate combinations lazily.
    // Only entries that are genuinely fractional in the relaxation are
    // branchable: integral free entries (e.g. a whole column at a
    // zero-weight strain) are exact ties the rounding already resolves,
    // and splitting them just replays the same subtree.
    const double prune_slack = upper * (1.0 + 10.0 * mip_gap) + 1e-9;
    const int br = dims.block_rows();
    auto is_fractional = [&](int i, int j) {
      if (node.fixed[static_cast<std::size_t>(i * n + j)] != -1) return false;
      double v = node.relaxation.matrix(i, j);
      return std::abs(v - std::round(v)) > 1e-9;
    };
    int branch_site = -1;
    {
      int fewest_free = std::numeric_limits<int>::max();
      for (int k = 0; k < dims.sites; ++k) {
        int free_count = 0, fixed_count = 0;
        bool fractional = false;
        for (int r = 0; r < br; ++r)
          for (int j = 0; j < n; ++j) {
            if (node.fixed[static_cast<std::size_t>((k * br + r) * n + j)] == -1)
              ++free_count;
            else
              ++fixed_count;
            fractional = fractional || is_fractional(k * br + r, j);
          }
        if (fixed_count > 0 && fractional && free_count < fewest_free) {
          fewest_free = free_count;
          branch_site = k;
        }
      }
    }
    if (branch_site < 0) {
      long fewest_alive = std::numeric_limits<long>::max();
      for (int k = 0; k < dims.sites; ++k) {
        if (!impl::site_is_free(node.fixed, dims, k)) continue;
        bool fractional = false;
        for (int r = 0; r < br && !fractional; ++r)
          for (int j = 0; j < n && !fractional; ++j)
            fractional = is_fractional(k * br + r, j);
        if (!fractional) continue;
        long alive = 0;
        for (long c = 0; c < candidate_count; ++c)
          if (node.lower_bound - site_forced[k] + site_floor(k, c) <=
              prune_slack)
            ++alive;
        if (alive < fewest_alive) {
          fewest_alive = alive;
          branch_site = k;
        }
      }
    }

    int bi = -1, bj = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    if (branch_site >= 0) {
      for (int r = 0; r < br; ++r)
        for (int j = 0; j < n; ++j) {
          int i = branch_site * br + r;
          if (!is_fractional(i, j)) continue;
          double dist = std::abs(node.relaxation.matrix(i, j) - 0.5);
          if (dist < best_dist - 1e-15) {
            best_dist = dist;
            bi = i;
            bj = j;
          }
        }
    } else {
      // No site qualifies; take the most fractional entry anywhere.
      for (int i = 0; i < dims.rows(); ++i)
        for (int j = 0; j < n; ++j) {
          if (!is_fractional(i, j)) continue;
          double dist = std::abs(node.relaxation.matrix(i, j) - 0.5);
          if (dist < best_dist - 1e-15) {
            best_dist = dist;
            bi = i;
            bj = j;
          }
        }
    }
    // Fully integral relaxation: the rounding above evaluated this very
    // point exactly, so the node is resolved.
    if (bi < 0) continue;

    for (int value = 0; value <= 1; ++value) {
      FixedAssignment child = node.fixed;
      child[static_cast<std::size_t>(bi * n + bj)] =
          static_cast<std::int8_t>(value);
      RelaxationResult res = solve_relaxation(model, child, &node.relaxation);
      if (!res.feasible) continue;
      double lb = std::max(res.lower_bound, node.lower_bound);
      if (gap_of(lb) <= mip_gap) continue;  // cannot improve enough
      long id = next_id++;
      nodes.push_back(BnbNode{std::move(child), lb, std::move(res.point)});
      heap.push({lb, id});
    }
  }
  if (heap.empty() && !budget_exhausted) final_lower = upper;

  if (!incumbent) offer(BinaryMatrix::Zero(dims.rows(), n), Vector::Ones(n));

  GlobalSolveReport report{*incumbent, explored, gap_of(final_lower), 0.0};
  report.incumbent.certified = report.final_gap <= mip_gap;
  report.incumbent.gap = report.final_gap;
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

}  // namespace strainsolve::miqp
