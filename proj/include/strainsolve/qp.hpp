#pragma once

// Convex quadratic programming over the weight simplex. The primal
// active-set engine below also serves the branch-and-bound relaxations,
// which add general linear inequalities; the public SimplexQP surface
// is restricted to box bounds plus one equality.

#include "strainsolve/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace strainsolve::qp {

struct ConvergenceReport {
  bool converged = false;
  int iterations = 0;
  double stationarity = std::numeric_limits<double>::infinity();
  double feasibility = std::numeric_limits<double>::infinity();
  double complementarity = std::numeric_limits<double>::infinity();
};

/// Linear constraints for the active-set engine: eq_coeffs * x = eq_rhs
/// and in_coeffs * x <= in_rhs. Either block may be empty.
struct LinearConstraints {
  Matrix eq_coeffs;
  Vector eq_rhs;
  Matrix in_coeffs;
  Vector in_rhs;
};

struct ActiveSetOptions {
  int max_iters = 200;
  double tol = 1e-10;
  double ridge = 1e-12;
  // Seed the working set with constraints that are tight at the start
  // point. Cold starts converge in far fewer iterations when the start
  // sits on the optimal face, which warm-started relaxations mostly do.
  bool bind_tight_start = false;
};

struct ActiveSetSolution {
  Vector x;
  Vector eq_multipliers;
  Vector in_multipliers;  // full inequality length; zero off the working set
  double objective = 0.0;         // 1/2 x'Hx + g'x with the caller's H
  double ridged_objective = 0.0;  // same with the ridge term included
  ConvergenceReport report;
};

namespace detail {

// Solves the KKT system [H A'; A 0] [p; lambda] = rhs. Partial-pivot LU
// first; rank-revealing fallbacks cover working sets that have gone
// numerically dependent (duplicate strain columns, degenerate vertices).
inline bool solve_kkt(const Matrix& kkt, const Vector& rhs, Vector& sol) {
  const double scale = std::max(1.0, rhs.lpNorm<Eigen::Infinity>());
  sol = Eigen::PartialPivLU<Matrix>(kkt).solve(rhs);
  if ((kkt * sol - rhs).lpNorm<Eigen::Infinity>() <= 1e-8 * scale) return true;
  sol = Eigen::FullPivLU<Matrix>(kkt).solve(rhs);
  if ((kkt * sol - rhs).lpNorm<Eigen::Infinity>() <= 1e-8 * scale) return true;
  sol = Eigen::CompleteOrthogonalDecomposition<Matrix>(kkt).solve(rhs);
  return (kkt * sol - rhs).lpNorm<Eigen::Infinity>() <= 1e-6 * scale;
}

}  // namespace detail

/// Primal active-set method for convex QP: minimize 1/2 x'Hx + g'x
/// subject to the given linear constraints, starting from a feasible
/// point. Anti-cycling uses Bland's smallest-index rule for both the
/// blocking and the dropped constraint. Returns a KKT point on
/// convergence; on iteration exhaustion the best iterate is returned
/// with report.converged = false.
inline ActiveSetSolution solve_active_set(const Matrix& hessian,
                                          const Vector& gradient,
                                          const LinearConstraints& constraints,
                                          const Vector& start,
                                          const ActiveSetOptions& opts = {}) {
  const int nv = static_cast<int>(start.size());
  const int ne = static_cast<int>(constraints.eq_coeffs.rows());
  const int ni = static_cast<int>(constraints.in_coeffs.rows());
  if (hessian.rows() != nv || hessian.cols() != nv || gradient.size() != nv)
    throw ShapeError("active set: hessian/gradient size mismatch");
  if ((ne > 0 && constraints.eq_coeffs.cols() != nv) ||
      (ni > 0 && constraints.in_coeffs.cols() != nv))
    throw ShapeError("active set: constraint width mismatch");

  constexpr double kFeasTol = 1e-9;
  for (int r = 0; r < ne; ++r) {
    double gap = std::abs(constraints.eq_coeffs.row(r).dot(start) -
                          constraints.eq_rhs[r]);
    if (gap > kFeasTol)
      throw FeasibilityError("active set: start violates equality row " +
                             std::to_string(r) + " by " + std::to_string(gap));
  }
  for (int r = 0; r < ni; ++r) {
    double viol = constraints.in_coeffs.row(r).dot(start) -
                  constraints.in_rhs[r];
    if (viol > kFeasTol)
      throw FeasibilityError("active set: start violates inequality row " +
                             std::to_string(r) + " by " + std::to_string(viol));
  }

  Matrix h = hessian;
  h.diagonal().array() += opts.ridge;
  // Solve a unit-scale copy; tolerances below refer to the scaled problem.
  const double scale = std::max({1.0, h.lpNorm<Eigen::Infinity>(),
                                 gradient.lpNorm<Eigen::Infinity>()});
  const Matrix hs = h / scale;
  const Vector gs = gradient / scale;

  Vector x = start;
  std::vector<int> working;  // active inequality rows, ascending
  std::vector<char> in_working(static_cast<std::size_t>(ni), 0);
  if (opts.bind_tight_start) {
    // Seed only rows with pairwise-disjoint supports: guaranteed
    // independent, so the first KKT solves cannot thrash on a dependent
    // seeded set at degenerate warm points.
    std::vector<char> covered(static_cast<std::size_t>(nv), 0);
    for (int r = 0; r < ni && static_cast<int>(working.size()) < nv - ne; ++r) {
      double slack = constraints.in_rhs[r] - constraints.in_coeffs.row(r).dot(x);
      if (std::abs(slack) > 1e-11) continue;
      bool overlap = false;
      for (int c = 0; c < nv && !overlap; ++c)
        if (constraints.in_coeffs(r, c) != 0.0 &&
            covered[static_cast<std::size_t>(c)])
          overlap = true;
      if (overlap) continue;
      for (int c = 0; c < nv; ++c)
        if (constraints.in_coeffs(r, c) != 0.0)
          covered[static_cast<std::size_t>(c)] = 1;
      working.push_back(r);
      in_working[static_cast<std::size_t>(r)] = 1;
    }
  }

  ActiveSetSolution out;
  out.in_multipliers = Vector::Zero(ni);
  out.eq_multipliers = Vector::Zero(ne);

  Vector sol, lambda_in;
  int iter = 0;
  int stalled = 0;
  bool converged = false;
  for (; iter < opts.max_iters; ++iter) {
    const int na = ne + static_cast<int>(working.size());
    Matrix kkt = Matrix::Zero(nv + na, nv + na);
    kkt.topLeftCorner(nv, nv) = hs;
    for (int r = 0; r < ne; ++r) {
      kkt.block(nv + r, 0, 1, nv) = constraints.eq_coeffs.row(r);
      kkt.block(0, nv + r, nv, 1) = constraints.eq_coeffs.row(r).transpose();
    }
    for (std::size_t wi = 0; wi < working.size(); ++wi) {
      int r = working[wi];
      int row = nv + ne + static_cast<int>(wi);
      kkt.block(row, 0, 1, nv) = constraints.in_coeffs.row(r);
      kkt.block(0, row, nv, 1) = constraints.in_coeffs.row(r).transpose();
    }
    Vector grad = hs * x + gs;
    Vector rhs = Vector::Zero(nv + na);
    rhs.head(nv) = -grad;
    if (!detail::solve_kkt(kkt, rhs, sol)) {
      // Dependent working set beyond the fallbacks' tolerance: drop the
      // most recently added row and retry next iteration.
      if (!working.empty()) {
        in_working[static_cast<std::size_t>(working.back())] = 0;
        working.pop_back();
        continue;
      }
      break;
    }
    // Stationarity reads hs*p + A'*lambda = -grad, so sol.tail holds the
    // multipliers with the KKT sign convention (lambda >= 0 at optimality
    // for <= rows).
    Vector p = sol.head(nv);
    Vector lambda = sol.tail(na);

    if (p.lpNorm<Eigen::Infinity>() <=
        opts.tol * std::max(1.0, x.lpNorm<Eigen::Infinity>())) {
      // Stationary on the working set; check inequality multipliers.
      // Most-negative multiplier normally; strict smallest-index (Bland)
      // once degenerate steps stall, which breaks cycles.
      int drop = -1;
      if (stalled > 2 * (na + 1)) {
        for (std::size_t wi = 0; wi < working.size(); ++wi) {
          if (lambda[ne + static_cast<int>(wi)] < -opts.tol) {
            if (drop < 0 ||
                working[wi] < working[static_cast<std::size_t>(drop)])
              drop = static_cast<int>(wi);
          }
        }
      } else {
        double most_negative = -opts.tol;
        for (std::size_t wi = 0; wi < working.size(); ++wi) {
          double l = lambda[ne + static_cast<int>(wi)];
          if (l < most_negative) {
            most_negative = l;
            drop = static_cast<int>(wi);
          }
        }
      }
      if (drop < 0) {
        out.eq_multipliers = lambda.head(ne) * scale;
        for (std::size_t wi = 0; wi < working.size(); ++wi)
          out.in_multipliers[working[wi]] =
              std::max(0.0, lambda[ne + static_cast<int>(wi)]) * scale;
        converged = true;
        ++iter;
        break;
      }
      in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(drop)])] = 0;
      working.erase(working.begin() + drop);
      continue;
    }

    // Ratio test; smallest row index wins among equal blockers.
    double alpha = 1.0;
    int blocking = -1;
    for (int r = 0; r < ni; ++r) {
      if (in_working[static_cast<std::size_t>(r)]) continue;
      double dir = constraints.in_coeffs.row(r).dot(p);
      if (dir <= 1e-13 * std::max(1.0, p.lpNorm<Eigen::Infinity>())) continue;
      double slack = constraints.in_rhs[r] - constraints.in_coeffs.row(r).dot(x);
      double t = std::max(0.0, slack / dir);
      if (t < alpha - 1e-15) {
        alpha = t;
        blocking = r;
      }
    }
    stalled = alpha <= 1e-14 ? stalled + 1 : 0;
    x += alpha * p;
    if (blocking >= 0) {
      auto pos = std::lower_bound(working.begin(), working.end(), blocking);
      working.insert(pos, blocking);
      in_working[static_cast<std::size_t>(blocking)] = 1;
    }
  }

  out.x = x;
  out.objective = 0.5 * x.dot(hessian * x) + gradient.dot(x);
  out.ridged_objective = out.objective + 0.5 * opts.ridge * x.squaredNorm();
  out.report.converged = converged;
  out.report.iterations = iter;

  // Unscaled KKT residuals at the returned point.
  Vector resid = h * x + gradient;
  if (ne > 0) resid += constraints.eq_coeffs.transpose() * out.eq_multipliers;
  if (ni > 0) resid += constraints.in_coeffs.transpose() * out.in_multipliers;
  out.report.stationarity = resid.norm();
  double feas = 0.0;
  for (int r = 0; r < ne; ++r)
    feas = std::max(feas, std::abs(constraints.eq_coeffs.row(r).dot(x) -
                                   constraints.eq_rhs[r]));
  double compl_slack = 0.0;
  for (int r = 0; r < ni; ++r) {
    double slack = constraints.in_rhs[r] - constraints.in_coeffs.row(r).dot(x);
    feas = std::max(feas, -slack);
    compl_slack = std::max(compl_slack,
                           std::abs(out.in_multipliers[r]) * std::abs(slack) /
                               scale);
  }
  out.report.feasibility = feas;
  out.report.complementarity = compl_slack;
  return out;
}

/// Convex QP over a box plus a single linear equality: the w-update of
/// the block coordinate descent and every fully-fixed relaxation node.
struct SimplexQP {
  Matrix hessian;
  Vector gradient;
  Vector lower;
  Vector upper;
  Vector equality_coeffs;
  double equality_rhs = 0.0;

  SimplexQP(Matrix h, Vector g, Vector lo, Vector hi, Vector eq, double rhs)
      : hessian(std::move(h)),
        gradient(std::move(g)),
        lower(std::move(lo)),
        upper(std::move(hi)),
        equality_coeffs(std::move(eq)),
        equality_rhs(rhs) {
    const int n = static_cast<int>(hessian.rows());
    if (hessian.cols() != n || gradient.size() != n || lower.size() != n ||
        upper.size() != n || equality_coeffs.size() != n)
      throw ShapeError("SimplexQP: inconsistent sizes");
    const double hscale = std::max(1.0, hessian.lpNorm<Eigen::Infinity>());
    if ((hessian - hessian.transpose()).lpNorm<Eigen::Infinity>() >
        1e-12 * hscale)
      throw ShapeError("SimplexQP: hessian is not symmetric");
    hessian = 0.5 * (hessian + hessian.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(hessian,
                                              Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-10 * hscale)
      throw ShapeError("SimplexQP: hessian is not positive semidefinite");
  }
};

/// Active-set solve of a SimplexQP from a feasible start. A 1e-12 ridge
/// is added before factorization so rank-deficient Hessians (duplicate
/// strain columns) stay solvable; for singular PSD problems the
/// minimizer reached by the active-set path from `start` is returned.
inline std::pair<Vector, ConvergenceReport> solve_simplex_qp(
    const SimplexQP& problem, const Vector& start, int max_iters = 0,
    double tol = 1e-10) {
  const int n = static_cast<int>(problem.hessian.rows());
  if (start.size() != n) throw ShapeError("solve_simplex_qp: bad start size");
  if (max_iters <= 0) max_iters = 50 * n;

  LinearConstraints c;
  c.eq_coeffs = problem.equality_coeffs.transpose();
  c.eq_rhs = Vector::Constant(1, problem.equality_rhs);
  c.in_coeffs = Matrix::Zero(2 * n, n);
  c.in_rhs = Vector::Zero(2 * n);
  for (int i = 0; i < n; ++i) {
    c.in_coeffs(i, i) = -1.0;  // -x_i <= -lower_i
    c.in_rhs[i] = -problem.lower[i];
    c.in_coeffs(n + i, i) = 1.0;  // x_i <= upper_i
    c.in_rhs[n + i] = problem.upper[i];
  }

  ActiveSetOptions opts;
  opts.max_iters = max_iters;
  opts.tol = tol;
  opts.ridge = 1e-12;
  ActiveSetSolution sol =
      solve_active_set(problem.hessian, problem.gradient, c, start, opts);
  return {sol.x, sol.report};
}

/// Result of the weight update for a fixed strain matrix. The solution
/// is sorted descending to restore ordered-simplex membership;
/// `permutation[t]` is the pre-sort index of sorted entry t, and must
/// be applied to the matrix columns to keep the pair consistent.
struct WeightsUpdate {
  FrequencyVector weights;
  std::vector<int> permutation;
  bool unique_minimizer = true;  // rank(M) >= n-1 guarantees uniqueness
  ConvergenceReport report;
};

/// Minimizes the objective over the simplex for a fixed matrix: builds
/// the Newton-model QP (which is exact, since the objective is quadratic
/// in the weights), solves it over {0 <= w <= 1, sum w = 1}, iterates to
/// stationarity, then sorts descending and renormalizes.
inline WeightsUpdate solve_weights(const StrainMatrix& matrix,
                                   const Measurement& data,
                                   const NoiseModel& noise,
                                   const FrequencyVector& start) {
  if (!(matrix.dims() == data.dims()))
    throw ShapeError("solve_weights: matrix and measurement dims disagree");
  if (start.size() != matrix.cols())
    throw ShapeError("solve_weights: start has wrong length");
  const int n = matrix.cols();

  const Matrix& m = matrix.real();
  const Vector& inv_var = noise.inverse_variances();
  Matrix hessian = m.transpose() * inv_var.asDiagonal() * m;
  // Constant gradient of the half-objective in w-space.
  Vector lin = -(m.transpose() * inv_var.cwiseProduct(data.data()));

  Vector w = start.values();
  ConvergenceReport last;
  for (int pass = 0; pass < 4; ++pass) {
    SimplexQP qp(hessian, lin, Vector::Zero(n), Vector::Ones(n),
                 Vector::Ones(n), 1.0);
    auto [x, report] = solve_simplex_qp(qp, w, 50 * n, 1e-10);
    last = report;
    double step = (x - w).lpNorm<Eigen::Infinity>();
    w = x;
    if (step <= 1e-12) break;
  }

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int a, int b) { return w[a] > w[b]; });
  Vector sorted(n);
  for (int t = 0; t < n; ++t) sorted[t] = std::max(0.0, w[perm[t]]);

  WeightsUpdate out{FrequencyVector::from_values(sorted), std::move(perm),
                    true, last};
  if (n >= 2) {
    Eigen::ColPivHouseholderQR<Matrix> qr(m);
    out.unique_minimizer = qr.rank() >= n - 1;
  }
  return out;
}

}  // namespace strainsolve::qp
