#include "strainsolve/qp.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace strainsolve;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<long>(values.size()));
  long i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

StrainMatrix paper_matrix() {
  ProblemDims dims(3, 2, 2);
  BinaryMatrix bits(3, 2);
  bits << 0, 1, 1, 0, 1, 1;
  return StrainMatrix(dims, bits);
}

double simplex_objective(const qp::SimplexQP& problem, const Vector& x) {
  return 0.5 * x.dot(problem.hessian * x) + problem.gradient.dot(x);
}

// 1e-4-spaced scan of the n=2 simplex segment for a fixed matrix.
double grid_scan_objective(const StrainMatrix& m, const Measurement& d,
                           const NoiseModel& noise) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 10000; ++i) {
    double t = static_cast<double>(i) / 10000.0;
    Vector w = vec({t, 1.0 - t});
    Vector resid = m.real() * w - d.data();
    best = std::min(best,
                    resid.cwiseProduct(resid).dot(noise.inverse_variances()));
  }
  return best;
}

}  // namespace

TEST_CASE("step QP with zero gradient keeps the start") {
  // The delta formulation: H = I, g = 0, steps sum to zero.
  int n = 3;
  qp::SimplexQP problem(Matrix::Identity(n, n), Vector::Zero(n),
                        Vector::Constant(n, -0.5), Vector::Constant(n, 0.5),
                        Vector::Ones(n), 0.0);
  auto [x, report] = qp::solve_simplex_qp(problem, Vector::Zero(n));
  CHECK(report.converged);
  CHECK(x.lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("interior minimizer matches the equality KKT solve") {
  // n = 2, minimizer strictly inside the box: only the equality is
  // active, so the 3x3 KKT system gives the exact answer.
  Matrix h(2, 2);
  h << 2.0, 0.3, 0.3, 1.0;
  Vector g = vec({-1.0, -0.7});
  qp::SimplexQP problem(h, g, Vector::Zero(2), Vector::Ones(2),
                        Vector::Ones(2), 1.0);
  Matrix kkt(3, 3);
  kkt << h(0, 0), h(0, 1), 1.0, h(1, 0), h(1, 1), 1.0, 1.0, 1.0, 0.0;
  Vector rhs = vec({1.0, 0.7, 1.0});
  Vector sol = kkt.partialPivLu().solve(rhs);

  auto [x, report] = qp::solve_simplex_qp(problem, vec({0.5, 0.5}));
  CHECK(report.converged);
  CHECK(x[0] == Catch::Approx(sol[0]).margin(1e-10));
  CHECK(x[1] == Catch::Approx(sol[1]).margin(1e-10));
  CHECK(report.stationarity < 1e-8);
  CHECK(report.feasibility < 1e-9);
}

TEST_CASE("paper instance: weights recovered over the simplex") {
  StrainMatrix m = paper_matrix();
  Measurement d(m.dims(), vec({0.4, 0.6, 1.0}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  auto result = qp::solve_weights(m, d, noise,
                                  FrequencyVector::from_values(vec({0.5, 0.5})));
  CHECK(result.weights[0] == Catch::Approx(0.6).margin(1e-8));
  CHECK(result.weights[1] == Catch::Approx(0.4).margin(1e-8));
  CHECK(result.unique_minimizer);
  CHECK(objective(m.with_permuted_columns(result.permutation), result.weights,
                  d, noise) < 1e-12);
}

TEST_CASE("weights update sorts descending and permutes the matrix") {
  // Data generated so the better-supported strain is the second column.
  ProblemDims dims(3, 2, 2);
  BinaryMatrix bits(3, 2);
  bits << 1, 0, 0, 1, 1, 1;
  StrainMatrix m(dims, bits);
  Vector w_true = vec({0.3, 0.7});  // deliberately unsorted w.r.t. columns
  Measurement d(dims, m.real() * w_true);
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  auto result = qp::solve_weights(m, d, noise,
                                  FrequencyVector::from_values(vec({0.5, 0.5})));
  CHECK(result.weights[0] == Catch::Approx(0.7).margin(1e-8));
  CHECK(result.weights[1] == Catch::Approx(0.3).margin(1e-8));
  StrainMatrix permuted = m.with_permuted_columns(result.permutation);
  CHECK(objective(permuted, result.weights, d, noise) < 1e-12);
  CHECK(permuted.entries()(0, 1) == 1);  // original first column moved right
}

TEST_CASE("rank n-1 with exact data still reaches objective zero") {
  ProblemDims dims(4, 3, 2);
  BinaryMatrix bits(4, 3);
  bits << 1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 0, 0;  // third strain all-reference
  StrainMatrix m(dims, bits);
  Vector w_true = vec({0.5, 0.3, 0.2});
  Measurement d(dims, m.real() * w_true);
  NoiseModel noise = NoiseModel::uniform(1e-2, 4);
  auto result = qp::solve_weights(m, d, noise,
                                  FrequencyVector::from_values(
                                      vec({0.4, 0.35, 0.25})));
  CHECK(result.unique_minimizer);
  CHECK(objective(m.with_permuted_columns(result.permutation), result.weights,
                  d, noise) < 1e-10);
}

TEST_CASE("duplicate columns: feasible minimizer, flagged non-unique") {
  ProblemDims dims(4, 3, 2);
  BinaryMatrix bits(4, 3);
  bits << 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1;  // all three strains identical
  StrainMatrix m(dims, bits);
  Measurement d(dims, vec({0.9, 0.05, 1.0, 0.95}));
  NoiseModel noise = NoiseModel::uniform(1e-1, 4);
  auto result = qp::solve_weights(m, d, noise,
                                  FrequencyVector::from_values(
                                      vec({0.5, 0.3, 0.2})));
  CHECK_FALSE(result.unique_minimizer);
  double value = objective(m.with_permuted_columns(result.permutation),
                           result.weights, d, noise);
  // All weights act through the same column, so the optimum is that of a
  // single-strain fit with w = 1.
  Vector resid = m.real().col(0) - d.data();
  double expected = resid.cwiseProduct(resid).dot(noise.inverse_variances());
  CHECK(value == Catch::Approx(expected).margin(1e-6));
}

TEST_CASE("grid-scan oracle: solver at least as good on random instances") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int iter = 0; iter < 50; ++iter) {
    ProblemDims dims(4, 2, 2);
    BinaryMatrix bits(4, 2);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j) bits(i, j) = rng() & 1;
    StrainMatrix m(dims, bits);
    Vector data(4);
    for (int i = 0; i < 4; ++i) data[i] = unit(rng);
    Measurement d(dims, data);
    NoiseModel noise = NoiseModel::uniform(0.05, 4);
    auto result = qp::solve_weights(
        m, d, noise, FrequencyVector::from_values(vec({0.5, 0.5})));
    double solver = objective(m.with_permuted_columns(result.permutation),
                              result.weights, d, noise);
    double grid = grid_scan_objective(m, d, noise);
    CHECK(solver <= grid + 1e-6);
  }
}

TEST_CASE("solution feasibility on random boxed QPs") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int iter = 0; iter < 200; ++iter) {
    int n = 2 + static_cast<int>(rng() % 4);
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = 2.0 * unit(rng) - 1.0;
    Matrix h = a.transpose() * a;  // PSD
    Vector g(n);
    for (int i = 0; i < n; ++i) g[i] = 2.0 * unit(rng) - 1.0;
    qp::SimplexQP problem(h, g, Vector::Zero(n), Vector::Ones(n),
                          Vector::Ones(n), 1.0);
    Vector start = Vector::Constant(n, 1.0 / n);
    auto [x, report] = qp::solve_simplex_qp(problem, start);
    CHECK(report.converged);
    CHECK(report.feasibility <= 1e-9);
    CHECK(std::abs(x.sum() - 1.0) <= 1e-9);
    CHECK(x.minCoeff() >= -1e-9);
    CHECK(x.maxCoeff() <= 1.0 + 1e-9);
    // Never worse than the start.
    CHECK(simplex_objective(problem, x) <= simplex_objective(problem, start) + 1e-12);
  }
}

TEST_CASE("infeasible start is rejected") {
  qp::SimplexQP problem(Matrix::Identity(2, 2), Vector::Zero(2),
                        Vector::Zero(2), Vector::Ones(2), Vector::Ones(2), 1.0);
  CHECK_THROWS_AS(qp::solve_simplex_qp(problem, vec({0.9, 0.9})),
                  FeasibilityError);
}

TEST_CASE("iteration cap returns best iterate with non-converged flag") {
  Matrix h = Matrix::Identity(3, 3);
  Vector g = vec({-10.0, 0.0, 10.0});
  qp::SimplexQP problem(h, g, Vector::Zero(3), Vector::Ones(3),
                        Vector::Ones(3), 1.0);
  auto [x, report] =
      qp::solve_simplex_qp(problem, vec({1.0 / 3, 1.0 / 3, 1.0 / 3}), 1);
  CHECK_FALSE(report.converged);
  CHECK(report.iterations == 1);
}

TEST_CASE("simplex qp validates the hessian") {
  Matrix asym(2, 2);
  asym << 1.0, 0.5, -0.5, 1.0;
  CHECK_THROWS_AS(qp::SimplexQP(asym, Vector::Zero(2), Vector::Zero(2),
                                Vector::Ones(2), Vector::Ones(2), 1.0),
                  ShapeError);
  Matrix indef(2, 2);
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(qp::SimplexQP(indef, Vector::Zero(2), Vector::Zero(2),
                                Vector::Ones(2), Vector::Ones(2), 1.0),
                  ShapeError);
}
