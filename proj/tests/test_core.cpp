#include "strainsolve/core.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace strainsolve;

namespace {

StrainMatrix paper_matrix() {
  ProblemDims dims(3, 2, 2);
  BinaryMatrix bits(3, 2);
  bits << 0, 1, 1, 0, 1, 1;
  return StrainMatrix(dims, bits);
}

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<long>(values.size()));
  long i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

}  // namespace

TEST_CASE("problem dims invariants") {
  ProblemDims dims(3, 2, 2);
  CHECK(dims.rows() == 3);
  CHECK(dims.block_rows() == 1);
  CHECK(ProblemDims(4, 3, 4).rows() == 12);
  CHECK_THROWS_AS(ProblemDims(0, 1, 2), ShapeError);
  CHECK_THROWS_AS(ProblemDims(1, 0, 2), ShapeError);
  CHECK_THROWS_AS(ProblemDims(1, 1, 1), ShapeError);
}

TEST_CASE("strain matrix validates block column sums") {
  ProblemDims dims(2, 2, 3);  // blocks of 2 rows
  BinaryMatrix good(4, 2);
  good << 1, 0, 0, 1, 0, 0, 1, 0;
  CHECK_NOTHROW(StrainMatrix(dims, good));
  BinaryMatrix bad = good;
  bad(1, 0) = 1;  // two classes for strain 0 at site 0
  CHECK_THROWS_AS(StrainMatrix(dims, bad), ShapeError);
  BinaryMatrix nonbinary = good;
  nonbinary(0, 0) = 2;
  CHECK_THROWS_AS(StrainMatrix(dims, nonbinary), ShapeError);
}

TEST_CASE("frequency vector construction") {
  auto w = FrequencyVector::from_values(vec({0.6, 0.4}));
  CHECK(w.values().sum() == Catch::Approx(1.0).margin(1e-12));
  CHECK_THROWS_AS(FrequencyVector::from_values(vec({0.4, 0.6})), ShapeError);
  CHECK_THROWS_AS(FrequencyVector::from_values(vec({0.5, -0.5})), ShapeError);

  auto sorted = FrequencyVector::sorted_from(vec({1.0, 2.0, 5.0}));
  CHECK(sorted[0] == Catch::Approx(5.0 / 8.0));
  CHECK(sorted[2] == Catch::Approx(1.0 / 8.0));
  for (int i = 0; i + 1 < sorted.size(); ++i)
    CHECK(sorted[i] >= sorted[i + 1]);

  auto normalized = FrequencyVector::from_values(vec({6.0, 4.0}));
  CHECK(normalized[0] == Catch::Approx(0.6));
}

TEST_CASE("measurement accepts out-of-range values with a warning flag") {
  ProblemDims dims(3, 2, 2);
  Measurement in_range(dims, vec({0.4, 0.6, 1.0}));
  CHECK_FALSE(in_range.has_out_of_range());
  Measurement noisy(dims, vec({-0.01, 0.6, 1.02}));
  CHECK(noisy.has_out_of_range());
  CHECK_THROWS_AS(Measurement(dims, vec({0.4, 0.6})), ShapeError);
}

TEST_CASE("noise model") {
  CHECK_THROWS_AS(NoiseModel(vec({0.1, 0.0})), ShapeError);
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  CHECK(noise.variance(0) == Catch::Approx(1e-4));
  CHECK(noise.total_variance() == Catch::Approx(3e-4));
  CHECK(noise.inverse_variances()[2] == Catch::Approx(1e4));
}

TEST_CASE("forward model") {
  StrainMatrix m = paper_matrix();
  auto w = FrequencyVector::from_values(vec({0.6, 0.4}));
  Vector d = forward(m, w);
  CHECK(d[0] == Catch::Approx(0.4).margin(1e-15));
  CHECK(d[1] == Catch::Approx(0.6).margin(1e-15));
  CHECK(d[2] == Catch::Approx(1.0).margin(1e-15));

  StrainMatrix zero = StrainMatrix::zero(m.dims());
  CHECK(forward(zero, w).isZero());

  ProblemDims single(3, 1, 2);
  BinaryMatrix col(3, 1);
  col << 1, 0, 1;
  StrainMatrix ms(single, col);
  Vector out = forward(ms, FrequencyVector::from_values(vec({1.0})));
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 1.0);

  CHECK_THROWS_AS(forward(m, vec({1.0})), ShapeError);
}

TEST_CASE("forward is bilinear in the weights") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ProblemDims dims(4, 3, 2);
  for (int iter = 0; iter < 100; ++iter) {
    BinaryMatrix bits(4, 3);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j) bits(i, j) = rng() & 1;
    StrainMatrix m(dims, bits);
    Vector w1(3), w2(3);
    for (int j = 0; j < 3; ++j) {
      w1[j] = unit(rng);
      w2[j] = unit(rng);
    }
    double a = 2.0 * unit(rng) - 1.0, b = 2.0 * unit(rng) - 1.0;
    Vector lhs = forward(m, Vector(a * w1 + b * w2));
    Vector rhs = a * forward(m, w1) + b * forward(m, w2);
    CHECK((lhs - rhs).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("objective") {
  StrainMatrix m = paper_matrix();
  auto w = FrequencyVector::from_values(vec({0.6, 0.4}));
  NoiseModel noise = NoiseModel::uniform(0.1, 3);

  Measurement exact(m.dims(), forward(m, w));
  CHECK(objective(m, w, exact, noise) == 0.0);

  Measurement offset(m.dims(), vec({0.41, 0.6, 1.0}));
  CHECK(objective(m, w, offset, noise) == Catch::Approx(0.01).epsilon(1e-12));

  // Two residual entries of exactly one standard deviation.
  Measurement two(m.dims(), vec({0.4 + 0.1, 0.6 - 0.1, 1.0}));
  CHECK(objective(m, w, two, noise) == Catch::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("candidate enumeration order is the documented base-p decoding") {
  auto two = enumerate_block_candidates(1, 2);
  REQUIRE(two.size() == 2);
  CHECK(two[0](0, 0) == 0);
  CHECK(two[1](0, 0) == 1);

  auto four = enumerate_block_candidates(2, 2);
  REQUIRE(four.size() == 4);
  // (0,0), (1,0), (0,1), (1,1): least significant digit is strain 1.
  CHECK(four[0](0, 0) == 0);
  CHECK(four[0](0, 1) == 0);
  CHECK(four[1](0, 0) == 1);
  CHECK(four[1](0, 1) == 0);
  CHECK(four[2](0, 0) == 0);
  CHECK(four[2](0, 1) == 1);
  CHECK(four[3](0, 0) == 1);
  CHECK(four[3](0, 1) == 1);

  auto quad = enumerate_block_candidates(1, 4);
  REQUIRE(quad.size() == 4);
  CHECK(quad[0].col(0).sum() == 0);
  CHECK(quad[1](0, 0) == 1);
  CHECK(quad[2](1, 0) == 1);
  CHECK(quad[3](2, 0) == 1);
}

TEST_CASE("candidate enumeration properties") {
  for (int n : {1, 2, 3}) {
    for (int p : {2, 3, 4}) {
      auto candidates = enumerate_block_candidates(n, p);
      long expected = 1;
      for (int t = 0; t < n; ++t) expected *= p;
      REQUIRE(static_cast<long>(candidates.size()) == expected);
      for (const auto& block : candidates)
        for (int j = 0; j < n; ++j) CHECK(block.col(j).sum() <= 1);
      // Distinct and stable across calls.
      auto again = enumerate_block_candidates(n, p);
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        CHECK(candidates[i] == again[i]);
        for (std::size_t k = i + 1; k < candidates.size(); ++k)
          CHECK(candidates[i] != candidates[k]);
      }
    }
  }
  CHECK_THROWS_AS(enumerate_block_candidates(25, 2), CapacityError);
}

TEST_CASE("candidate block values match explicit enumeration") {
  Vector w = vec({0.5, 0.3, 0.2});
  for (int p : {2, 3}) {
    auto candidates = enumerate_block_candidates(3, p);
    Matrix values = candidate_block_values(w, p);
    REQUIRE(values.cols() == static_cast<long>(candidates.size()));
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      Vector direct = candidates[j].cast<double>() * w;
      CHECK((values.col(static_cast<long>(j)) - direct)
                .lpNorm<Eigen::Infinity>() < 1e-15);
    }
  }
}

TEST_CASE("bi-independence") {
  CHECK(is_bi_independent(FrequencyVector::from_values(vec({0.6, 0.4})), 1e-9));
  CHECK_FALSE(
      is_bi_independent(FrequencyVector::from_values(vec({0.5, 0.5})), 1e-9));
  CHECK_FALSE(is_bi_independent(
      FrequencyVector::from_values(vec({0.5, 0.3, 0.2})), 1e-9));
  CHECK(is_bi_independent(FrequencyVector::from_values(vec({1.0})), 1e-9));
}

TEST_CASE("column permutation") {
  StrainMatrix m = paper_matrix();
  StrainMatrix swapped = m.with_permuted_columns({1, 0});
  CHECK(swapped.entries()(0, 0) == 1);
  CHECK(swapped.entries()(0, 1) == 0);
  CHECK(swapped.with_permuted_columns({1, 0}) == m);
}
