#include "strainsolve/posterior.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
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

// Direct, unstabilized double sum over the full matrix feasible set:
// the reference the decoupled integrator is checked against.
struct BruteForceMoments {
  Matrix matrix_mean;
  Vector weights_mean;
};

BruteForceMoments brute_force_moments(const Measurement& data,
                                      const NoiseModel& noise,
                                      const posterior::QuadratureRule& rule) {
  const ProblemDims& dims = data.dims();
  auto blocks = enumerate_block_candidates(dims.strains, dims.classes);
  const int br = dims.block_rows();
  long total = 1;
  for (int k = 0; k < dims.sites; ++k)
    total *= static_cast<long>(blocks.size());

  Matrix m_acc = Matrix::Zero(dims.rows(), dims.strains);
  Vector w_acc = Vector::Zero(dims.strains);
  double norm = 0.0;
  for (int s = 0; s < rule.size(); ++s) {
    const Vector& w = rule.nodes[static_cast<std::size_t>(s)].values();
    double zeta = rule.weights[static_cast<std::size_t>(s)];
    for (long index = 0; index < total; ++index) {
      BinaryMatrix bits(dims.rows(), dims.strains);
      long rest = index;
      for (int k = 0; k < dims.sites; ++k) {
        bits.block(k * br, 0, br, dims.strains) =
            blocks[static_cast<std::size_t>(rest % blocks.size())];
        rest /= static_cast<long>(blocks.size());
      }
      Vector resid = bits.cast<double>() * w - data.data();
      double weight =
          zeta * std::exp(-0.5 * resid.cwiseProduct(resid).dot(
                              noise.inverse_variances()));
      norm += weight;
      m_acc += weight * bits.cast<double>();
      w_acc += weight * w;
    }
  }
  return {m_acc / norm, w_acc / norm};
}

}  // namespace

TEST_CASE("uniform sampler: point simplex") {
  auto samples = posterior::sample_weights_uniform(1, 10, 3);
  for (const auto& w : samples) {
    REQUIRE(w.size() == 1);
    CHECK(w[0] == 1.0);
  }
}

TEST_CASE("uniform sampler: mean of the top weight for n = 2") {
  auto samples = posterior::sample_weights_uniform(2, 1000000, 17);
  double mean = 0.0;
  for (const auto& w : samples) mean += w[0];
  mean /= static_cast<double>(samples.size());
  // E[max(U, 1-U)] = 3/4.
  CHECK(mean == Catch::Approx(0.75).margin(0.002));
}

TEST_CASE("uniform sampler: tail probability matches the spacings oracle") {
  const int count = 1000000;
  auto samples = posterior::sample_weights_uniform(3, count, 29);
  double hits = 0.0;
  for (const auto& w : samples)
    if (w[0] > 0.9) hits += 1.0;
  double p_sampler = hits / count;

  // Independent construction: order-statistic spacings of two uniforms
  // are uniform on the simplex.
  std::mt19937_64 rng(555);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double oracle_hits = 0.0;
  for (int i = 0; i < count; ++i) {
    double a = unit(rng), b = unit(rng);
    double lo = std::min(a, b), hi = std::max(a, b);
    double w1 = std::max({lo, hi - lo, 1.0 - hi});
    if (w1 > 0.9) oracle_hits += 1.0;
  }
  double p_oracle = oracle_hits / count;
  double se = std::sqrt(p_oracle * (1.0 - p_oracle) / count);
  CHECK(std::abs(p_sampler - p_oracle) < 3.0 * se + 1e-12);
  // Closed form for the max spacing: P(w1 > t) = 3 (1-t)^2 for t >= 1/2.
  CHECK(p_oracle == Catch::Approx(3.0 * 0.01).margin(5.0 * se));
}

TEST_CASE("sampler output lies on the ordered simplex") {
  for (int n : {2, 3, 5}) {
    auto samples = posterior::sample_weights_uniform(n, 200, 7 + n);
    for (const auto& w : samples) {
      CHECK(w.values().sum() == Catch::Approx(1.0).margin(1e-9));
      for (int i = 0; i + 1 < n; ++i) CHECK(w[i] >= w[i + 1]);
      CHECK(w[n - 1] >= 0.0);
    }
  }
}

TEST_CASE("normalization: conditional mean of one is exactly one") {
  ProblemDims dims(3, 2, 2);
  Measurement d(dims, vec({0.37, 0.61, 0.98}));
  NoiseModel noise = NoiseModel::uniform(5e-2, 3);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto rule = posterior::QuadratureRule::monte_carlo(2, 257, seed);
    Vector one = posterior::conditional_mean(posterior::one_function(dims), d,
                                             noise, rule);
    CHECK(one[0] == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("ambiguous paper instance: matrix mean half everywhere but row 3") {
  ProblemDims dims(3, 2, 2);
  Measurement d(dims, vec({0.5, 0.5, 1.0}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  auto rule = posterior::QuadratureRule::monte_carlo(2, 100000, 99);
  Vector flat = posterior::conditional_mean(posterior::matrix_function(dims),
                                            d, noise, rule);
  Matrix mean = Eigen::Map<Matrix>(flat.data(), 2, 3).transpose();
  // Row-major unflatten: entry (i,j) at i*n+j.
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(flat[i * 2 + j] == Catch::Approx(0.5).margin(0.02));
  CHECK(flat[2 * 2 + 0] == Catch::Approx(1.0).margin(1e-3));
  CHECK(flat[2 * 2 + 1] == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("decoupled integrator equals the brute-force double sum") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ProblemDims dims(3, 2, 2);
  for (int iter = 0; iter < 5; ++iter) {
    Vector data(3);
    for (int i = 0; i < 3; ++i) data[i] = unit(rng);
    Measurement d(dims, data);
    NoiseModel noise = NoiseModel::uniform(0.1, 3);
    auto rule = posterior::QuadratureRule::monte_carlo(
        2, 100, 1000 + static_cast<std::uint64_t>(iter));

    BruteForceMoments oracle = brute_force_moments(d, noise, rule);
    Vector flat = posterior::conditional_mean(posterior::matrix_function(dims),
                                              d, noise, rule);
    Vector w_mean = posterior::conditional_mean(
        posterior::weights_function(dims), d, noise, rule);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(flat[i * 2 + j] ==
              Catch::Approx(oracle.matrix_mean(i, j)).epsilon(1e-10).margin(1e-10));
    for (int j = 0; j < 2; ++j)
      CHECK(w_mean[j] ==
            Catch::Approx(oracle.weights_mean[j]).epsilon(1e-10).margin(1e-10));
  }
}

TEST_CASE("posterior stats on the unique paper instance") {
  ProblemDims dims(3, 2, 2);
  Measurement d(dims, vec({0.4, 0.6, 1.0}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  auto stats = posterior::posterior_stats(d, noise, dims, 100000, 7);
  StrainMatrix truth = paper_matrix();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      CHECK(stats.matrix_mean(i, j) ==
            Catch::Approx(truth.entries()(i, j)).margin(1e-3));
      CHECK(stats.matrix_std(i, j) <= 1e-3);
    }
  CHECK(stats.weights_mean[0] == Catch::Approx(0.6).margin(5e-3));
  // Paper: w_std approximately (0.007, 0.007); 50% relative band.
  CHECK(stats.weights_std[0] == Catch::Approx(0.007).epsilon(0.5));
  CHECK(stats.weights_std[1] == Catch::Approx(0.007).epsilon(0.5));
}

TEST_CASE("posterior stats on the ambiguous paper instance") {
  ProblemDims dims(3, 2, 2);
  Measurement d(dims, vec({0.5, 0.5, 1.0}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 3);
  auto stats = posterior::posterior_stats(d, noise, dims, 100000, 11);
  // On the ordered simplex w1 - 1/2 is half-normal with sigma = gamma/sqrt(2)
  // (two half-valued sites), so E[w1] = 1/2 + gamma/sqrt(pi) exactly.
  const double expected_top = 0.5 + 1e-2 / std::sqrt(std::acos(-1.0));
  CHECK(stats.weights_mean[0] == Catch::Approx(expected_top).margin(1e-3));
  CHECK(stats.weights_mean[1] == Catch::Approx(1.0 - expected_top).margin(1e-3));
  CHECK(stats.weights_std[0] == Catch::Approx(0.004).epsilon(0.5));
  CHECK(stats.weights_std[1] == Catch::Approx(0.004).epsilon(0.5));
}

TEST_CASE("posterior stats on the four-row example") {
  ProblemDims dims(4, 3, 2);
  Measurement d(dims, vec({0.1, 0.3, 0.5, 0.6}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 4);
  auto stats = posterior::posterior_stats(d, noise, dims, 100000, 13);
  CHECK(stats.weights_mean[0] == Catch::Approx(0.54).margin(0.01));
  CHECK(stats.weights_mean[1] == Catch::Approx(0.34).margin(0.01));
  CHECK(stats.weights_mean[2] == Catch::Approx(0.12).margin(0.01));
  for (int j = 0; j < 3; ++j)
    CHECK(stats.matrix_mean(2, j) == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("matrix std obeys the binary identity") {
  ProblemDims dims(3, 2, 2);
  Measurement d(dims, vec({0.45, 0.52, 0.97}));
  NoiseModel noise = NoiseModel::uniform(3e-2, 3);
  auto stats = posterior::posterior_stats(d, noise, dims, 2000, 21);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double mean = stats.matrix_mean(i, j);
      CHECK(mean >= 0.0);
      CHECK(mean <= 1.0);
      CHECK(stats.matrix_std(i, j) ==
            Catch::Approx(std::sqrt(mean * (1.0 - mean))).margin(1e-10));
    }
}

TEST_CASE("stability: tiny noise on a 50-site instance") {
  ProblemDims dims(50, 2, 2);
  std::mt19937_64 rng(77);
  BinaryMatrix bits(50, 2);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 2; ++j) bits(i, j) = rng() & 1;
  StrainMatrix m(dims, bits);
  auto w = FrequencyVector::from_values(vec({0.63, 0.37}));
  Measurement d(dims, forward(m, w));
  NoiseModel noise = NoiseModel::uniform(1e-6, 50);
  auto stats = posterior::posterior_stats(d, noise, dims, 500, 5);
  CHECK(stats.weights_mean.allFinite());
  CHECK(stats.matrix_mean.allFinite());
  CHECK(stats.weights_mean[0] == Catch::Approx(0.63).margin(1e-3));
}

TEST_CASE("entropy: point posterior, tie counting, and one ambiguous site") {
  // Exact data from a bi-independent w: a point mass.
  {
    ProblemDims dims(3, 2, 2);
    Measurement d(dims, vec({0.4, 0.6, 1.0}));
    NoiseModel noise = NoiseModel::uniform(1e-2, 3);
    double h = posterior::matrix_entropy(
        FrequencyVector::from_values(vec({0.6, 0.4})), d, noise);
    CHECK(h < 1e-6);
  }
  // Figure-1 weights: per-site tie counts 2 * 1 * 2 * 3 = 12.
  {
    ProblemDims dims(4, 3, 2);
    Measurement d(dims, vec({0.1, 0.3, 0.5, 0.6}));
    NoiseModel noise = NoiseModel::uniform(1e-2, 4);
    double h = posterior::matrix_entropy(
        FrequencyVector::from_values(vec({0.5, 0.3, 0.2})), d, noise);
    CHECK(h == Catch::Approx(std::log2(12.0)).margin(0.05));
  }
  // A single half-valued site with equal weights: exactly one bit.
  {
    ProblemDims dims(2, 2, 2);
    Measurement d(dims, vec({0.5, 0.0}));
    NoiseModel noise = NoiseModel::uniform(1e-2, 2);
    double h = posterior::matrix_entropy(
        FrequencyVector::from_values(vec({0.5, 0.5})), d, noise);
    CHECK(h == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("entropy is additive across sites") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int iter = 0; iter < 20; ++iter) {
    Vector data(2);
    data << unit(rng), unit(rng);
    auto w = posterior::sample_weights_uniform(2, 1, 100 + iter)[0];
    NoiseModel noise = NoiseModel::uniform(0.05, 2);
    NoiseModel single = NoiseModel::uniform(0.05, 1);
    ProblemDims both(2, 2, 2), one(1, 2, 2);
    double total = posterior::matrix_entropy(w, Measurement(both, data), noise);
    double first =
        posterior::matrix_entropy(w, Measurement(one, data.head(1)), single);
    double second =
        posterior::matrix_entropy(w, Measurement(one, data.tail(1)), single);
    CHECK(total == Catch::Approx(first + second).margin(1e-10));
  }
}

TEST_CASE("entropy map covers the ordered chamber and flags ambiguity") {
  ProblemDims dims(4, 3, 2);
  Measurement d(dims, vec({0.1, 0.3, 0.5, 0.6}));
  NoiseModel noise = NoiseModel::uniform(1e-2, 4);
  auto rows = posterior::entropy_map(d, noise, dims, 20);
  REQUIRE(!rows.empty());
  for (const auto& row : rows) {
    CHECK(row[0] >= row[1]);
    CHECK(row[1] >= row[2]);
    CHECK(row[0] + row[1] + row[2] == Catch::Approx(1.0).margin(1e-9));
    CHECK(row[3] >= 0.0);
  }
  // All-zero data with tiny noise: the all-reference matrix is uniquely
  // optimal at every bi-independent interior point.
  ProblemDims dz(2, 3, 2);
  Measurement zero(dz, vec({0.0, 0.0}));
  NoiseModel tight = NoiseModel::uniform(1e-3, 2);
  auto zero_rows = posterior::entropy_map(zero, tight, dz, 15);
  for (const auto& row : zero_rows) {
    Vector w = vec({row[0], row[1], row[2]});
    if (is_bi_independent(FrequencyVector::from_values(w), 5e-2))
      CHECK(row[3] < 1e-6);
  }
  CHECK_THROWS_AS(posterior::entropy_map(d, noise, ProblemDims(4, 2, 2), 10),
                  UnsupportedDimsError);
}

TEST_CASE("user-supplied rules validate") {
  CHECK_THROWS_AS(posterior::QuadratureRule::user_supplied({}, {}), ShapeError);
  auto nodes = posterior::sample_weights_uniform(2, 3, 1);
  CHECK_THROWS_AS(
      posterior::QuadratureRule::user_supplied(nodes, {1.0, -1.0, 1.0}),
      ShapeError);
  CHECK_NOTHROW(posterior::QuadratureRule::user_supplied(nodes, {1.0, 2.0, 0.5}));
}
