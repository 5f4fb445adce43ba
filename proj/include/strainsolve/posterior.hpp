#pragma once

// Posterior exploration: exact summation over the block-binary matrix
// (site by site, in the shared canonical candidate order) combined with
// quadrature over the weight simplex. Log-shift stabilization keeps the
// per-site partition sums well scaled down to very small noise levels.

#include "strainsolve/core.hpp"
#include "strainsolve/detail/parallel.hpp"
#include "strainsolve/detail/rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace strainsolve::posterior {

/// Uniform samples on the ordered simplex: exponential spacings give a
/// uniform point on the full simplex, and sorting descending folds the
/// n! symmetric chambers onto the ordered one.
inline std::vector<FrequencyVector> sample_weights_uniform(int strains,
                                                           int count,
                                                           std::uint64_t seed) {
  if (strains < 1 || count < 1)
    throw ShapeError("sample_weights_uniform: need n >= 1 and count >= 1");
  auto engine = detail::make_engine(detail::derive_seed(seed, 0x5157u));
  std::exponential_distribution<double> exp1(1.0);
  std::vector<FrequencyVector> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Vector v(strains);
    double sum = 0.0;
    do {
      for (int t = 0; t < strains; ++t) v[t] = exp1(engine);
      sum = v.sum();
    } while (!(sum > 0.0));
    out.push_back(FrequencyVector::sorted_from(v));
  }
  return out;
}

/// Quadrature nodes and positive weights on the ordered simplex.
struct QuadratureRule {
  enum class Kind { monte_carlo_uniform, user_supplied };

  std::vector<FrequencyVector> nodes;
  std::vector<double> weights;
  Kind kind = Kind::user_supplied;

  static QuadratureRule monte_carlo(int strains, int count, std::uint64_t seed) {
    QuadratureRule rule;
    rule.nodes = sample_weights_uniform(strains, count, seed);
    rule.weights.assign(rule.nodes.size(), 1.0);
    rule.kind = Kind::monte_carlo_uniform;
    return rule;
  }

  static QuadratureRule user_supplied(std::vector<FrequencyVector> nodes,
                                      std::vector<double> weights) {
    QuadratureRule rule;
    rule.nodes = std::move(nodes);
    rule.weights = std::move(weights);
    rule.kind = Kind::user_supplied;
    rule.validate();
    return rule;
  }

  int size() const { return static_cast<int>(nodes.size()); }

  void validate() const {
    if (nodes.empty() || nodes.size() != weights.size())
      throw ShapeError("quadrature rule needs matching, nonempty nodes/weights");
    for (double z : weights)
      if (!(z > 0.0)) throw ShapeError("quadrature weights must be positive");
  }
};

/// A function of (M, w) that splits into per-site contributions
/// f(M, w) = sum_k f_k(M_k, w). eval receives the site index, the
/// candidate block, and the node, and adds f_k into `out` (length dim).
struct SeparableFunction {
  int dim = 0;
  std::function<void(int site, const BinaryMatrix& block, const Vector& w,
                     Eigen::Ref<Vector> out)>
      eval;
};

/// f = M flattened row-major (entry (i,j) at index i*n + j).
inline SeparableFunction matrix_function(const ProblemDims& dims) {
  const int br = dims.block_rows();
  const int n = dims.strains;
  SeparableFunction f;
  f.dim = dims.rows() * n;
  f.eval = [br, n](int site, const BinaryMatrix& block, const Vector&,
                   Eigen::Ref<Vector> out) {
    for (int r = 0; r < br; ++r)
      for (int t = 0; t < n; ++t)
        out[(site * br + r) * n + t] += block(r, t);
  };
  return f;
}

/// f = w (each site contributes w/m).
inline SeparableFunction weights_function(const ProblemDims& dims) {
  SeparableFunction f;
  f.dim = dims.strains;
  const double inv_m = 1.0 / dims.sites;
  f.eval = [inv_m](int, const BinaryMatrix&, const Vector& w,
                   Eigen::Ref<Vector> out) { out += inv_m * w; };
  return f;
}

/// f = w entrywise squared.
inline SeparableFunction weights_squared_function(const ProblemDims& dims) {
  SeparableFunction f;
  f.dim = dims.strains;
  const double inv_m = 1.0 / dims.sites;
  f.eval = [inv_m](int, const BinaryMatrix&, const Vector& w,
                   Eigen::Ref<Vector> out) {
    out += inv_m * w.cwiseProduct(w);
  };
  return f;
}

/// f = 1 (normalization check).
inline SeparableFunction one_function(const ProblemDims& dims) {
  SeparableFunction f;
  f.dim = 1;
  const double inv_m = 1.0 / dims.sites;
  f.eval = [inv_m](int, const BinaryMatrix&, const Vector&,
                   Eigen::Ref<Vector> out) { out[0] += inv_m; };
  return f;
}

/// Per-node scratch of the integrator: per-site log-likelihoods L,
/// integrand values F, stabilizers U, partition sums P and weighted
/// sums G, combined into the node's product-sum J and log-scale lambda.
struct IntegrationWorkspace {
  Vector log_like;      // L_{k,j} for the current site
  Matrix integrand;     // F_{k,j} columns for the current site
  Vector partition;     // P_k, one per site (each >= 1 after the shift)
  Matrix weighted;      // G_k columns, one per site
  Vector site_max;      // U_k
  Vector node_sum;      // J_s(f)
  double node_sum_one = 0.0;  // J_s(1)
  double log_scale = 0.0;     // lambda_s
};

namespace impl {

// L_{k,j} for one site: -1/2 || B_j w - d_k ||^2 weighted by the site's
// inverse variances. `values` is the shared candidate-value matrix.
inline void site_log_likelihoods(const Matrix& values, const Measurement& data,
                                 const NoiseModel& noise, int site,
                                 Vector& log_like) {
  const int br = data.dims().block_rows();
  const long count = values.cols();
  auto d_block = data.block(site);
  auto iv = noise.block_inverse_variances(site, br);
  log_like.resize(count);
  for (long j = 0; j < count; ++j) {
    double acc = 0.0;
    for (int r = 0; r < br; ++r) {
      double resid = values(r, j) - d_block[r];
      acc += resid * resid * iv[r];
    }
    log_like[j] = -0.5 * acc;
  }
}

// Evaluates one quadrature node of Algorithm 2 into the workspace.
inline void evaluate_node(const SeparableFunction& f,
                          const std::vector<BinaryMatrix>& candidates,
                          const Measurement& data, const NoiseModel& noise,
                          const Vector& w, IntegrationWorkspace& ws) {
  const ProblemDims& dims = data.dims();
  const long count = static_cast<long>(candidates.size());
  const Matrix values = candidate_block_values(w, dims.classes);

  ws.partition.resize(dims.sites);
  ws.site_max.resize(dims.sites);
  ws.weighted = Matrix::Zero(f.dim, dims.sites);
  ws.integrand = Matrix::Zero(f.dim, count);

  for (int k = 0; k < dims.sites; ++k) {
    site_log_likelihoods(values, data, noise, k, ws.log_like);
    ws.integrand.setZero();
    for (long j = 0; j < count; ++j)
      f.eval(k, candidates[static_cast<std::size_t>(j)], w,
             ws.integrand.col(j));
    const double u = ws.log_like.maxCoeff();
    double p = 0.0;
    Vector g = Vector::Zero(f.dim);
    for (long j = 0; j < count; ++j) {
      double e = std::exp(ws.log_like[j] - u);
      p += e;
      g += e * ws.integrand.col(j);
    }
    ws.site_max[k] = u;
    ws.partition[k] = p;
    ws.weighted.col(k) = g;
  }

  // J_s(f) = sum_k G_k prod_{l != k} P_l via prefix/suffix products.
  const int m = dims.sites;
  Vector prefix(m + 1), suffix(m + 1);
  prefix[0] = 1.0;
  for (int k = 0; k < m; ++k) prefix[k + 1] = prefix[k] * ws.partition[k];
  suffix[m] = 1.0;
  for (int k = m - 1; k >= 0; --k) suffix[k] = suffix[k + 1] * ws.partition[k];
  ws.node_sum = Vector::Zero(f.dim);
  for (int k = 0; k < m; ++k)
    ws.node_sum += prefix[k] * suffix[k + 1] * ws.weighted.col(k);
  ws.node_sum_one = prefix[m];
  ws.log_scale = ws.site_max.sum();
}

// Fixed-tree pairwise summation; the result does not depend on how the
// per-node terms were produced (or on the worker count).
template <typename T, typename Zero>
T pairwise_sum(const std::vector<T>& terms, long lo, long hi, const Zero& zero) {
  if (hi - lo == 0) return zero;
  if (hi - lo == 1) return terms[static_cast<std::size_t>(lo)];
  long mid = lo + (hi - lo) / 2;
  T left = pairwise_sum(terms, lo, mid, zero);
  T right = pairwise_sum(terms, mid, hi, zero);
  return left + right;
}

}  // namespace impl

/// Algorithm-2 conditional mean of a separable f given the data: exact
/// sum over the matrix feasible set per site, quadrature over the
/// weights, log-shift stabilized both per site and across nodes.
/// Returns I(f)/I(1) as a vector of length f.dim.
inline Vector conditional_mean(const SeparableFunction& f,
                               const Measurement& data,
                               const NoiseModel& noise,
                               const QuadratureRule& rule, int threads = 0) {
  rule.validate();
  if (f.dim < 1 || !f.eval)
    throw ShapeError("conditional_mean: malformed separable function");
  for (int i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i]))
      throw ShapeError("conditional_mean: non-finite measurement");

  const ProblemDims& dims = data.dims();
  const auto candidates =
      enumerate_block_candidates(dims.strains, dims.classes);
  const int node_count = rule.size();

  std::vector<Vector> node_sums(static_cast<std::size_t>(node_count));
  std::vector<double> node_ones(static_cast<std::size_t>(node_count));
  std::vector<double> log_scales(static_cast<std::size_t>(node_count));
  detail::parallel_for(
      node_count,
      [&](int s) {
        IntegrationWorkspace ws;
        impl::evaluate_node(f, candidates, data, noise,
                            rule.nodes[static_cast<std::size_t>(s)].values(),
                            ws);
        node_sums[static_cast<std::size_t>(s)] = ws.node_sum;
        node_ones[static_cast<std::size_t>(s)] = ws.node_sum_one;
        log_scales[static_cast<std::size_t>(s)] = ws.log_scale;
      },
      threads);

  double shift = log_scales[0];
  for (double l : log_scales) shift = std::max(shift, l);
  std::vector<Vector> terms_f(static_cast<std::size_t>(node_count));
  std::vector<double> terms_one(static_cast<std::size_t>(node_count));
  for (int s = 0; s < node_count; ++s) {
    double c = rule.weights[static_cast<std::size_t>(s)] *
               std::exp(log_scales[static_cast<std::size_t>(s)] - shift);
    terms_f[static_cast<std::size_t>(s)] =
        c * node_sums[static_cast<std::size_t>(s)];
    terms_one[static_cast<std::size_t>(s)] =
        c * node_ones[static_cast<std::size_t>(s)];
  }
  Vector integral_f = impl::pairwise_sum(terms_f, 0, node_count,
                                         Vector(Vector::Zero(f.dim)));
  double integral_one = impl::pairwise_sum(terms_one, 0, node_count, 0.0);
  if (!(integral_one > 0.0))
    throw Error("conditional_mean: normalization vanished after stabilization");
  return integral_f / integral_one;
}

/// Conditional means and standard deviations of the matrix and weights.
struct PosteriorStats {
  Matrix matrix_mean;  // entries in [0,1]
  Matrix matrix_std;   // sqrt(mean (1 - mean)), entries in [0,0.5]
  Vector weights_mean;
  Vector weights_std;
  int node_count = 0;
  std::uint64_t rng_seed = 0;
};

/// Evaluates conditional means of M, w and w^2 on ONE shared Monte Carlo
/// rule so the variance estimates are internally consistent. The matrix
/// second moment needs no extra pass: entries are binary, so
/// E[M^2] = E[M] and std = sqrt(mean (1-mean)).
inline PosteriorStats posterior_stats(const Measurement& data,
                                      const NoiseModel& noise,
                                      const ProblemDims& dims, int node_count,
                                      std::uint64_t rng_seed, int threads = 0) {
  if (node_count < 1) throw ShapeError("posterior_stats: node_count >= 1");
  if (!(dims == data.dims()))
    throw ShapeError("posterior_stats: dims disagree with measurement");
  QuadratureRule rule =
      QuadratureRule::monte_carlo(dims.strains, node_count, rng_seed);

  const auto candidates =
      enumerate_block_candidates(dims.strains, dims.classes);
  const int n = dims.strains;
  const int q = dims.rows();
  const SeparableFunction fm = matrix_function(dims);

  std::vector<Vector> node_m(static_cast<std::size_t>(node_count));
  std::vector<double> node_one(static_cast<std::size_t>(node_count));
  std::vector<double> log_scales(static_cast<std::size_t>(node_count));
  detail::parallel_for(
      node_count,
      [&](int s) {
        IntegrationWorkspace ws;
        impl::evaluate_node(fm, candidates, data, noise,
                            rule.nodes[static_cast<std::size_t>(s)].values(),
                            ws);
        node_m[static_cast<std::size_t>(s)] = ws.node_sum;
        node_one[static_cast<std::size_t>(s)] = ws.node_sum_one;
        log_scales[static_cast<std::size_t>(s)] = ws.log_scale;
      },
      threads);

  double shift = log_scales[0];
  for (double l : log_scales) shift = std::max(shift, l);
  std::vector<Vector> terms_m(static_cast<std::size_t>(node_count));
  std::vector<Vector> terms_w(static_cast<std::size_t>(node_count));
  std::vector<Vector> terms_w2(static_cast<std::size_t>(node_count));
  std::vector<double> terms_one(static_cast<std::size_t>(node_count));
  for (int s = 0; s < node_count; ++s) {
    const std::size_t us = static_cast<std::size_t>(s);
    double c = rule.weights[us] * std::exp(log_scales[us] - shift);
    const Vector& w = rule.nodes[us].values();
    terms_m[us] = c * node_m[us];
    terms_one[us] = c * node_one[us];
    terms_w[us] = terms_one[us] * w;
    terms_w2[us] = terms_one[us] * w.cwiseProduct(w).eval();
  }
  double i_one = impl::pairwise_sum(terms_one, 0, node_count, 0.0);
  if (!(i_one > 0.0))
    throw Error("posterior_stats: normalization vanished after stabilization");
  Vector i_m = impl::pairwise_sum(terms_m, 0, node_count,
                                  Vector(Vector::Zero(q * n)));
  Vector i_w =
      impl::pairwise_sum(terms_w, 0, node_count, Vector(Vector::Zero(n)));
  Vector i_w2 =
      impl::pairwise_sum(terms_w2, 0, node_count, Vector(Vector::Zero(n)));

  PosteriorStats stats;
  stats.node_count = node_count;
  stats.rng_seed = rng_seed;
  stats.matrix_mean.resize(q, n);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < n; ++j) {
      double v = i_m[i * n + j] / i_one;
      stats.matrix_mean(i, j) = std::min(1.0, std::max(0.0, v));
    }
  stats.matrix_std =
      (stats.matrix_mean.array() * (1.0 - stats.matrix_mean.array()))
          .max(0.0)
          .sqrt()
          .matrix();
  stats.weights_mean = i_w / i_one;
  Vector var = (i_w2 / i_one) -
               stats.weights_mean.cwiseProduct(stats.weights_mean);
  stats.weights_std = var.array().max(0.0).sqrt().matrix();
  return stats;
}

/// Shannon entropy (bits) of the matrix posterior at fixed weights.
/// The posterior factorizes across sites for fixed w, so the total is
/// the sum of per-site softmax entropies; 0 log 0 = 0.
inline double matrix_entropy(const FrequencyVector& weights,
                             const Measurement& data,
                             const NoiseModel& noise) {
  const ProblemDims& dims = data.dims();
  if (weights.size() != dims.strains)
    throw ShapeError("matrix_entropy: weight length != strain count");
  const Matrix values = candidate_block_values(weights.values(), dims.classes);
  Vector log_like;
  double total = 0.0;
  for (int k = 0; k < dims.sites; ++k) {
    impl::site_log_likelihoods(values, data, noise, k, log_like);
    const double u = log_like.maxCoeff();
    double p = 0.0;
    for (long j = 0; j < log_like.size(); ++j)
      p += std::exp(log_like[j] - u);
    double h = 0.0;
    for (long j = 0; j < log_like.size(); ++j) {
      double prob = std::exp(log_like[j] - u) / p;
      if (prob > 0.0) h -= prob * std::log2(prob);
    }
    total += h;
  }
  return std::max(0.0, total);
}

/// Entropy over a barycentric lattice of the ordered simplex (n = 3
/// only): rows are (w1, w2, w3, entropy in bits), one per lattice point
/// with w1 >= w2 >= w3.
inline std::vector<std::array<double, 4>> entropy_map(const Measurement& data,
                                                      const NoiseModel& noise,
                                                      const ProblemDims& dims,
                                                      int resolution) {
  if (dims.strains != 3)
    throw UnsupportedDimsError("entropy_map requires n = 3");
  if (resolution < 1) throw ShapeError("entropy_map: resolution >= 1");
  std::vector<std::array<double, 4>> rows;
  for (int a = 0; a <= resolution; ++a) {
    for (int b = 0; b <= resolution - a; ++b) {
      int c = resolution - a - b;
      if (a < b || b < c) continue;
      Vector w(3);
      w << static_cast<double>(a) / resolution,
          static_cast<double>(b) / resolution,
          static_cast<double>(c) / resolution;
      double h = matrix_entropy(FrequencyVector::from_values(w), data, noise);
      rows.push_back({w[0], w[1], w[2], h});
    }
  }
  return rows;
}

}  // namespace strainsolve::posterior
