#pragma once

// Core domain types and operations for strain deconvolution: the mixing
// model d = M w + noise, where M is a block-binary matrix of strain
// barcodes (one column per strain, one (p-1)-row block per measurement
// site) and w is an ordered vector of strain frequencies on the simplex.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace strainsolve {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using BinaryMatrix = Eigen::MatrixXi;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Dimension or shape mismatch between operands.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

/// Requested enumeration or sampling exceeds the supported size.
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error(what) {}
};

/// A solver was handed an infeasible starting point or constraint set.
class FeasibilityError : public Error {
 public:
  explicit FeasibilityError(const std::string& what) : Error(what) {}
};

/// Malformed input file; line() is 1-based when known.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what, long line = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_ = 0;
};

/// Operation only defined for particular dimensions (e.g. n = 3 maps).
class UnsupportedDimsError : public Error {
 public:
  explicit UnsupportedDimsError(const std::string& what) : Error(what) {}
};

/// Instance shape: m measurement sites, n strains, p classes per site.
/// The measurement has q = m*(p-1) rows; block k holds the frequencies
/// of classes 2..p at site k (class 1 is the implicit reference).
struct ProblemDims {
  int sites = 0;    // m
  int strains = 0;  // n
  int classes = 0;  // p

  ProblemDims() = default;
  ProblemDims(int m, int n, int p) : sites(m), strains(n), classes(p) {
    if (m < 1 || n < 1 || p < 2)
      throw ShapeError("ProblemDims requires m >= 1, n >= 1, p >= 2 (got m=" +
                       std::to_string(m) + ", n=" + std::to_string(n) +
                       ", p=" + std::to_string(p) + ")");
  }

  int block_rows() const { return classes - 1; }
  int rows() const { return sites * (classes - 1); }  // q

  friend bool operator==(const ProblemDims& a, const ProblemDims& b) {
    return a.sites == b.sites && a.strains == b.strains &&
           a.classes == b.classes;
  }
};

/// Block-binary strain matrix M. Entries are 0/1 and within every
/// (p-1) x n site block each column sums to at most one (a strain has
/// at most one non-reference class per site).
class StrainMatrix {
 public:
  StrainMatrix(const ProblemDims& dims, BinaryMatrix entries)
      : dims_(dims), bits_(std::move(entries)) {
    if (bits_.rows() != dims_.rows() || bits_.cols() != dims_.strains)
      throw ShapeError("StrainMatrix entries must be q x n = " +
                       std::to_string(dims_.rows()) + " x " +
                       std::to_string(dims_.strains));
    const int br = dims_.block_rows();
    for (int j = 0; j < bits_.cols(); ++j) {
      for (int k = 0; k < dims_.sites; ++k) {
        int sum = 0;
        for (int r = 0; r < br; ++r) {
          int v = bits_(k * br + r, j);
          if (v != 0 && v != 1)
            throw ShapeError("StrainMatrix entries must be binary");
          sum += v;
        }
        if (sum > 1)
          throw ShapeError("StrainMatrix block column sum exceeds 1 at site " +
                           std::to_string(k) + ", strain " + std::to_string(j));
      }
    }
    real_ = bits_.cast<double>();
  }

  static StrainMatrix zero(const ProblemDims& dims) {
    return StrainMatrix(dims, BinaryMatrix::Zero(dims.rows(), dims.strains));
  }

  const ProblemDims& dims() const { return dims_; }
  const BinaryMatrix& entries() const { return bits_; }
  const Matrix& real() const { return real_; }
  int rows() const { return static_cast<int>(bits_.rows()); }
  int cols() const { return static_cast<int>(bits_.cols()); }

  /// Site block k as a (p-1) x n view.
  Eigen::Block<const BinaryMatrix> block(int site) const {
    const int br = dims_.block_rows();
    return bits_.block(site * br, 0, br, dims_.strains);
  }

  /// New matrix whose column t is this matrix's column perm[t].
  StrainMatrix with_permuted_columns(const std::vector<int>& perm) const {
    if (static_cast<int>(perm.size()) != dims_.strains)
      throw ShapeError("column permutation has wrong length");
    BinaryMatrix out(bits_.rows(), bits_.cols());
    for (int t = 0; t < dims_.strains; ++t) out.col(t) = bits_.col(perm[t]);
    return StrainMatrix(dims_, std::move(out));
  }

  friend bool operator==(const StrainMatrix& a, const StrainMatrix& b) {
    return a.dims_ == b.dims_ && a.bits_ == b.bits_;
  }
  friend bool operator!=(const StrainMatrix& a, const StrainMatrix& b) {
    return !(a == b);
  }

  /// Row-major lexicographic order; used only for deterministic tie-breaking.
  static bool lex_less(const StrainMatrix& a, const StrainMatrix& b) {
    for (int i = 0; i < a.bits_.rows(); ++i)
      for (int j = 0; j < a.bits_.cols(); ++j)
        if (a.bits_(i, j) != b.bits_(i, j)) return a.bits_(i, j) < b.bits_(i, j);
    return false;
  }

 private:
  ProblemDims dims_;
  BinaryMatrix bits_;
  Matrix real_;
};

/// Ordered simplex vector of strain frequencies: non-increasing entries
/// in [0,1] summing to one (tolerance 1e-9 on both invariants).
class FrequencyVector {
 public:
  static constexpr double kTolerance = 1e-9;

  /// Validates ordering and non-negativity, then normalizes by the sum.
  /// Ordering violations are rejected, not repaired.
  static FrequencyVector from_values(const Vector& values) {
    check_basic(values);
    for (int i = 0; i + 1 < values.size(); ++i)
      if (values[i + 1] > values[i] + kTolerance)
        throw ShapeError("frequency vector must be non-increasing (entry " +
                         std::to_string(i + 1) + " exceeds entry " +
                         std::to_string(i) + ")");
    return FrequencyVector(values);
  }

  /// Sorts descending before normalizing; accepts any nonnegative vector
  /// with positive sum.
  static FrequencyVector sorted_from(const Vector& values) {
    check_basic(values);
    Vector sorted = values;
    std::sort(sorted.data(), sorted.data() + sorted.size(),
              std::greater<double>());
    return FrequencyVector(sorted);
  }

  int size() const { return static_cast<int>(values_.size()); }
  const Vector& values() const { return values_; }
  double operator[](int i) const { return values_[i]; }

  friend bool operator==(const FrequencyVector& a, const FrequencyVector& b) {
    return a.values_.size() == b.values_.size() && a.values_ == b.values_;
  }

 private:
  explicit FrequencyVector(Vector values) : values_(std::move(values)) {
    values_ /= values_.sum();
    for (int i = 0; i < values_.size(); ++i)
      values_[i] = std::min(1.0, std::max(0.0, values_[i]));
    // Clean up sub-tolerance inversions left by normalization roundoff.
    for (int i = 0; i + 1 < values_.size(); ++i)
      values_[i + 1] = std::min(values_[i + 1], values_[i]);
  }

  static void check_basic(const Vector& values) {
    if (values.size() < 1) throw ShapeError("frequency vector must be nonempty");
    double sum = 0.0;
    for (int i = 0; i < values.size(); ++i) {
      if (!(values[i] > -kTolerance))
        throw ShapeError("frequency vector entries must be nonnegative");
      sum += std::max(0.0, values[i]);
    }
    if (!(sum > 0.0))
      throw ShapeError("frequency vector must have positive sum");
  }

  Vector values_;
};

/// Measured class-frequency vector d of length q. Values outside [0,1]
/// are legal (the Gaussian noise model permits them) but flagged.
class Measurement {
 public:
  Measurement(const ProblemDims& dims, Vector data)
      : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.rows())
      throw ShapeError("measurement length " + std::to_string(data_.size()) +
                       " != q = " + std::to_string(dims_.rows()));
    for (int i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i]))
        throw ShapeError("measurement contains a non-finite value");
      if (data_[i] < 0.0 || data_[i] > 1.0) out_of_range_ = true;
    }
  }

  const ProblemDims& dims() const { return dims_; }
  const Vector& data() const { return data_; }
  int size() const { return static_cast<int>(data_.size()); }
  double operator[](int i) const { return data_[i]; }

  /// Block of site k: the (p-1) class frequencies at that site.
  Eigen::VectorBlock<const Vector> block(int site) const {
    const int br = dims_.block_rows();
    return data_.segment(site * br, br);
  }

  /// True when any entry fell outside [0,1]; accepted with this warning.
  bool has_out_of_range() const { return out_of_range_; }

 private:
  ProblemDims dims_;
  Vector data_;
  bool out_of_range_ = false;
};

/// Diagonal Gaussian noise model with per-row standard deviations.
class NoiseModel {
 public:
  explicit NoiseModel(Vector stddevs) : stddevs_(std::move(stddevs)) {
    if (stddevs_.size() < 1) throw ShapeError("noise model must be nonempty");
    for (int i = 0; i < stddevs_.size(); ++i)
      if (!(stddevs_[i] > 0.0) || !std::isfinite(stddevs_[i]))
        throw ShapeError("noise standard deviations must be positive");
    inv_var_ = stddevs_.array().square().inverse().matrix();
  }

  static NoiseModel uniform(double gamma, int rows) {
    return NoiseModel(Vector::Constant(rows, gamma));
  }

  int size() const { return static_cast<int>(stddevs_.size()); }
  double stddev(int i) const { return stddevs_[i]; }
  double variance(int i) const { return stddevs_[i] * stddevs_[i]; }
  const Vector& stddevs() const { return stddevs_; }
  const Vector& inverse_variances() const { return inv_var_; }

  /// Inverse variances of site block k (the diagonal of the block's
  /// covariance inverse).
  Eigen::VectorBlock<const Vector> block_inverse_variances(int site,
                                                           int block_rows) const {
    return inv_var_.segment(site * block_rows, block_rows);
  }

  /// Total noise energy sum_i gamma_i^2 (discrepancy-principle threshold).
  double total_variance() const { return stddevs_.squaredNorm(); }

 private:
  Vector stddevs_;
  Vector inv_var_;
};

/// Noise-free forward model M*w. Raw-vector overload used internally and
/// by property tests that deliberately bypass the simplex invariant.
inline Vector forward(const StrainMatrix& matrix, const Vector& weights) {
  if (weights.size() != matrix.cols())
    throw ShapeError("forward: weight length != strain count");
  return matrix.real() * weights;
}

inline Vector forward(const StrainMatrix& matrix, const FrequencyVector& weights) {
  return forward(matrix, weights.values());
}

/// Negative-log-posterior objective: sum_i (M w - d)_i^2 / gamma_i^2.
inline double objective(const StrainMatrix& matrix, const Vector& weights,
                        const Measurement& data, const NoiseModel& noise) {
  if (!(matrix.dims() == data.dims()))
    throw ShapeError("objective: matrix and measurement dims disagree");
  if (noise.size() != data.size())
    throw ShapeError("objective: noise model length != measurement length");
  Vector residual = forward(matrix, weights) - data.data();
  return residual.cwiseProduct(residual).dot(noise.inverse_variances());
}

inline double objective(const StrainMatrix& matrix, const FrequencyVector& weights,
                        const Measurement& data, const NoiseModel& noise) {
  return objective(matrix, weights.values(), data, noise);
}

/// A MAP output: the estimated barcodes, frequencies, objective value,
/// and for the global solver a certificate flag plus optimality gap.
struct Reconstruction {
  StrainMatrix matrix;
  FrequencyVector weights;
  double objective = 0.0;
  bool certified = false;
  std::optional<double> gap;  // relative gap; absent for local estimates
};

namespace detail {

/// p^n with the soft capacity cap (the application regime is small n).
inline long candidate_count(int strains, int classes) {
  constexpr long kMaxCandidates = 1L << 20;
  long count = 1;
  for (int t = 0; t < strains; ++t) {
    count *= classes;
    if (count > kMaxCandidates)
      throw CapacityError("p^n = " + std::to_string(classes) + "^" +
                          std::to_string(strains) + " exceeds the supported " +
                          std::to_string(kMaxCandidates) + " block candidates");
  }
  return count;
}

}  // namespace detail

/// All p^n site blocks of the per-site feasible set, in the canonical
/// order that every solver and the posterior integrator share:
/// candidate index j decoded base p, least significant digit = strain 1;
/// digit 0 selects the all-zero (reference) column, digit c >= 1 the unit
/// column with the one in row c-1. The order is a stable public contract
/// (tie-breaking picks the smallest index).
inline std::vector<BinaryMatrix> enumerate_block_candidates(int strains,
                                                            int classes) {
  if (strains < 1 || classes < 2)
    throw ShapeError("enumerate_block_candidates requires n >= 1, p >= 2");
  const long count = detail::candidate_count(strains, classes);
  std::vector<BinaryMatrix> out;
  out.reserve(static_cast<std::size_t>(count));
  for (long idx = 0; idx < count; ++idx) {
    BinaryMatrix block = BinaryMatrix::Zero(classes - 1, strains);
    long rest = idx;
    for (int t = 0; t < strains; ++t) {
      int digit = static_cast<int>(rest % classes);
      rest /= classes;
      if (digit >= 1) block(digit - 1, t) = 1;
    }
    out.push_back(std::move(block));
  }
  return out;
}

/// Column idx holds B_idx * w for every candidate block, same canonical
/// order as enumerate_block_candidates. Shared by the BCD matrix update
/// and the posterior integrator, where it is the hot path.
inline Matrix candidate_block_values(const Vector& weights, int classes) {
  const int strains = static_cast<int>(weights.size());
  const long count = detail::candidate_count(strains, classes);
  Matrix values = Matrix::Zero(classes - 1, count);
  for (long idx = 0; idx < count; ++idx) {
    long rest = idx;
    for (int t = 0; t < strains; ++t) {
      int digit = static_cast<int>(rest % classes);
      rest /= classes;
      if (digit >= 1) values(digit - 1, idx) += weights[t];
    }
  }
  return values;
}

/// True iff no signed {0,-1,1} combination of the weights vanishes;
/// governs uniqueness of the per-site matrix updates. Full enumeration
/// of the 3^n - 1 sign vectors.
inline bool is_bi_independent(const FrequencyVector& weights, double tol = 1e-9) {
  const int n = weights.size();
  long total = 1;
  for (int t = 0; t < n; ++t) total *= 3;
  for (long idx = 1; idx < total; ++idx) {
    long rest = idx;
    double dot = 0.0;
    for (int t = 0; t < n; ++t) {
      int digit = static_cast<int>(rest % 3);
      rest /= 3;
      if (digit == 1) dot += weights[t];
      else if (digit == 2) dot -= weights[t];
    }
    if (std::abs(dot) <= tol) return false;
  }
  return true;
}

}  // namespace strainsolve
