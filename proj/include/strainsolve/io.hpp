#pragma once

// File formats and read-count ingestion. All numeric serialization uses
// 17 significant digits so write-then-parse round trips reproduce the
// exact binary64 values. Vector and matrix files are comma-separated
// with '#' comments; matrices carry a "rows,cols" header line. Counts
// files are tab-separated with a "site ref alt1 [alt2 ...]" header.

#include "strainsolve/core.hpp"
#include "strainsolve/eval.hpp"
#include "strainsolve/posterior.hpp"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace strainsolve::io {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace impl {

inline double parse_double(const std::string& token, long line) {
  const char* begin = token.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw FormatError("expected a number, got '" + token + "'", line);
  return v;
}

inline long parse_count(const std::string& token, long line) {
  const char* begin = token.c_str();
  char* end = nullptr;
  long v = std::strtol(begin, &end, 10);
  if (end == begin || *end != '\0' || v < 0)
    throw FormatError("expected a nonnegative integer, got '" + token + "'",
                      line);
  return v;
}

inline std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string::size_type pos = 0;
  while (true) {
    auto next = text.find(sep, pos);
    if (next == std::string::npos) {
      out.push_back(text.substr(pos));
      return out;
    }
    out.push_back(text.substr(pos, next - pos));
    pos = next + 1;
  }
}

inline std::string strip(const std::string& text) {
  auto begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  auto end = text.find_last_not_of(" \t\r\n");
  return text.substr(begin, end - begin + 1);
}

inline bool is_comment_or_blank(const std::string& line) {
  std::string s = strip(line);
  return s.empty() || s[0] == '#';
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace impl

// ---------------------------------------------------------------------------
// Vectors and matrices

inline void write_vector(std::ostream& out, const Vector& v) {
  for (int i = 0; i < v.size(); ++i) {
    if (i) out << ',';
    out << format_double(v[i]);
  }
  out << '\n';
}

inline void write_vector_file(const std::string& path, const Vector& v,
                              const std::string& comment = "") {
  auto out = impl::open_output(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  write_vector(out, v);
}

/// Values may span several lines; they are concatenated in order.
inline Vector read_vector_file(const std::string& path) {
  auto in = impl::open_input(path);
  std::vector<double> values;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (impl::is_comment_or_blank(line)) continue;
    for (const std::string& token : impl::split(impl::strip(line), ','))
      values.push_back(impl::parse_double(impl::strip(token), lineno));
  }
  Vector v(static_cast<long>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    v[static_cast<long>(i)] = values[i];
  return v;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  out << m.rows() << ',' << m.cols() << '\n';
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

inline void write_matrix(std::ostream& out, const BinaryMatrix& m) {
  out << m.rows() << ',' << m.cols() << '\n';
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

inline void write_matrix_file(const std::string& path, const Matrix& m,
                              const std::string& comment = "") {
  auto out = impl::open_output(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  write_matrix(out, m);
}

inline void write_matrix_file(const std::string& path, const BinaryMatrix& m,
                              const std::string& comment = "") {
  auto out = impl::open_output(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  write_matrix(out, m);
}

namespace impl {

inline Matrix read_matrix_stream(std::istream& in, long& lineno) {
  std::string line;
  long rows = -1, cols = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_comment_or_blank(line)) continue;
    auto header = split(strip(line), ',');
    if (header.size() != 2)
      throw FormatError("matrix header must be 'rows,cols'", lineno);
    rows = parse_count(strip(header[0]), lineno);
    cols = parse_count(strip(header[1]), lineno);
    break;
  }
  if (rows < 0) throw FormatError("missing matrix header", lineno);
  Matrix m(rows, cols);
  long filled = 0;
  while (filled < rows && std::getline(in, line)) {
    ++lineno;
    if (is_comment_or_blank(line)) continue;
    auto tokens = split(strip(line), ',');
    if (static_cast<long>(tokens.size()) != cols)
      throw FormatError("matrix row has " + std::to_string(tokens.size()) +
                            " values, expected " + std::to_string(cols),
                        lineno);
    for (long j = 0; j < cols; ++j)
      m(filled, j) = parse_double(strip(tokens[static_cast<std::size_t>(j)]),
                                  lineno);
    ++filled;
  }
  if (filled < rows)
    throw FormatError("matrix ended after " + std::to_string(filled) + " of " +
                          std::to_string(rows) + " rows",
                      lineno);
  return m;
}

}  // namespace impl

inline Matrix read_matrix_file(const std::string& path) {
  auto in = impl::open_input(path);
  long lineno = 0;
  return impl::read_matrix_stream(in, lineno);
}

/// Reads a matrix file and validates 0/1 entries.
inline BinaryMatrix read_binary_matrix_file(const std::string& path) {
  Matrix m = read_matrix_file(path);
  BinaryMatrix bits(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      if (m(i, j) != 0.0 && m(i, j) != 1.0)
        throw FormatError("matrix in '" + path + "' is not binary at (" +
                          std::to_string(i) + "," + std::to_string(j) + ")");
      bits(i, j) = static_cast<int>(m(i, j));
    }
  return bits;
}

// ---------------------------------------------------------------------------
// Read-count ingestion

/// Raw per-site read counts: the reference-allele count plus one count
/// per alternate class.
struct SiteRecord {
  std::string site_id;
  long ref_count = 0;
  std::vector<long> alt_counts;

  long depth() const {
    long total = ref_count;
    for (long a : alt_counts) total += a;
    return total;
  }
};

/// Tab-separated counts file: '#' comments, a "site ref alt1 [alt2 ...]"
/// header, then one record per line.
inline std::vector<SiteRecord> parse_counts_file(const std::string& path) {
  auto in = impl::open_input(path);
  std::vector<SiteRecord> records;
  std::string line;
  long lineno = 0;
  bool header_seen = false;
  std::size_t alt_width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (impl::is_comment_or_blank(line)) continue;
    auto tokens = impl::split(impl::strip(line), '\t');
    for (auto& t : tokens) t = impl::strip(t);
    if (!header_seen) {
      if (tokens.size() < 3 || tokens[0] != "site" || tokens[1] != "ref")
        throw FormatError("counts header must start with 'site<TAB>ref<TAB>alt1'",
                          lineno);
      for (std::size_t c = 2; c < tokens.size(); ++c)
        if (tokens[c] != "alt" + std::to_string(c - 1))
          throw FormatError("unexpected header column '" + tokens[c] + "'",
                            lineno);
      alt_width = tokens.size() - 2;
      header_seen = true;
      continue;
    }
    if (tokens.size() != alt_width + 2)
      throw FormatError("record has " + std::to_string(tokens.size()) +
                            " fields, expected " + std::to_string(alt_width + 2),
                        lineno);
    SiteRecord rec;
    rec.site_id = tokens[0];
    rec.ref_count = impl::parse_count(tokens[1], lineno);
    for (std::size_t c = 2; c < tokens.size(); ++c)
      rec.alt_counts.push_back(impl::parse_count(tokens[c], lineno));
    records.push_back(std::move(rec));
  }
  return records;
}

/// Result of turning read counts into a measurement: block value c of a
/// kept site is alt_c / (ref + sum alt). Sites below min_depth (and
/// zero-depth sites) are dropped and reported. The returned dims carry
/// n = 1 as a placeholder; the strain count is chosen at solve time.
struct IngestResult {
  std::optional<Measurement> measurement;  // empty when no site was kept
  std::vector<int> kept;                   // indices into the input records
  std::vector<std::pair<int, std::string>> dropped;  // (index, reason)
};

inline IngestResult ingest_read_counts(const std::vector<SiteRecord>& records,
                                       long min_depth) {
  IngestResult out;
  if (records.empty()) return out;
  const std::size_t alt_width = records[0].alt_counts.size();
  if (alt_width < 1)
    throw FormatError("site records need at least one alternate class");
  for (const auto& rec : records)
    if (rec.alt_counts.size() != alt_width)
      throw FormatError("site '" + rec.site_id +
                        "' has an inconsistent alternate-count width");

  std::vector<double> values;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const SiteRecord& rec = records[i];
    long depth = rec.depth();
    if (depth <= 0) {
      out.dropped.emplace_back(static_cast<int>(i),
                               "zero depth at site '" + rec.site_id + "'");
      continue;
    }
    if (depth < min_depth) {
      out.dropped.emplace_back(static_cast<int>(i),
                               "depth " + std::to_string(depth) + " below " +
                                   std::to_string(min_depth) + " at site '" +
                                   rec.site_id + "'");
      continue;
    }
    for (long a : rec.alt_counts)
      values.push_back(static_cast<double>(a) / static_cast<double>(depth));
    out.kept.push_back(static_cast<int>(i));
  }
  if (out.kept.empty()) return out;
  ProblemDims dims(static_cast<int>(out.kept.size()), 1,
                   static_cast<int>(alt_width) + 1);
  Vector d(static_cast<long>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    d[static_cast<long>(i)] = values[i];
  out.measurement = Measurement(dims, std::move(d));
  return out;
}

// ---------------------------------------------------------------------------
// Result files (flat key-value + embedded CSV blocks, or JSON)

inline std::string timestamp_line() {
  std::time_t now = std::time(nullptr);
  char buf[40];
  std::tm tm_utc;
  gmtime_r(&now, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return std::string("# generated: ") + buf;
}

struct ReconstructionRecord {
  std::string method;
  ProblemDims dims;
  Vector gamma;
  BinaryMatrix matrix;
  Vector weights;
  double objective = 0.0;
  bool certified = false;
  double gap = 0.0;
};

inline void write_reconstruction_text(std::ostream& out,
                                      const ReconstructionRecord& rec,
                                      bool with_timestamp) {
  out << "# strainsolve reconstruct v1\n";
  if (with_timestamp) out << timestamp_line() << '\n';
  out << "method = " << rec.method << '\n';
  out << "m = " << rec.dims.sites << '\n';
  out << "n = " << rec.dims.strains << '\n';
  out << "p = " << rec.dims.classes << '\n';
  out << "gamma = ";
  write_vector(out, rec.gamma);
  out << "objective = " << format_double(rec.objective) << '\n';
  out << "certified = " << (rec.certified ? "true" : "false") << '\n';
  out << "gap = " << format_double(rec.gap) << '\n';
  out << "matrix =\n";
  write_matrix(out, rec.matrix);
  out << "weights = ";
  write_vector(out, rec.weights);
}

inline ReconstructionRecord read_reconstruction_text(std::istream& in) {
  ReconstructionRecord rec;
  std::string line;
  long lineno = 0;
  int m = 0, n = 0, p = 2;
  std::optional<Matrix> matrix;
  while (std::getline(in, line)) {
    ++lineno;
    if (impl::is_comment_or_blank(line)) continue;
    std::string s = impl::strip(line);
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw FormatError("expected 'key = value'", lineno);
    std::string key = impl::strip(s.substr(0, eq));
    std::string value = impl::strip(s.substr(eq + 1));
    if (key == "method") rec.method = value;
    else if (key == "m") m = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "n") n = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "p") p = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "objective") rec.objective = impl::parse_double(value, lineno);
    else if (key == "certified") rec.certified = value == "true";
    else if (key == "gap") rec.gap = impl::parse_double(value, lineno);
    else if (key == "gamma" || key == "weights") {
      std::vector<double> vals;
      for (const auto& tok : impl::split(value, ','))
        vals.push_back(impl::parse_double(impl::strip(tok), lineno));
      Vector v(static_cast<long>(vals.size()));
      for (std::size_t i = 0; i < vals.size(); ++i)
        v[static_cast<long>(i)] = vals[i];
      if (key == "gamma") rec.gamma = v;
      else rec.weights = v;
    } else if (key == "matrix") {
      matrix = impl::read_matrix_stream(in, lineno);
    } else {
      throw FormatError("unknown key '" + key + "'", lineno);
    }
  }
  if (!matrix) throw FormatError("result file has no matrix block");
  rec.dims = ProblemDims(m, n, p);
  rec.matrix = BinaryMatrix(matrix->rows(), matrix->cols());
  for (int i = 0; i < matrix->rows(); ++i)
    for (int j = 0; j < matrix->cols(); ++j)
      rec.matrix(i, j) = static_cast<int>((*matrix)(i, j));
  return rec;
}

struct PosteriorRecord {
  ProblemDims dims;
  Vector gamma;
  posterior::PosteriorStats stats;
};

inline void write_posterior_text(std::ostream& out, const PosteriorRecord& rec,
                                 bool with_timestamp) {
  out << "# strainsolve posterior v1\n";
  if (with_timestamp) out << timestamp_line() << '\n';
  out << "m = " << rec.dims.sites << '\n';
  out << "n = " << rec.dims.strains << '\n';
  out << "p = " << rec.dims.classes << '\n';
  out << "gamma = ";
  write_vector(out, rec.gamma);
  out << "nodes = " << rec.stats.node_count << '\n';
  out << "seed = " << rec.stats.rng_seed << '\n';
  out << "weights_mean = ";
  write_vector(out, rec.stats.weights_mean);
  out << "weights_std = ";
  write_vector(out, rec.stats.weights_std);
  out << "matrix_mean =\n";
  write_matrix(out, rec.stats.matrix_mean);
  out << "matrix_std =\n";
  write_matrix(out, rec.stats.matrix_std);
}

// ---------------------------------------------------------------------------
// Plot tables (entropy and error maps) and benchmark tables

inline void write_map_table(std::ostream& out,
                            const std::vector<std::array<double, 4>>& rows,
                            const std::string& value_name) {
  out << "w1,w2,w3," << value_name << '\n';
  for (const auto& row : rows) {
    out << format_double(row[0]) << ',' << format_double(row[1]) << ','
        << format_double(row[2]) << ',' << format_double(row[3]) << '\n';
  }
}

inline void write_benchmark_errors(std::ostream& out,
                                   const eval::BenchmarkResult& result) {
  out << "m,n,p,gamma,sample,backend,error,objective,certified\n";
  for (const auto& row : result.rows) {
    out << row.dims.sites << ',' << row.dims.strains << ',' << row.dims.classes
        << ',' << format_double(row.gamma) << ',' << row.sample << ','
        << bcd::backend_name(row.backend) << ',' << format_double(row.error)
        << ',' << format_double(row.objective) << ','
        << (row.certified ? 1 : 0) << '\n';
  }
}

inline void write_benchmark_summary(std::ostream& out,
                                    const eval::BenchmarkResult& result) {
  out << "m,n,p,gamma,backend,mean_error,median_error,q90_error,"
         "baseline_mean_error\n";
  for (const auto& cell : result.summaries) {
    out << cell.dims.sites << ',' << cell.dims.strains << ','
        << cell.dims.classes << ',' << format_double(cell.gamma) << ','
        << bcd::backend_name(cell.backend) << ','
        << format_double(cell.mean_error) << ','
        << format_double(cell.median_error) << ','
        << format_double(cell.q90_error) << ','
        << format_double(cell.baseline_mean_error) << '\n';
  }
}

inline void write_benchmark_timings(std::ostream& out,
                                    const eval::BenchmarkResult& result) {
  out << "m,n,p,gamma,sample,backend,wall_seconds\n";
  for (const auto& row : result.rows) {
    out << row.dims.sites << ',' << row.dims.strains << ',' << row.dims.classes
        << ',' << format_double(row.gamma) << ',' << row.sample << ','
        << bcd::backend_name(row.backend) << ','
        << format_double(row.wall_seconds) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Benchmark spec files (key = value; list values comma-separated)

inline eval::BenchmarkSpec parse_benchmark_spec(const std::string& path) {
  auto in = impl::open_input(path);
  std::vector<int> ms{10}, ns{3}, ps{2};
  eval::BenchmarkSpec spec;
  spec.noise_levels = {1e-2, 1e-3};
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (impl::is_comment_or_blank(line)) continue;
    std::string s = impl::strip(line);
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw FormatError("expected 'key = value'", lineno);
    std::string key = impl::strip(s.substr(0, eq));
    std::string value = impl::strip(s.substr(eq + 1));
    auto parse_ints = [&](std::vector<int>& out_list) {
      out_list.clear();
      for (const auto& tok : impl::split(value, ','))
        out_list.push_back(
            static_cast<int>(impl::parse_count(impl::strip(tok), lineno)));
    };
    if (key == "m") parse_ints(ms);
    else if (key == "n") parse_ints(ns);
    else if (key == "p") parse_ints(ps);
    else if (key == "gamma") {
      spec.noise_levels.clear();
      for (const auto& tok : impl::split(value, ','))
        spec.noise_levels.push_back(impl::parse_double(impl::strip(tok), lineno));
    } else if (key == "samples")
      spec.sample_count = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "backends") {
      spec.backends.clear();
      for (const auto& tok : impl::split(value, ',')) {
        std::string name = impl::strip(tok);
        if (name == "bcd") spec.backends.push_back(bcd::Backend::bcd);
        else if (name == "global") spec.backends.push_back(bcd::Backend::global);
        else if (name == "hybrid") spec.backends.push_back(bcd::Backend::hybrid);
        else throw FormatError("unknown backend '" + name + "'", lineno);
      }
    } else if (key == "seed")
      spec.rng_seed = static_cast<std::uint64_t>(impl::parse_count(value, lineno));
    else if (key == "trials")
      spec.bcd_config.n_trials = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "tol_w")
      spec.bcd_config.tol_w = impl::parse_double(value, lineno);
    else if (key == "max_iters")
      spec.bcd_config.max_iters = static_cast<int>(impl::parse_count(value, lineno));
    else if (key == "mip_gap")
      spec.mip_gap = impl::parse_double(value, lineno);
    else if (key == "node_limit")
      spec.node_limit = impl::parse_count(value, lineno);
    else if (key == "baseline_pairs")
      spec.baseline_pairs = static_cast<int>(impl::parse_count(value, lineno));
    else
      throw FormatError("unknown key '" + key + "'", lineno);
  }
  for (int m : ms)
    for (int n : ns)
      for (int p : ps) spec.cells.emplace_back(m, n, p);
  return spec;
}

}  // namespace strainsolve::io
