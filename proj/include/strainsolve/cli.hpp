#pragma once

// Command-line surface. Subcommands: reconstruct, posterior,
// entropy-map, moi, synth, benchmark, ingest, error-map. Exit codes:
// 0 success, 2 usage error, 3 input format error, 4 solver
// non-certification under --require-certified, 1 anything else.

#include "strainsolve/bcd.hpp"
#include "strainsolve/core.hpp"
#include "strainsolve/eval.hpp"
#include "strainsolve/io.hpp"
#include "strainsolve/miqp.hpp"
#include "strainsolve/posterior.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace strainsolve::cli {

/// Solver knobs shared by the solving subcommands, assembled from flags.
struct RunConfig {
  ProblemDims dims;
  Vector gamma;
  bcd::Backend method = bcd::Backend::bcd;
  bcd::BcdConfig bcd_config;
  double mip_gap = 1e-6;
  long node_limit = 1000000;
  int posterior_nodes = 10000;
  std::uint64_t rng_seed = 0;
  std::string input_path;
  std::string output_path;
};

namespace impl {

inline Vector expand_gamma(const std::string& text, int rows) {
  std::vector<double> values;
  for (const auto& tok : io::impl::split(text, ','))
    values.push_back(io::impl::parse_double(io::impl::strip(tok), 0));
  if (values.empty()) throw FormatError("--gamma needs at least one value");
  Vector g(rows);
  if (values.size() == 1) {
    g.setConstant(values[0]);
  } else if (static_cast<int>(values.size()) == rows) {
    for (int i = 0; i < rows; ++i) g[i] = values[static_cast<std::size_t>(i)];
  } else {
    throw FormatError("--gamma must be a scalar or have one value per row (" +
                      std::to_string(rows) + ")");
  }
  return g;
}

inline bcd::Backend parse_method(const std::string& name) {
  if (name == "bcd") return bcd::Backend::bcd;
  if (name == "global") return bcd::Backend::global;
  if (name == "hybrid") return bcd::Backend::hybrid;
  throw FormatError("unknown method '" + name + "'");
}

inline int derive_sites(long data_rows, int classes) {
  int block = classes - 1;
  if (block < 1 || data_rows % block != 0)
    throw FormatError("measurement length " + std::to_string(data_rows) +
                      " is not a multiple of p-1 = " + std::to_string(block));
  return static_cast<int>(data_rows / block);
}

// Writes to the path, or stdout when the path is empty or "-".
inline void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  auto out = io::impl::open_output(path);
  out << text;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json matrix_to_json(const BinaryMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

}  // namespace impl

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"strainsolve: strain barcodes and frequencies from mixed "
               "measurement vectors"};
  app.require_subcommand(1);

  // --- reconstruct ---------------------------------------------------------
  auto* rec = app.add_subcommand(
      "reconstruct", "MAP estimate of the strain matrix and frequencies");
  std::string rec_input, rec_out, rec_gamma, rec_method = "bcd",
              rec_format = "text";
  int rec_n = 0, rec_p = 2, rec_trials = 20, rec_max_iters = 10,
      rec_threads = 0;
  double rec_tol_w = 1e-3, rec_mip_gap = 1e-6;
  long rec_node_limit = 1000000;
  std::uint64_t rec_seed = 0;
  bool rec_no_timestamp = false, rec_require_certified = false;
  rec->add_option("--input", rec_input, "measurement vector file")->required();
  rec->add_option("--n", rec_n, "number of strains")->required();
  rec->add_option("--p", rec_p, "number of classes per site");
  rec->add_option("--gamma", rec_gamma, "noise stddev (scalar or per-row list)")
      ->required();
  rec->add_option("--method", rec_method, "bcd | global | hybrid");
  rec->add_option("--trials", rec_trials, "descent trials");
  rec->add_option("--tol-w", rec_tol_w, "weight stagnation tolerance");
  rec->add_option("--max-iters", rec_max_iters, "descent iterations per trial");
  rec->add_option("--mip-gap", rec_mip_gap, "certification gap");
  rec->add_option("--node-limit", rec_node_limit, "branch-and-bound node cap");
  rec->add_option("--seed", rec_seed, "rng seed");
  rec->add_option("--threads", rec_threads, "worker cap (0 = auto)");
  rec->add_option("--out", rec_out, "output path (default stdout)");
  rec->add_option("--format", rec_format, "text | json");
  rec->add_flag("--no-timestamp", rec_no_timestamp, "omit the timestamp line");
  rec->add_flag("--require-certified", rec_require_certified,
                "exit 4 unless the estimate is certified");

  // --- posterior -----------------------------------------------------------
  auto* post = app.add_subcommand(
      "posterior", "conditional means and standard deviations");
  std::string post_input, post_out, post_gamma, post_format = "text";
  int post_n = 0, post_p = 2, post_nodes = 10000, post_threads = 0;
  std::uint64_t post_seed = 0;
  bool post_no_timestamp = false;
  post->add_option("--input", post_input, "measurement vector file")->required();
  post->add_option("--n", post_n, "number of strains")->required();
  post->add_option("--p", post_p, "number of classes per site");
  post->add_option("--gamma", post_gamma, "noise stddev")->required();
  post->add_option("--nodes", post_nodes, "Monte Carlo quadrature nodes");
  post->add_option("--seed", post_seed, "rng seed");
  post->add_option("--threads", post_threads, "worker cap (0 = auto)");
  post->add_option("--out", post_out, "output path (default stdout)");
  post->add_option("--format", post_format, "text | json");
  post->add_flag("--no-timestamp", post_no_timestamp, "omit the timestamp line");

  // --- entropy-map ---------------------------------------------------------
  auto* emap = app.add_subcommand(
      "entropy-map", "matrix-posterior entropy over the n=3 weight simplex");
  std::string emap_input, emap_out, emap_gamma;
  int emap_n = 3, emap_p = 2, emap_resolution = 100;
  emap->add_option("--input", emap_input, "measurement vector file")->required();
  emap->add_option("--n", emap_n, "number of strains (must be 3)");
  emap->add_option("--p", emap_p, "number of classes per site");
  emap->add_option("--gamma", emap_gamma, "noise stddev")->required();
  emap->add_option("--resolution", emap_resolution, "barycentric subdivisions");
  emap->add_option("--out", emap_out, "output table path (default stdout)");

  // --- moi -----------------------------------------------------------------
  auto* moi = app.add_subcommand(
      "moi", "estimate the number of strains by the discrepancy principle");
  std::string moi_input, moi_gamma, moi_method = "bcd";
  int moi_p = 2, moi_nmax = 6, moi_trials = 20, moi_max_iters = 10;
  double moi_tol_w = 1e-3, moi_mip_gap = 1e-6;
  long moi_node_limit = 1000000;
  std::uint64_t moi_seed = 0;
  moi->add_option("--input", moi_input, "measurement vector file")->required();
  moi->add_option("--p", moi_p, "number of classes per site");
  moi->add_option("--gamma", moi_gamma, "noise stddev")->required();
  moi->add_option("--n-max", moi_nmax, "largest strain count to try");
  moi->add_option("--method", moi_method, "bcd | global | hybrid");
  moi->add_option("--trials", moi_trials, "descent trials");
  moi->add_option("--tol-w", moi_tol_w, "weight stagnation tolerance");
  moi->add_option("--max-iters", moi_max_iters, "descent iterations per trial");
  moi->add_option("--mip-gap", moi_mip_gap, "certification gap");
  moi->add_option("--node-limit", moi_node_limit, "branch-and-bound node cap");
  moi->add_option("--seed", moi_seed, "rng seed");

  // --- synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand(
      "synth", "sample a ground truth from the prior and write noisy data");
  std::string synth_out, synth_gamma;
  int synth_m = 0, synth_n = 0, synth_p = 2;
  std::uint64_t synth_seed = 0;
  synth->add_option("--m", synth_m, "number of sites")->required();
  synth->add_option("--n", synth_n, "number of strains")->required();
  synth->add_option("--p", synth_p, "number of classes per site");
  synth->add_option("--gamma", synth_gamma, "noise stddev")->required();
  synth->add_option("--seed", synth_seed, "rng seed");
  synth->add_option("--out", synth_out, "output path prefix")->required();

  // --- benchmark -----------------------------------------------------------
  auto* bench = app.add_subcommand(
      "benchmark", "statistical reconstruction-error benchmark");
  std::string bench_spec, bench_out;
  int bench_threads = 0;
  bench->add_option("--spec", bench_spec, "benchmark spec file")->required();
  bench->add_option("--out", bench_out, "output directory")->required();
  bench->add_option("--threads", bench_threads, "worker cap (0 = auto)");

  // --- ingest --------------------------------------------------------------
  auto* ingest = app.add_subcommand(
      "ingest", "turn read counts into a measurement vector");
  std::string ingest_counts, ingest_out;
  long ingest_min_depth = 10;
  ingest->add_option("--counts", ingest_counts, "tab-separated counts file")
      ->required();
  ingest->add_option("--min-depth", ingest_min_depth, "minimum total depth");
  ingest->add_option("--out", ingest_out, "measurement output path")->required();

  // --- error-map -----------------------------------------------------------
  auto* errmap = app.add_subcommand(
      "error-map", "reconstruction error over the n=3 weight simplex");
  std::string errmap_matrix, errmap_out, errmap_gamma;
  int errmap_resolution = 60, errmap_trials = 20, errmap_threads = 0;
  std::uint64_t errmap_seed = 0;
  errmap->add_option("--truth-matrix", errmap_matrix, "strain matrix file")
      ->required();
  errmap->add_option("--gamma", errmap_gamma, "noise stddev list")->required();
  errmap->add_option("--resolution", errmap_resolution,
                     "barycentric subdivisions");
  errmap->add_option("--trials", errmap_trials, "descent trials per point");
  errmap->add_option("--seed", errmap_seed, "rng seed");
  errmap->add_option("--threads", errmap_threads, "worker cap (0 = auto)");
  errmap->add_option("--out", errmap_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (rec->parsed()) {
      Vector d = io::read_vector_file(rec_input);
      int m = impl::derive_sites(d.size(), rec_p);
      ProblemDims dims(m, rec_n, rec_p);
      Measurement data(dims, d);
      if (data.has_out_of_range())
        std::cerr << "warning: measurement has values outside [0,1]; the "
                     "Gaussian model tolerates this\n";
      NoiseModel noise(impl::expand_gamma(rec_gamma, dims.rows()));
      bcd::BcdConfig cfg;
      cfg.n_trials = rec_trials;
      cfg.tol_w = rec_tol_w;
      cfg.max_iters = rec_max_iters;
      cfg.rng_seed = rec_seed;
      cfg.threads = rec_threads;
      Reconstruction est =
          bcd::solve_map(data, noise, dims, impl::parse_method(rec_method), cfg,
                         rec_mip_gap, rec_node_limit);
      io::ReconstructionRecord record{rec_method, dims, noise.stddevs(),
                                      est.matrix.entries(),
                                      est.weights.values(), est.objective,
                                      est.certified, est.gap.value_or(-1.0)};
      std::ostringstream text;
      if (rec_format == "json") {
        nlohmann::json j;
        if (!rec_no_timestamp) j["generated"] = io::timestamp_line().substr(13);
        j["method"] = record.method;
        j["m"] = dims.sites;
        j["n"] = dims.strains;
        j["p"] = dims.classes;
        j["gamma"] = impl::vector_to_json(record.gamma);
        j["objective"] = record.objective;
        j["certified"] = record.certified;
        if (est.gap) j["gap"] = *est.gap;
        else j["gap"] = nullptr;
        j["matrix"] = impl::matrix_to_json(record.matrix);
        j["weights"] = impl::vector_to_json(record.weights);
        text << j.dump(2) << '\n';
      } else {
        io::write_reconstruction_text(text, record, !rec_no_timestamp);
      }
      impl::write_text(rec_out, text.str());
      if (rec_require_certified && !est.certified) {
        std::cerr << "error: estimate not certified (gap "
                  << io::format_double(est.gap.value_or(-1.0)) << ")\n";
        return 4;
      }
      return 0;
    }

    if (post->parsed()) {
      Vector d = io::read_vector_file(post_input);
      int m = impl::derive_sites(d.size(), post_p);
      ProblemDims dims(m, post_n, post_p);
      Measurement data(dims, d);
      NoiseModel noise(impl::expand_gamma(post_gamma, dims.rows()));
      posterior::PosteriorStats stats = posterior::posterior_stats(
          data, noise, dims, post_nodes, post_seed, post_threads);
      std::ostringstream text;
      if (post_format == "json") {
        nlohmann::json j;
        if (!post_no_timestamp) j["generated"] = io::timestamp_line().substr(13);
        j["m"] = dims.sites;
        j["n"] = dims.strains;
        j["p"] = dims.classes;
        j["gamma"] = impl::vector_to_json(noise.stddevs());
        j["nodes"] = stats.node_count;
        j["seed"] = stats.rng_seed;
        j["weights_mean"] = impl::vector_to_json(stats.weights_mean);
        j["weights_std"] = impl::vector_to_json(stats.weights_std);
        j["matrix_mean"] = impl::matrix_to_json(stats.matrix_mean);
        j["matrix_std"] = impl::matrix_to_json(stats.matrix_std);
        text << j.dump(2) << '\n';
      } else {
        io::write_posterior_text(text,
                                 io::PosteriorRecord{dims, noise.stddevs(), stats},
                                 !post_no_timestamp);
      }
      impl::write_text(post_out, text.str());
      return 0;
    }

    if (emap->parsed()) {
      Vector d = io::read_vector_file(emap_input);
      int m = impl::derive_sites(d.size(), emap_p);
      ProblemDims dims(m, emap_n, emap_p);
      Measurement data(dims, d);
      NoiseModel noise(impl::expand_gamma(emap_gamma, dims.rows()));
      auto rows = posterior::entropy_map(data, noise, dims, emap_resolution);
      std::ostringstream text;
      io::write_map_table(text, rows, "entropy_bits");
      impl::write_text(emap_out, text.str());
      return 0;
    }

    if (moi->parsed()) {
      Vector d = io::read_vector_file(moi_input);
      int m = impl::derive_sites(d.size(), moi_p);
      ProblemDims probe(m, 1, moi_p);
      Measurement data(probe, d);
      NoiseModel noise(impl::expand_gamma(moi_gamma, data.size()));
      bcd::BcdConfig cfg;
      cfg.n_trials = moi_trials;
      cfg.tol_w = moi_tol_w;
      cfg.max_iters = moi_max_iters;
      cfg.rng_seed = moi_seed;
      bcd::MoiEstimate est = bcd::estimate_moi(
          data, noise, m, moi_p, moi_nmax, impl::parse_method(moi_method), cfg,
          moi_mip_gap, moi_node_limit);
      std::cout << "estimated_n = " << est.strain_count << '\n';
      for (std::size_t i = 0; i < est.discrepancies.size(); ++i)
        std::cout << "d(" << (i + 1)
                  << ") = " << io::format_double(est.discrepancies[i]) << '\n';
      std::cout << "threshold = " << io::format_double(noise.total_variance())
                << '\n';
      std::cout << "reached = " << (est.threshold_reached ? "true" : "false")
                << '\n';
      return 0;
    }

    if (synth->parsed()) {
      ProblemDims dims(synth_m, synth_n, synth_p);
      NoiseModel noise(impl::expand_gamma(synth_gamma, dims.rows()));
      auto [truth_m, truth_w] = eval::sample_ground_truth(dims, synth_seed);
      Measurement data = eval::add_noise(dims, forward(truth_m, truth_w), noise,
                                         detail::derive_seed(synth_seed, 0x401u));
      io::write_matrix_file(synth_out + "_M.csv", truth_m.entries(),
                            "strain matrix (ground truth)");
      io::write_vector_file(synth_out + "_w.csv", truth_w.values(),
                            "strain frequencies (ground truth)");
      io::write_vector_file(synth_out + "_d.csv", data.data(),
                            "noisy measurement");
      return 0;
    }

    if (bench->parsed()) {
      eval::BenchmarkSpec spec = io::parse_benchmark_spec(bench_spec);
      spec.threads = bench_threads;
      eval::BenchmarkResult result = eval::run_benchmark(spec);
      std::filesystem::create_directories(bench_out);
      {
        auto out = io::impl::open_output(bench_out + "/errors.csv");
        io::write_benchmark_errors(out, result);
      }
      {
        auto out = io::impl::open_output(bench_out + "/summary.csv");
        io::write_benchmark_summary(out, result);
      }
      {
        auto out = io::impl::open_output(bench_out + "/timings.csv");
        io::write_benchmark_timings(out, result);
      }
      return 0;
    }

    if (ingest->parsed()) {
      auto records = io::parse_counts_file(ingest_counts);
      io::IngestResult result = io::ingest_read_counts(records, ingest_min_depth);
      for (const auto& [index, reason] : result.dropped)
        std::cerr << "dropped record " << index << ": " << reason << '\n';
      if (!result.measurement) {
        std::cerr << "error: no usable sites\n";
        return 3;
      }
      const ProblemDims& dims = result.measurement->dims();
      io::write_vector_file(ingest_out, result.measurement->data(),
                            "ingested measurement, m=" +
                                std::to_string(dims.sites) +
                                ", p=" + std::to_string(dims.classes));
      std::cerr << "kept " << result.kept.size() << " of " << records.size()
                << " sites\n";
      return 0;
    }

    if (errmap->parsed()) {
      BinaryMatrix bits = io::read_binary_matrix_file(errmap_matrix);
      if (bits.cols() != 3)
        throw UnsupportedDimsError("error-map requires a 3-strain matrix");
      std::vector<double> gammas;
      for (const auto& tok : io::impl::split(errmap_gamma, ','))
        gammas.push_back(io::impl::parse_double(io::impl::strip(tok), 0));
      // p recovered from a known strain-count layout: rows = m (p=2) is
      // the supported map scenario.
      ProblemDims dims(static_cast<int>(bits.rows()), 3, 2);
      StrainMatrix truth(dims, bits);
      bcd::BcdConfig cfg;
      cfg.n_trials = errmap_trials;
      auto maps = eval::error_map(truth, gammas, errmap_resolution, errmap_seed,
                                  cfg, errmap_threads);
      std::filesystem::create_directories(errmap_out);
      for (std::size_t i = 0; i < maps.size(); ++i) {
        auto out = io::impl::open_output(errmap_out + "/error_map_g" +
                                         std::to_string(i) + ".csv");
        out << "# gamma = " << io::format_double(maps[i].gamma) << '\n';
        io::write_map_table(out, maps[i].rows, "error");
      }
      return 0;
    }
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace strainsolve::cli
