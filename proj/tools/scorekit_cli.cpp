#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scorekit/bench.hpp"
#include "scorekit/estimators.hpp"
#include "scorekit/io.hpp"
#include "scorekit/oracles.hpp"

using namespace scorekit;

namespace {

constexpr int kExitInput = 1;
constexpr int kExitNumeric = 2;

struct FitArgs {
  std::string samples;
  std::string out;
  std::string method = "tikhonov";
  std::string kernel = "curlfree";
  std::string family = "imq";
  std::string bandwidth = "median";
  double lambda = 0.0;
  int iterations = 0;
  double threshold = 0.0;
  double fraction = 0.0;
  Index rank = 0;
  double step = 0.0;
  double nu = 1.0;
  Index subset_size = 0;
  std::uint64_t seed = 0;
  double cg_tolerance = 1e-4;
  int cg_max_iterations = 40;
};

struct PredictArgs {
  std::string model;
  std::string queries;
  std::string out;
  bool log_density = false;
};

struct ExperimentArgs {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

struct PlotArgs {
  std::string csv;
  std::string out;
  bench::PlotSpec spec;
  std::vector<std::string> filters;
};

struct SampleArgs {
  std::string distribution = "grid";
  std::string mixture;
  Index dim = 1;
  Index count = 0;
  std::uint64_t seed = 0;
  std::uint64_t grid_seed = 0;
  std::string out;
};

template <class Writer>
void write_output(const std::string& path, Writer&& w) {
  if (path.empty() || path == "-") {
    w(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  w(out);
  if (!out) throw InputError("error writing " + path);
}

MatrixKernelSpec kernel_from(const FitArgs& a, const SampleMatrix& samples) {
  KernelKind kind;
  if (a.kernel == "curlfree") kind = KernelKind::CurlFree;
  else if (a.kernel == "diagonal") kind = KernelKind::Diagonal;
  else throw InputError("--kernel must be curlfree or diagonal");
  KernelFamily family;
  if (a.family == "imq") family = KernelFamily::IMQ;
  else if (a.family == "gaussian") family = KernelFamily::Gaussian;
  else throw InputError("--family must be imq or gaussian");
  double bw = 0.0;
  if (a.bandwidth == "median") {
    bw = median_bandwidth(samples);
  } else {
    std::size_t used = 0;
    try {
      bw = std::stod(a.bandwidth, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != a.bandwidth.size()) throw InputError("--bandwidth must be median or a positive number");
  }
  return {kind, ScalarRadialKernel(family, bw)};
}

int iteration_count(const FitArgs& a, bool landweber) {
  if (a.iterations > 0) return a.iterations;
  if (a.lambda > 0.0) return landweber ? landweber_iterations(a.lambda) : nu_method_iterations(a.lambda);
  throw InputError("give --iterations or --lambda");
}

double require_lambda(const FitArgs& a) {
  if (!(a.lambda > 0.0)) throw InputError("--lambda must be given and positive");
  return a.lambda;
}

int run_fit(const FitArgs& a) {
  const SampleMatrix samples(read_csv_file(a.samples));
  const MatrixKernelSpec spec = kernel_from(a, samples);
  FittedScoreEstimator est = [&]() -> FittedScoreEstimator {
    if (a.method == "tikhonov") return fit_tikhonov(samples, spec, require_lambda(a));
    if (a.method == "kef_cg") {
      return fit_tikhonov_cg(samples, spec, require_lambda(a), a.cg_tolerance, a.cg_max_iterations);
    }
    if (a.method == "truncated_tikhonov") return fit_truncated_tikhonov(samples, spec, require_lambda(a));
    if (a.method == "spectral_cutoff") {
      SpectralCutoff sc;
      if (a.rank > 0) {
        sc.rank = a.rank;
      } else if (a.fraction > 0.0) {
        const double n = static_cast<double>(samples.size() * samples.dim());
        sc.rank = std::max<Index>(1, static_cast<Index>(std::floor(a.fraction * n)));
      } else if (a.threshold > 0.0) {
        sc.threshold = a.threshold;
      } else {
        throw InputError("spectral_cutoff needs --rank, --fraction or --threshold");
      }
      return fit_spectral_cutoff(samples, spec, sc);
    }
    if (a.method == "landweber") return fit_landweber(samples, spec, Landweber{a.step, iteration_count(a, true)});
    if (a.method == "nu_method") return fit_nu_method(samples, spec, NuMethod{a.nu, iteration_count(a, false)});
    if (a.method == "nystrom") {
      const Index m = samples.size();
      const Index n = a.subset_size > 0 ? std::min(a.subset_size, m) : std::max<Index>(1, m / 8);
      std::vector<Index> all(static_cast<std::size_t>(m));
      std::iota(all.begin(), all.end(), Index{0});
      std::mt19937_64 rng(a.seed);
      std::shuffle(all.begin(), all.end(), rng);
      all.resize(static_cast<std::size_t>(n));
      std::sort(all.begin(), all.end());
      return fit_nystrom(samples, all, spec, TruncatedTikhonov{require_lambda(a)});
    }
    throw InputError("unknown method " + a.method);
  }();
  for (const auto& w : est.diagnostics().warnings) std::cerr << "warning: " << w << '\n';
  save_estimator(a.out, est);
  return 0;
}

int run_predict(const PredictArgs& a) {
  const FittedScoreEstimator est = load_estimator(a.model);
  const RowMatrix q = read_csv_file(a.queries);
  if (a.log_density) {
    const Vector v = est.log_density(q);
    write_output(a.out, [&](std::ostream& o) { write_csv(o, RowMatrix(v), {"log_density"}); });
  } else {
    const RowMatrix s = est.predict(q);
    write_output(a.out, [&](std::ostream& o) { write_csv(o, s, numbered_header("s", est.dim())); });
  }
  return 0;
}

bench::ExperimentConfig experiment_config(const ExperimentArgs& a) {
  bench::ExperimentConfig c = bench::load_config(a.config);
  if (a.seed) c.seeds = {*a.seed};
  if (a.threads) {
    if (*a.threads < 1) throw InputError("--threads must be >= 1");
    c.threads = *a.threads;
  }
  return c;
}

void report_failures(const bench::ExperimentResult& r) {
  std::size_t failed = 0;
  for (const auto& row : r.rows) failed += std::isnan(row.error) ? 1 : 0;
  if (failed) std::cerr << failed << " of " << r.rows.size() << " points failed; see the reason column\n";
}

int run_grid(const ExperimentArgs& a) {
  const auto r = bench::run_grid_experiment(experiment_config(a), a.out);
  report_failures(r);
  return 0;
}

int run_convergence(const ExperimentArgs& a) {
  const auto r = bench::run_convergence_experiment(experiment_config(a), a.out);
  report_failures(r);
  bench::write_slopes_csv(std::cout, r.slopes);
  return 0;
}

int run_plot(PlotArgs a) {
  for (const auto& f : a.filters) {
    const auto eq = f.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("--filter expects column=value, got " + f);
    a.spec.filters.emplace_back(f.substr(0, eq), f.substr(eq + 1));
  }
  std::ifstream in(a.csv);
  if (!in) throw InputError("cannot open " + a.csv);
  const auto table = bench::read_text_csv(in);
  const std::string svg = bench::emit_plot(table, a.spec);
  write_output(a.out, [&](std::ostream& o) { o << svg; });
  return 0;
}

int run_sample(const SampleArgs& a) {
  bench::DistributionConfig dc;
  dc.type = a.distribution;
  dc.seed = a.grid_seed;
  dc.path = a.mixture;
  if (dc.type != "grid" && dc.type != "gaussian" && dc.type != "mixture-file") {
    throw InputError("--distribution must be grid, gaussian or mixture-file");
  }
  const auto dist = bench::detail::make_distribution(dc, a.dim);
  const SampleMatrix s = sample(dist, a.count, a.seed);
  write_output(a.out, [&](std::ostream& o) { write_samples_csv(o, s.data()); });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonparametric score estimation: fitting, prediction and benchmark sweeps"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit an estimator to a samples CSV and save it");
  fit->add_option("--samples", fa.samples, "Samples CSV (header x1,...,xd)")->required();
  fit->add_option("--out", fa.out, "Output estimator file")->required();
  fit->add_option("--method", fa.method,
                  "tikhonov | kef_cg | truncated_tikhonov | spectral_cutoff | landweber | nu_method | nystrom")
      ->capture_default_str();
  fit->add_option("--kernel", fa.kernel, "curlfree | diagonal")->capture_default_str();
  fit->add_option("--family", fa.family, "imq | gaussian")->capture_default_str();
  fit->add_option("--bandwidth", fa.bandwidth, "median or a positive number")->capture_default_str();
  fit->add_option("--lambda", fa.lambda, "Regularization parameter");
  fit->add_option("--iterations", fa.iterations, "Iteration count (landweber, nu_method)");
  fit->add_option("--threshold", fa.threshold, "Eigenvalue threshold (spectral_cutoff)");
  fit->add_option("--rank", fa.rank, "Retained eigenpairs (spectral_cutoff)");
  fit->add_option("--fraction", fa.fraction, "Retained fraction of M*d eigenpairs (spectral_cutoff)");
  fit->add_option("--step", fa.step, "Landweber step (0: automatic)");
  fit->add_option("--nu", fa.nu, "nu-method order")->capture_default_str();
  fit->add_option("--subset-size", fa.subset_size, "Nystrom subset size (default M/8)");
  fit->add_option("--seed", fa.seed, "Seed for the Nystrom subset")->capture_default_str();
  fit->add_option("--cg-tol", fa.cg_tolerance, "CG relative tolerance (kef_cg)")->capture_default_str();
  fit->add_option("--cg-max", fa.cg_max_iterations, "CG iteration limit (kef_cg)")->capture_default_str();

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Evaluate a saved estimator on a queries CSV");
  predict->add_option("--model", pa.model, "Estimator file from fit")->required();
  predict->add_option("--queries", pa.queries, "Queries CSV (header x1,...,xd)")->required();
  predict->add_option("--out", pa.out, "Output CSV (default stdout)");
  predict->add_flag("--log-density", pa.log_density, "Output the recovered log density instead of scores");

  ExperimentArgs ga;
  auto* grid = app.add_subcommand("grid-exp", "Run a hyperparameter sweep from a JSON config");
  ExperimentArgs ca;
  auto* conv = app.add_subcommand("conv-exp", "Run a sweep and fit log-log convergence slopes");
  for (auto [cmd, args] : {std::pair{grid, &ga}, std::pair{conv, &ca}}) {
    cmd->add_option("--config", args->config, "Experiment config (JSON)")->required();
    cmd->add_option("--out", args->out, "Output directory")->capture_default_str();
    cmd->add_option("--seed", args->seed, "Run a single seed instead of the config's list");
    cmd->add_option("--threads", args->threads, "Worker threads (overrides the config)");
  }

  PlotArgs pl;
  auto* plot = app.add_subcommand("plot", "Render a CSV as an SVG line chart");
  plot->add_option("--csv", pl.csv, "Input CSV with a header row")->required();
  plot->add_option("--out", pl.out, "Output SVG (default stdout)");
  plot->add_option("--x", pl.spec.x, "x column")->capture_default_str();
  plot->add_option("--y", pl.spec.y, "y column")->capture_default_str();
  plot->add_option("--series", pl.spec.series, "Column naming the series (empty: one series)")->capture_default_str();
  plot->add_option("--filter", pl.filters, "Keep rows with column=value (repeatable)");
  plot->add_flag("--log-x", pl.spec.log_x, "Logarithmic x axis");
  plot->add_flag("--log-y", pl.spec.log_y, "Logarithmic y axis");
  plot->add_option("--title", pl.spec.title, "Chart title");

  SampleArgs sa;
  auto* samp = app.add_subcommand("sample", "Draw samples from a synthetic distribution");
  samp->add_option("--distribution", sa.distribution, "grid | gaussian | mixture-file")->capture_default_str();
  samp->add_option("--mixture", sa.mixture, "Mixture CSV (weight,x1,...,xd) for mixture-file");
  samp->add_option("--dim", sa.dim, "Dimension")->capture_default_str();
  samp->add_option("--count", sa.count, "Number of samples")->required();
  samp->add_option("--seed", sa.seed, "Sampling seed")->capture_default_str();
  samp->add_option("--grid-seed", sa.grid_seed, "Seed choosing the grid vertices")->capture_default_str();
  samp->add_option("--out", sa.out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*fit) return run_fit(fa);
    if (*predict) return run_predict(pa);
    if (*grid) return run_grid(ga);
    if (*conv) return run_convergence(ca);
    if (*plot) return run_plot(pl);
    if (*samp) return run_sample(sa);
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ContractViolation& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ResourceError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  }
  return 0;
}
