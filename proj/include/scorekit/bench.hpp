#pragma once

// Experiment runner: estimator x kernel x hyperparameter sweeps over
// synthetic distributions, convergence-slope fits and SVG line charts.
//
// Config (JSON, schema_version 1; unknown keys are errors):
//
//   {
//     "schema_version": 1,
//     "distribution": {"type": "grid" | "gaussian" | "mixture-file", "seed": 0, "path": "..."},
//     "dimensions": [64, 128],
//     "sample_sizes": [512],
//     "seeds": [0, 1, 2],
//     "eval_size": 1024,
//     "threads": 1,
//     "output": {"results": "results.csv", "summary": "summary.csv",
//                "timings": "timings.csv", "slopes": "slopes.csv"},
//     "estimators": [
//       {"id": "kef-cg", "method": "kef_cg", "kernel": "curlfree", "family": "imq",
//        "bandwidth": "median", "lambda": [1, 0.1]}
//     ]
//   }
//
// Methods and their grids (defaults in parentheses):
//   oracle                          analytic score, no grid
//   tikhonov                        lambda (10^0 .. 10^-8); direct solve when the dense
//                                   system fits in max_dense_bytes, else CG to cg_tolerance
//   kef_cg                          lambda; cg_tolerance (1e-4), cg_max_iterations (40)
//   truncated_tikhonov              lambda
//   spectral_cutoff                 fraction: keeps the top fraction * M * d eigenvalues
//                                   (0.99 0.97 0.95 0.9 0.8 0.7 0.6 0.5 0.4); or lambda thresholds
//   landweber                       iterations, or lambda with t = floor(1 / lambda);
//                                   step (0 = 0.9 / sigma_max), max_iterations (100000)
//   nu_method                       iterations (20, 30, ..., 100), or lambda with
//                                   t = floor(lambda^-1/2); nu (1)
//   nystrom                         lambda; subset_size (M / 8, at least 1)
//
// results.csv columns: estimator,kernel,family,method,d,M,param,value,seed,error,reason
// summary.csv columns: estimator,kernel,family,method,d,M,param,best_value,median_error,std_error,seeds,failed
// timings.csv columns: estimator,d,M,param,value,seed,fit_ms,predict_ms
// slopes.csv columns:  estimator,d,slope,intercept,strictly_decreasing,status

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "scorekit/errors.hpp"
#include "scorekit/estimators.hpp"
#include "scorekit/io.hpp"
#include "scorekit/kernels.hpp"
#include "scorekit/oracles.hpp"

namespace scorekit::bench {

inline constexpr int kSchemaVersion = 1;

enum class Method { Oracle, Tikhonov, KefCg, TruncatedTikhonov, SpectralCutoff, Landweber, NuMethod, Nystrom };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Oracle: return "oracle";
    case Method::Tikhonov: return "tikhonov";
    case Method::KefCg: return "kef_cg";
    case Method::TruncatedTikhonov: return "truncated_tikhonov";
    case Method::SpectralCutoff: return "spectral_cutoff";
    case Method::Landweber: return "landweber";
    case Method::NuMethod: return "nu_method";
    case Method::Nystrom: return "nystrom";
  }
  return "?";
}

struct EstimatorConfig {
  std::string id;
  Method method = Method::Tikhonov;
  KernelKind kind = KernelKind::CurlFree;
  KernelFamily family = KernelFamily::IMQ;
  std::optional<double> bandwidth;  // unset: median heuristic
  double bandwidth_scale = 1.0;
  std::string param;                // "lambda", "iterations", "fraction" or "none"
  std::vector<double> grid;
  double cg_tolerance = 1e-4;
  int cg_max_iterations = 40;
  double nu = 1.0;
  double step = 0.0;
  long max_iterations = 100000;
  Index subset_size = 0;
  std::size_t max_dense_bytes = std::size_t{1} << 30;
  double solve_tolerance = 1e-8;
  int solve_max_iterations = 2000;
};

struct DistributionConfig {
  std::string type = "grid";
  std::uint64_t seed = 0;
  std::string path;
};

struct OutputConfig {
  std::string results = "results.csv";
  std::string summary = "summary.csv";
  std::string timings = "timings.csv";
  std::string slopes = "slopes.csv";
};

struct ExperimentConfig {
  DistributionConfig distribution;
  std::vector<Index> dimensions;
  std::vector<Index> sample_sizes;
  std::vector<std::uint64_t> seeds;
  Index eval_size = 1024;
  unsigned threads = 1;
  OutputConfig output;
  std::vector<EstimatorConfig> estimators;
};

inline std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 8; ++k) g.push_back(std::pow(10.0, -k));
  return g;
}

inline std::vector<double> default_fraction_grid() { return {0.99, 0.97, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4}; }

inline std::vector<double> default_iteration_grid() { return {20, 30, 40, 50, 60, 70, 80, 90, 100}; }

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw InputError(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) throw InputError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_as(const json& obj, const std::string& key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InputError(where + "." + key + ": " + e.what());
  }
}

template <class T>
std::vector<T> get_list(const json& obj, const std::string& key, const std::string& where) {
  const auto v = get_as<std::vector<T>>(obj, key, where);
  if (v.empty()) throw InputError(where + "." + key + " must be a non-empty list");
  return v;
}

inline Method parse_method(const std::string& s) {
  static const std::map<std::string, Method> names{
      {"oracle", Method::Oracle},
      {"tikhonov", Method::Tikhonov},
      {"kef_cg", Method::KefCg},
      {"truncated_tikhonov", Method::TruncatedTikhonov},
      {"spectral_cutoff", Method::SpectralCutoff},
      {"landweber", Method::Landweber},
      {"nu_method", Method::NuMethod},
      {"nystrom", Method::Nystrom},
  };
  const auto it = names.find(s);
  if (it == names.end()) throw InputError("unknown method '" + s + "'");
  return it->second;
}

inline EstimatorConfig parse_estimator(const json& e, std::size_t index) {
  const std::string where = "estimators[" + std::to_string(index) + "]";
  reject_unknown(e,
                 {"id", "method", "kernel", "family", "bandwidth", "bandwidth_scale", "lambda", "iterations",
                  "fraction", "cg_tolerance", "cg_max_iterations", "nu", "step", "max_iterations", "subset_size",
                  "max_dense_bytes", "solve_tolerance", "solve_max_iterations"},
                 where);
  EstimatorConfig c;
  c.id = get_as<std::string>(e, "id", where);
  if (c.id.empty() || c.id.find_first_of(",\n\"") != std::string::npos) {
    throw InputError(where + ".id must be non-empty without commas, quotes or newlines");
  }
  c.method = parse_method(get_as<std::string>(e, "method", where));
  if (e.contains("kernel")) {
    const auto k = get_as<std::string>(e, "kernel", where);
    if (k == "curlfree") c.kind = KernelKind::CurlFree;
    else if (k == "diagonal") c.kind = KernelKind::Diagonal;
    else throw InputError(where + ".kernel must be 'curlfree' or 'diagonal'");
  }
  if (e.contains("family")) {
    const auto f = get_as<std::string>(e, "family", where);
    if (f == "imq") c.family = KernelFamily::IMQ;
    else if (f == "gaussian") c.family = KernelFamily::Gaussian;
    else throw InputError(where + ".family must be 'imq' or 'gaussian'");
  }
  if (e.contains("bandwidth")) {
    if (e.at("bandwidth").is_string()) {
      if (e.at("bandwidth").get<std::string>() != "median") throw InputError(where + ".bandwidth must be 'median' or a number");
    } else {
      c.bandwidth = get_as<double>(e, "bandwidth", where);
      if (!(*c.bandwidth > 0.0)) throw InputError(where + ".bandwidth must be positive");
    }
  }
  if (e.contains("bandwidth_scale")) c.bandwidth_scale = get_as<double>(e, "bandwidth_scale", where);
  if (!(c.bandwidth_scale > 0.0)) throw InputError(where + ".bandwidth_scale must be positive");

  const int grids = static_cast<int>(e.contains("lambda")) + static_cast<int>(e.contains("iterations")) +
                    static_cast<int>(e.contains("fraction"));
  if (grids > 1) throw InputError(where + ": give only one of lambda, iterations, fraction");
  auto allow = [&](std::initializer_list<const char*> keys) {
    for (const char* k : {"lambda", "iterations", "fraction"}) {
      if (e.contains(k) && std::find_if(keys.begin(), keys.end(), [&](const char* a) { return std::string(a) == k; }) ==
                               keys.end()) {
        throw InputError(where + ": '" + k + "' is not a grid for method " + to_string(c.method));
      }
    }
  };
  switch (c.method) {
    case Method::Oracle:
      allow({});
      c.param = "none";
      c.grid = {0.0};
      break;
    case Method::Tikhonov:
    case Method::KefCg:
    case Method::TruncatedTikhonov:
    case Method::Nystrom:
      allow({"lambda"});
      c.param = "lambda";
      c.grid = e.contains("lambda") ? get_list<double>(e, "lambda", where) : default_lambda_grid();
      break;
    case Method::SpectralCutoff:
      allow({"lambda", "fraction"});
      c.param = e.contains("lambda") ? "lambda" : "fraction";
      c.grid = e.contains("lambda")     ? get_list<double>(e, "lambda", where)
               : e.contains("fraction") ? get_list<double>(e, "fraction", where)
                                        : default_fraction_grid();
      break;
    case Method::Landweber:
    case Method::NuMethod:
      allow({"lambda", "iterations"});
      c.param = e.contains("lambda") ? "lambda" : "iterations";
      c.grid = e.contains("lambda")       ? get_list<double>(e, "lambda", where)
               : e.contains("iterations") ? get_list<double>(e, "iterations", where)
                                          : default_iteration_grid();
      break;
  }
  for (double v : c.grid) {
    if (c.param == "none") continue;
    if (!(v > 0.0) || !std::isfinite(v)) throw InputError(where + ": grid values must be positive");
    if (c.param == "fraction" && v > 1.0) throw InputError(where + ": fractions must lie in (0, 1]");
    if (c.param == "iterations" && v != std::floor(v)) throw InputError(where + ": iterations must be integers");
  }
  if (e.contains("cg_tolerance")) c.cg_tolerance = get_as<double>(e, "cg_tolerance", where);
  if (e.contains("cg_max_iterations")) c.cg_max_iterations = get_as<int>(e, "cg_max_iterations", where);
  if (e.contains("nu")) c.nu = get_as<double>(e, "nu", where);
  if (e.contains("step")) c.step = get_as<double>(e, "step", where);
  if (e.contains("max_iterations")) c.max_iterations = get_as<long>(e, "max_iterations", where);
  if (e.contains("subset_size")) c.subset_size = get_as<Index>(e, "subset_size", where);
  if (e.contains("max_dense_bytes")) c.max_dense_bytes = get_as<std::size_t>(e, "max_dense_bytes", where);
  if (e.contains("solve_tolerance")) c.solve_tolerance = get_as<double>(e, "solve_tolerance", where);
  if (e.contains("solve_max_iterations")) c.solve_max_iterations = get_as<int>(e, "solve_max_iterations", where);
  if (!(c.cg_tolerance > 0.0) || c.cg_max_iterations < 1 || !(c.solve_tolerance > 0.0) ||
      c.solve_max_iterations < 1) {
    throw InputError(where + ": solver tolerances and iteration limits must be positive");
  }
  if (!(c.nu >= 1.0)) throw InputError(where + ".nu must be >= 1");
  if (c.step < 0.0) throw InputError(where + ".step must be >= 0");
  if (c.subset_size < 0) throw InputError(where + ".subset_size must be >= 0");
  return c;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_as;
  using detail::get_list;
  detail::reject_unknown(j,
                         {"schema_version", "distribution", "dimensions", "sample_sizes", "seeds", "eval_size",
                          "threads", "output", "estimators"},
                         "config");
  const int version = get_as<int>(j, "schema_version", "config");
  if (version != kSchemaVersion) throw InputError("unsupported schema_version " + std::to_string(version));
  ExperimentConfig c;
  if (j.contains("distribution")) {
    const auto& d = j.at("distribution");
    detail::reject_unknown(d, {"type", "seed", "path"}, "distribution");
    if (d.contains("type")) c.distribution.type = get_as<std::string>(d, "type", "distribution");
    if (d.contains("seed")) c.distribution.seed = get_as<std::uint64_t>(d, "seed", "distribution");
    if (d.contains("path")) c.distribution.path = get_as<std::string>(d, "path", "distribution");
    const auto& t = c.distribution.type;
    if (t != "grid" && t != "gaussian" && t != "mixture-file") {
      throw InputError("distribution.type must be grid, gaussian or mixture-file");
    }
    if (t == "mixture-file" && c.distribution.path.empty()) throw InputError("distribution.path is required");
  }
  c.dimensions = get_list<Index>(j, "dimensions", "config");
  c.sample_sizes = get_list<Index>(j, "sample_sizes", "config");
  c.seeds = get_list<std::uint64_t>(j, "seeds", "config");
  for (Index d : c.dimensions) {
    if (d < 1) throw InputError("dimensions must be >= 1");
  }
  for (Index m : c.sample_sizes) {
    if (m < 2) throw InputError("sample sizes must be >= 2");
  }
  if (j.contains("eval_size")) c.eval_size = get_as<Index>(j, "eval_size", "config");
  if (c.eval_size < 1) throw InputError("eval_size must be >= 1");
  if (j.contains("threads")) c.threads = get_as<unsigned>(j, "threads", "config");
  if (c.threads < 1) throw InputError("threads must be >= 1");
  if (j.contains("output")) {
    const auto& o = j.at("output");
    detail::reject_unknown(o, {"results", "summary", "timings", "slopes"}, "output");
    if (o.contains("results")) c.output.results = get_as<std::string>(o, "results", "output");
    if (o.contains("summary")) c.output.summary = get_as<std::string>(o, "summary", "output");
    if (o.contains("timings")) c.output.timings = get_as<std::string>(o, "timings", "output");
    if (o.contains("slopes")) c.output.slopes = get_as<std::string>(o, "slopes", "output");
  }
  const auto& est = j.at("estimators");
  if (!est.is_array() || est.empty()) throw InputError("estimators must be a non-empty list");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < est.size(); ++i) {
    c.estimators.push_back(detail::parse_estimator(est[i], i));
    if (!ids.insert(c.estimators.back().id).second) throw InputError("duplicate estimator id " + c.estimators.back().id);
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Running a sweep

struct ResultRow {
  std::string estimator;
  KernelKind kind = KernelKind::CurlFree;
  KernelFamily family = KernelFamily::IMQ;
  Method method = Method::Oracle;
  Index d = 0;
  Index m = 0;
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  double error = std::numeric_limits<double>::quiet_NaN();
  std::string reason;
  double fit_ms = 0.0;
  double predict_ms = 0.0;
};

struct SummaryRow {
  std::string estimator;
  KernelKind kind = KernelKind::CurlFree;
  KernelFamily family = KernelFamily::IMQ;
  Method method = Method::Oracle;
  Index d = 0;
  Index m = 0;
  std::string param;
  double best_value = std::numeric_limits<double>::quiet_NaN();
  double median_error = std::numeric_limits<double>::quiet_NaN();
  double std_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t seeds = 0;
  std::size_t failed = 0;
};

struct SlopeRow {
  std::string estimator;
  Index d = 0;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  bool strictly_decreasing = false;
  std::string status;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<SlopeRow> slopes;
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Index d, Index m, std::uint64_t stream) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ static_cast<std::uint64_t>(d));
  h = splitmix(h ^ (static_cast<std::uint64_t>(m) << 20));
  return splitmix(h ^ stream);
}

inline MixtureDistribution read_mixture_file(const std::string& path) {
  // CSV header weight,x1,...,xd; one component per row.
  const RowMatrix t = read_csv_file(path);
  if (t.cols() < 2 || t.rows() < 1) throw InputError(path + ": need columns weight,x1,...,xd and one row per component");
  return MixtureDistribution(t.rightCols(t.cols() - 1), t.col(0));
}

inline MixtureDistribution make_distribution(const DistributionConfig& c, Index d) {
  if (c.type == "grid") return make_grid_distribution(d, c.seed);
  if (c.type == "gaussian") return standard_gaussian(d);
  MixtureDistribution mix = read_mixture_file(c.path);
  if (mix.dim() != d) {
    throw InputError("mixture file has dimension " + std::to_string(mix.dim()) + " but the config asks for " +
                     std::to_string(d));
  }
  return mix;
}

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct CellData {
  SampleMatrix samples;
  RowMatrix eval;
  RowMatrix truth;
};

// One (estimator, d, M, seed) cell; fills one row per grid point.
class CellRunner {
 public:
  CellRunner(const EstimatorConfig& est, const MixtureDistribution& dist, const CellData& data, std::vector<ResultRow>& rows)
      : est_(est), dist_(dist), data_(data), rows_(rows) {}

  void run() {
    if (est_.method == Method::Oracle) {
      guarded(0, [&] {
        const auto t0 = Clock::now();
        const RowMatrix p = true_score_rows(dist_, data_.eval);
        rows_[0].predict_ms = ms_since(t0);
        return normalized_distance(data_.truth, p);
      });
      return;
    }
    double bw = 0.0;
    try {
      bw = est_.bandwidth ? *est_.bandwidth : median_bandwidth(data_.samples);
      bw *= est_.bandwidth_scale;
      spec_ = MatrixKernelSpec{est_.kind, ScalarRadialKernel(est_.family, bw)};
      cache_.emplace(*spec_, data_.samples, data_.eval);
    } catch (const Error& e) {
      fail_all(std::string("setup: ") + e.what());
      return;
    } catch (const std::exception& e) {
      fail_all(std::string("setup: ") + e.what());
      return;
    }
    switch (est_.method) {
      case Method::Tikhonov: run_tikhonov(); break;
      case Method::KefCg:
        for (std::size_t i = 0; i < rows_.size(); ++i) {
          fit_and_score(i, [&] {
            FitOptions o;
            return fit_tikhonov_cg(data_.samples, *spec_, est_.grid[i], est_.cg_tolerance, est_.cg_max_iterations, o);
          });
        }
        break;
      case Method::TruncatedTikhonov:
        for (std::size_t i = 0; i < rows_.size(); ++i) {
          fit_and_score(i, [&] { return fit_truncated_tikhonov(data_.samples, *spec_, est_.grid[i]); });
        }
        break;
      case Method::SpectralCutoff:
        for (std::size_t i = 0; i < rows_.size(); ++i) {
          fit_and_score(i, [&] {
            SpectralCutoff sc;
            if (est_.param == "fraction") {
              const double n = static_cast<double>(data_.samples.size() * data_.samples.dim());
              sc.rank = std::max<Index>(1, static_cast<Index>(std::floor(est_.grid[i] * n)));
            } else {
              sc.threshold = est_.grid[i];
            }
            return fit_spectral_cutoff(data_.samples, *spec_, sc);
          });
        }
        break;
      case Method::Landweber:
      case Method::NuMethod: run_path(); break;
      case Method::Nystrom:
        for (std::size_t i = 0; i < rows_.size(); ++i) {
          fit_and_score(i, [&] {
            const Index m = data_.samples.size();
            const Index n = est_.subset_size > 0 ? std::min(est_.subset_size, m) : std::max<Index>(1, m / 8);
            std::vector<Index> subset(static_cast<std::size_t>(n));
            for (Index k = 0; k < n; ++k) subset[static_cast<std::size_t>(k)] = k;
            return fit_nystrom(data_.samples, subset, *spec_, TruncatedTikhonov{est_.grid[i]});
          });
        }
        break;
      case Method::Oracle: break;
    }
  }

 private:
  template <class F>
  void guarded(std::size_t i, F&& f) {
    try {
      rows_[i].error = f();
      rows_[i].reason.clear();
    } catch (const Error& e) {
      rows_[i].error = std::numeric_limits<double>::quiet_NaN();
      rows_[i].reason = e.what();
    } catch (const std::exception& e) {
      rows_[i].error = std::numeric_limits<double>::quiet_NaN();
      rows_[i].reason = e.what();
    }
  }

  void fail_all(const std::string& why) {
    for (auto& r : rows_) {
      r.error = std::numeric_limits<double>::quiet_NaN();
      r.reason = why;
    }
  }

  double score(std::size_t i, const FittedScoreEstimator& est) {
    const auto t0 = Clock::now();
    const RowMatrix p = cache_->predict(est);
    rows_[i].predict_ms = ms_since(t0);
    if (!est.diagnostics().warnings.empty()) rows_[i].reason = "warning: " + est.diagnostics().warnings.front();
    return normalized_distance(data_.truth, p);
  }

  template <class Fit>
  void fit_and_score(std::size_t i, Fit&& fit) {
    std::string warning;
    guarded(i, [&] {
      const auto t0 = Clock::now();
      const FittedScoreEstimator est = fit();
      rows_[i].fit_ms = ms_since(t0);
      const double e = score(i, est);
      warning = rows_[i].reason;
      return e;
    });
    if (std::isfinite(rows_[i].error)) rows_[i].reason = warning;
  }

  void run_tikhonov() {
    const Index n = data_.samples.size() * data_.samples.dim();
    const bool diagonal = est_.kind == KernelKind::Diagonal;
    const double dense_bytes = static_cast<double>(n) * static_cast<double>(n) * sizeof(double);
    if (diagonal || dense_bytes <= static_cast<double>(est_.max_dense_bytes)) {
      std::optional<TikhonovProblem> problem;
      const auto t0 = Clock::now();
      try {
        problem.emplace(data_.samples, *spec_);
      } catch (const std::exception& e) {
        fail_all(std::string("setup: ") + e.what());
        return;
      }
      const double setup_ms = ms_since(t0);
      for (std::size_t i = 0; i < rows_.size(); ++i) {
        fit_and_score(i, [&] { return problem->fit(est_.grid[i]); });
        rows_[i].fit_ms += setup_ms;
      }
      return;
    }
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      fit_and_score(i, [&] {
        auto est = fit_tikhonov_cg(data_.samples, *spec_, est_.grid[i], est_.solve_tolerance, est_.solve_max_iterations);
        return est;
      });
    }
  }

  void run_path() {
    std::vector<int> ts;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      long t = static_cast<long>(est_.grid[i]);
      if (est_.param == "lambda") {
        const double raw = est_.method == Method::Landweber ? std::floor(1.0 / est_.grid[i])
                                                            : std::floor(1.0 / std::sqrt(est_.grid[i]));
        t = std::max(static_cast<long>(std::min(raw, 1e15)), 1L);
      }
      if (t > est_.max_iterations) {
        rows_[i].reason = "iteration count " + std::to_string(t) + " exceeds max_iterations " +
                          std::to_string(est_.max_iterations);
        continue;
      }
      ts.push_back(static_cast<int>(t));
      idx.push_back(i);
    }
    if (ts.empty()) return;
    std::vector<FittedScoreEstimator> path;
    const auto t0 = Clock::now();
    try {
      path = est_.method == Method::Landweber ? fit_landweber_path(data_.samples, *spec_, est_.step, ts)
                                              : fit_nu_method_path(data_.samples, *spec_, est_.nu, ts);
    } catch (const std::exception& e) {
      for (std::size_t k : idx) rows_[k].reason = e.what();
      return;
    }
    const double fit_ms = ms_since(t0);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = idx[k];
      std::string warning;
      guarded(i, [&] {
        const double e = score(i, path[k]);
        warning = rows_[i].reason;
        return e;
      });
      if (std::isfinite(rows_[i].error)) rows_[i].reason = warning;
      rows_[i].fit_ms = fit_ms;
    }
  }

  const EstimatorConfig& est_;
  const MixtureDistribution& dist_;
  const CellData& data_;
  std::vector<ResultRow>& rows_;
  std::optional<MatrixKernelSpec> spec_;
  std::optional<PredictionCache> cache_;
};

template <class Task>
void run_pool(std::size_t n_tasks, unsigned threads, Task&& task) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n_tasks; i = next++) task(i);
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_tasks)));
  if (n == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned k = 0; k < n; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Runs every (estimator, d, M, seed) cell and gathers rows in config order:
/// estimator, d, M, grid point, seed. Failures become NaN rows with a reason.
inline std::vector<ResultRow> run_cells(const ExperimentConfig& config) {
  struct Cell {
    std::size_t est, di, mi, si;
  };
  std::vector<Cell> cells;
  for (std::size_t e = 0; e < config.estimators.size(); ++e)
    for (std::size_t di = 0; di < config.dimensions.size(); ++di)
      for (std::size_t mi = 0; mi < config.sample_sizes.size(); ++mi)
        for (std::size_t si = 0; si < config.seeds.size(); ++si) cells.push_back({e, di, mi, si});

  std::vector<std::optional<MixtureDistribution>> dists(config.dimensions.size());
  for (std::size_t di = 0; di < config.dimensions.size(); ++di) {
    dists[di].emplace(detail::make_distribution(config.distribution, config.dimensions[di]));
  }

  std::vector<std::vector<ResultRow>> out(cells.size());
  detail::run_pool(cells.size(), config.threads, [&](std::size_t k) {
    const Cell& c = cells[k];
    const EstimatorConfig& est = config.estimators[c.est];
    const Index d = config.dimensions[c.di];
    const Index m = config.sample_sizes[c.mi];
    const std::uint64_t seed = config.seeds[c.si];
    std::vector<ResultRow>& rows = out[k];
    rows.resize(est.grid.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].estimator = est.id;
      rows[i].kind = est.kind;
      rows[i].family = est.family;
      rows[i].method = est.method;
      rows[i].d = d;
      rows[i].m = m;
      rows[i].param = est.param;
      rows[i].value = est.grid[i];
      rows[i].seed = seed;
    }
    const MixtureDistribution& dist = *dists[c.di];
    try {
      const SampleMatrix samples = sample(dist, m, detail::derive_seed(seed, d, m, 1));
      const SampleMatrix eval = sample(dist, config.eval_size, detail::derive_seed(seed, d, m, 2));
      const detail::CellData data{samples, eval.data(), true_score_rows(dist, eval.data())};
      detail::CellRunner(est, dist, data, rows).run();
    } catch (const std::exception& e) {
      for (auto& r : rows) r.reason = std::string("data: ") + e.what();
    }
  });

  std::vector<ResultRow> rows;
  // Reorder so rows of one grid point are contiguous across seeds.
  std::size_t k = 0;
  for (std::size_t e = 0; e < config.estimators.size(); ++e) {
    const std::size_t n_seeds = config.seeds.size();
    for (std::size_t di = 0; di < config.dimensions.size(); ++di) {
      for (std::size_t mi = 0; mi < config.sample_sizes.size(); ++mi) {
        for (std::size_t g = 0; g < config.estimators[e].grid.size(); ++g) {
          for (std::size_t si = 0; si < n_seeds; ++si) rows.push_back(out[k + si][g]);
        }
        k += n_seeds;
      }
    }
  }
  return rows;
}

/// Best grid point per (estimator, d, M): lowest median over seeds among
/// grid points with no failed seed.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::vector<SummaryRow> out;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].estimator == rows[i].estimator && rows[j].d == rows[i].d &&
           rows[j].m == rows[i].m)
      ++j;
    SummaryRow s;
    s.estimator = rows[i].estimator;
    s.kind = rows[i].kind;
    s.family = rows[i].family;
    s.method = rows[i].method;
    s.d = rows[i].d;
    s.m = rows[i].m;
    s.param = rows[i].param;
    std::map<double, std::vector<double>> by_value;
    std::vector<double> order;
    for (std::size_t k = i; k < j; ++k) {
      if (!by_value.count(rows[k].value)) order.push_back(rows[k].value);
      by_value[rows[k].value].push_back(rows[k].error);
    }
    for (double v : order) {
      const auto& errs = by_value[v];
      s.seeds = errs.size();
      if (std::any_of(errs.begin(), errs.end(), [](double e) { return !std::isfinite(e); })) {
        ++s.failed;
        continue;
      }
      const double med = detail::median_of(errs);
      if (!(med >= s.median_error)) {
        if (std::isnan(s.median_error) || med < s.median_error) {
          s.median_error = med;
          s.best_value = v;
          s.std_error = summarize_errors(errs).stddev;
        }
      }
    }
    out.push_back(s);
    i = j;
  }
  return out;
}

/// Least-squares slope of log(median error) against log M per (estimator, d).
inline std::vector<SlopeRow> fit_slopes(const std::vector<SummaryRow>& summary) {
  std::vector<SlopeRow> out;
  std::vector<std::pair<std::string, Index>> keys;
  std::map<std::pair<std::string, Index>, std::vector<const SummaryRow*>> groups;
  for (const auto& s : summary) {
    const auto key = std::make_pair(s.estimator, s.d);
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(&s);
  }
  for (const auto& key : keys) {
    auto g = groups[key];
    std::sort(g.begin(), g.end(), [](const SummaryRow* a, const SummaryRow* b) { return a->m < b->m; });
    SlopeRow r;
    r.estimator = key.first;
    r.d = key.second;
    const bool any_nan = std::any_of(g.begin(), g.end(), [](const SummaryRow* s) { return !std::isfinite(s->median_error); });
    const bool all_zero = std::all_of(g.begin(), g.end(), [](const SummaryRow* s) { return s->median_error == 0.0; });
    if (any_nan) {
      r.status = "failed";
    } else if (all_zero) {
      r.status = "exact_fit";
    } else if (std::any_of(g.begin(), g.end(), [](const SummaryRow* s) { return s->median_error <= 0.0; })) {
      r.status = "zero_error";
    } else {
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      const double n = static_cast<double>(g.size());
      for (const auto* s : g) {
        const double x = std::log(static_cast<double>(s->m));
        const double y = std::log(s->median_error);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
      }
      r.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
      r.intercept = (sy - r.slope * sx) / n;
      r.status = "ok";
    }
    r.strictly_decreasing = !any_nan && g.size() > 1;
    for (std::size_t k = 1; k < g.size(); ++k) {
      if (!(g[k]->median_error < g[k - 1]->median_error)) r.strictly_decreasing = false;
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  return format_double(v);
}

namespace detail {

inline std::string csv_text(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else if (ch == '\n') out += ' ';
    else out += ch;
  }
  return out + "\"";
}

}  // namespace detail

inline void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "estimator,kernel,family,method,d,M,param,value,seed,error,reason\n";
  for (const auto& r : rows) {
    out << r.estimator << ',' << scorekit::to_string(r.kind) << ',' << scorekit::to_string(r.family) << ',' << to_string(r.method)
        << ',' << r.d << ',' << r.m << ',' << r.param << ',' << format_value(r.value) << ',' << r.seed << ','
        << format_value(r.error) << ',' << detail::csv_text(r.reason) << '\n';
  }
}

inline void write_timings_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "estimator,d,M,param,value,seed,fit_ms,predict_ms\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.estimator << ',' << r.d << ',' << r.m << ',' << r.param << ',' << format_value(r.value) << ',' << r.seed;
    std::snprintf(buf, sizeof buf, ",%.3f,%.3f\n", r.fit_ms, r.predict_ms);
    out << buf;
  }
}

inline void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "estimator,kernel,family,method,d,M,param,best_value,median_error,std_error,seeds,failed\n";
  for (const auto& s : rows) {
    out << s.estimator << ',' << scorekit::to_string(s.kind) << ',' << scorekit::to_string(s.family) << ',' << to_string(s.method)
        << ',' << s.d << ',' << s.m << ',' << s.param << ',' << format_value(s.best_value) << ','
        << format_value(s.median_error) << ',' << format_value(s.std_error) << ',' << s.seeds << ',' << s.failed
        << '\n';
  }
}

inline void write_slopes_csv(std::ostream& out, const std::vector<SlopeRow>& rows) {
  out << "estimator,d,slope,intercept,strictly_decreasing,status\n";
  for (const auto& r : rows) {
    out << r.estimator << ',' << r.d << ',' << format_value(r.slope) << ',' << format_value(r.intercept) << ','
        << (r.strictly_decreasing ? "true" : "false") << ',' << r.status << '\n';
  }
}

namespace detail {

inline std::string resolve(const std::string& dir, const std::string& file) {
  if (dir.empty() || std::filesystem::path(file).is_absolute()) return file;
  return (std::filesystem::path(dir) / file).string();
}

template <class Writer>
void write_file(const std::string& path, Writer&& w) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  w(out);
  if (!out) throw InputError("error writing " + path);
}

}  // namespace detail

/// Sweep plus per-(estimator, d, M) best-hyperparameter summary. When
/// `out_dir` is non-empty the results, summary and timings files are written
/// there (paths in the config are relative to it).
inline ExperimentResult run_grid_experiment(const ExperimentConfig& config, const std::string& out_dir = "") {
  ExperimentResult r;
  r.rows = run_cells(config);
  r.summary = summarize(r.rows);
  if (!out_dir.empty()) {
    detail::write_file(detail::resolve(out_dir, config.output.results), [&](std::ostream& o) { write_results_csv(o, r.rows); });
    detail::write_file(detail::resolve(out_dir, config.output.summary), [&](std::ostream& o) { write_summary_csv(o, r.summary); });
    detail::write_file(detail::resolve(out_dir, config.output.timings), [&](std::ostream& o) { write_timings_csv(o, r.rows); });
  }
  return r;
}

/// Grid experiment followed by a log-log slope per (estimator, d).
/// Needs at least three sample sizes spanning a factor of ten.
inline ExperimentResult run_convergence_experiment(const ExperimentConfig& config, const std::string& out_dir = "") {
  std::set<Index> sizes(config.sample_sizes.begin(), config.sample_sizes.end());
  if (sizes.size() < 3) throw InputError("convergence experiment needs at least three distinct sample sizes");
  if (*sizes.rbegin() < 10 * *sizes.begin()) throw InputError("sample sizes must span at least one decade");
  ExperimentResult r = run_grid_experiment(config, out_dir);
  r.slopes = fit_slopes(r.summary);
  if (!out_dir.empty()) {
    detail::write_file(detail::resolve(out_dir, config.output.slopes), [&](std::ostream& o) { write_slopes_csv(o, r.slopes); });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Plotting

struct TextTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw InputError("column '" + name + "' not found");
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {

inline std::vector<std::string> split_quoted(const std::string& line, std::size_t line_no) {
  std::vector<std::string> cells(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cells.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cells.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.emplace_back();
    } else {
      cells.back() += ch;
    }
  }
  if (quoted) throw InputError("line " + std::to_string(line_no) + ": unterminated quote");
  return cells;
}

}  // namespace detail

inline TextTable read_text_csv(std::istream& in) {
  TextTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = detail::split_quoted(line, line_no);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw InputError("line " + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                       " columns, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw InputError("CSV has no header row");
  return t;
}

struct PlotSpec {
  std::string x = "M";
  std::string y = "median_error";
  std::string series = "estimator";  // empty: a single series
  std::vector<std::pair<std::string, std::string>> filters;  // keep rows with column == value
  bool log_x = false;
  bool log_y = false;
  std::string title;
  int width = 640;
  int height = 420;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline double parse_cell(const std::string& s, std::size_t line) {
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return scorekit::detail::parse_double(s, line);
}

}  // namespace detail

/// Line chart of y against x, one polyline per series value. Points with a
/// non-finite coordinate (or non-positive on a log axis) are dropped.
inline std::string emit_plot(const TextTable& table, const PlotSpec& spec) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const std::size_t xc = table.column(spec.x);
  const std::size_t yc = table.column(spec.y);
  const std::optional<std::size_t> sc = spec.series.empty() ? std::nullopt : std::optional(table.column(spec.series));
  std::vector<std::pair<std::size_t, std::string>> filters;
  for (const auto& [col, val] : spec.filters) filters.emplace_back(table.column(col), val);

  std::vector<std::string> names;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (std::any_of(filters.begin(), filters.end(), [&](const auto& f) { return row[f.first] != f.second; })) continue;
    const std::string name = sc ? row[*sc] : spec.y;
    double x = detail::parse_cell(row[xc], r + 2);
    double y = detail::parse_cell(row[yc], r + 2);
    if (!series.count(name)) names.push_back(name);
    auto& pts = series[name];
    if (!std::isfinite(x) || !std::isfinite(y)) continue;
    if ((spec.log_x && x <= 0.0) || (spec.log_y && y <= 0.0)) continue;
    pts.emplace_back(spec.log_x ? std::log10(x) : x, spec.log_y ? std::log10(y) : y);
  }

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  const bool empty = !(x0 <= x1);
  if (empty) {
    x0 = 0.0;
    x1 = 1.0;
    y0 = 0.0;
    y1 = 1.0;
  }
  if (x1 == x0) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double left = 70, right = 20 + 150, top = 40, bottom = 50;
  const double pw = spec.width - left - right, ph = spec.height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\"" << spec.height
    << "\" viewBox=\"0 0 " << spec.width << ' ' << spec.height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty()) {
    s << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
      << detail::xml_escape(spec.title) << "</text>\n";
  }
  s << "<rect x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(top) << "\" width=\"" << detail::fmt(pw)
    << "\" height=\"" << detail::fmt(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    const double xl = spec.log_x ? std::pow(10.0, xv) : xv;
    const double yl = spec.log_y ? std::pow(10.0, yv) : yv;
    s << "<text x=\"" << detail::fmt(px(xv)) << "\" y=\"" << detail::fmt(top + ph + 18)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::tick_label(xl) << "</text>\n";
    s << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(py(yv) + 4)
      << "\" text-anchor=\"end\" font-size=\"11\">" << detail::tick_label(yl) << "</text>\n";
  }
  s << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"" << detail::fmt(spec.height - 10.0)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << detail::xml_escape(spec.x) << "</text>\n";
  s << "<text x=\"16\" y=\"" << detail::fmt(top + ph / 2) << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << detail::fmt(top + ph / 2) << ")\">" << detail::xml_escape(spec.y) << "</text>\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto pts = series[names[i]];
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const char* color = kColors[i % (sizeof kColors / sizeof *kColors)];
    if (!pts.empty()) {
      s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t k = 0; k < pts.size(); ++k) {
        s << (k ? " " : "") << detail::fmt(px(pts[k].first)) << ',' << detail::fmt(py(pts[k].second));
      }
      s << "\"/>\n";
    }
    const double ly = top + 14.0 + 16.0 * static_cast<double>(i);
    s << "<line x1=\"" << detail::fmt(left + pw + 10) << "\" y1=\"" << detail::fmt(ly) << "\" x2=\""
      << detail::fmt(left + pw + 30) << "\" y2=\"" << detail::fmt(ly) << "\" stroke=\"" << color << "\"/>\n";
    s << "<text x=\"" << detail::fmt(left + pw + 34) << "\" y=\"" << detail::fmt(ly + 4) << "\" font-size=\"11\">"
      << detail::xml_escape(names[i]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace scorekit::bench
