#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "rise/metrics.hpp"
#include "rise/training.hpp"

namespace rise::exp {

/// Full run description. `train` carries the optimizer/budget overrides;
/// its task/method/eps/seed fields are replaced per cell.
struct ExperimentConfig {
  sim::TaskId task = sim::TaskId::Glu;
  std::vector<train::Method> methods{train::Method::Rise};
  miss::Mechanism mechanism = miss::Mechanism::Mcar;
  std::vector<double> eps{0.1};
  std::vector<double> eps_set{0.1, 0.25, 0.6};  // RISE-Meta atoms
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  train::TrainConfig train;
  std::vector<std::string> metrics{"mmd", "c2st"};
  std::size_t n_test = 10;
  std::size_t n_samples = 1000;
  std::string reference = "npe";  // npe | analytic (GLU only)
  std::vector<double> levels{0.5, 0.7, 0.9};
  std::size_t n_calibration = 200;
  std::size_t n_draws = 500;
  std::size_t n_meta_draws = 100;
  double nn_eps = 0.6;  // NPE-NN training level in meta-eval
  std::size_t workers = 1;
  std::string out;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
void validate(const ExperimentConfig& cfg);

/// Metric names accepted in ExperimentConfig::metrics.
const std::vector<std::string>& known_metrics();

struct ResultRow {
  std::string task, method, mechanism;
  double eps = 0.0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
  double seconds = 0.0;
  std::string error;  // empty for successful rows
};

struct BenchmarkResult {
  std::vector<ResultRow> rows;
  nlohmann::json summary;
  std::size_t n_errors = 0;
};

/// One observation to evaluate on: truth, full data and its masked version.
struct TestCase {
  std::vector<double> theta;
  miss::MaskedSample sample;
};

/// Test observations for (task, mechanism, eps, seed); independent of the
/// method so every method sees the same cases.
std::vector<TestCase> make_test_cases(sim::TaskId task, miss::Mechanism mechanism, double eps, std::uint64_t seed,
                                      std::size_t n);

/// Draws from the reference posterior for the full observation.
using ReferenceSampler = std::function<Tensor(const TestCase&, std::size_t n, Rng& rng)>;

/// Analytic GLU posterior: N(x, 0.1 I) truncated to [-1, 1]^10, sampled by
/// per-coordinate rejection.
Tensor glu_analytic_posterior(std::span<const double> x, std::size_t n, Rng& rng);

/// Shares reference NPE models across cells; keyed by a content hash of
/// the reference training config.
class ReferenceCache {
 public:
  explicit ReferenceCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}
  std::shared_ptr<const train::Model> get(const train::TrainConfig& cfg);
  static std::string key(const train::TrainConfig& cfg);
  std::size_t trained() const;

 private:
  struct Slot {
    std::once_flag once;
    std::shared_ptr<const train::Model> model;
    std::exception_ptr error;
  };
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
  std::size_t trained_ = 0;
};

/// Training config of the cell (method, eps, seed) under `cfg`.
train::TrainConfig cell_config(const ExperimentConfig& cfg, train::Method method, double eps, std::uint64_t seed);
/// Training config of the fully observed reference for `seed`.
train::TrainConfig reference_config(const ExperimentConfig& cfg, std::uint64_t seed);

/// Trains and evaluates one cell; one row per requested metric. Failures
/// become error rows with NaN values.
std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, train::Method method, double eps, std::uint64_t seed,
                                ReferenceCache& cache, std::shared_ptr<const train::Model>* trained = nullptr);

/// Every (method, eps, seed) cell, in that nesting order.
BenchmarkResult run_benchmark(const ExperimentConfig& cfg);

/// Per-cell mean/std over seeds.
nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<ResultRow>& rows);

struct BiasPoint {
  std::string method;
  double eps;
  double mean_drift;
  double std_drift;
  std::vector<double> per_seed;
};

/// Mean |posterior mean - theta*| per (method, eps), for the zero-fill mask
/// baseline and RISE by default.
std::vector<BiasPoint> run_bias_demo(const ExperimentConfig& cfg, BenchmarkResult* raw = nullptr);

/// Coverage of a trained model on n_calibration cases drawn at the model's
/// own mechanism and eps.
metrics::CoverageCurve model_coverage(const train::Model& model, std::span<const double> levels,
                                      std::size_t n_calibration, std::size_t n_draws, std::uint64_t seed);

/// Coverage of methods[0] trained at eps[0] with seeds[0].
metrics::CoverageCurve run_coverage(const ExperimentConfig& cfg);

struct MetaRow {
  std::string method;
  double eps;
  std::uint64_t seed;
  double mmd;
};

/// RISE-Meta vs NPE-NN trained at nn_eps, evaluated at eps ~ U(0, 1).
std::vector<MetaRow> run_meta_eval(const ExperimentConfig& cfg);

/// Runs jobs on `workers` threads; job i's result lands in slot i.
void run_parallel(std::size_t workers, std::size_t n_jobs, const std::function<void(std::size_t)>& job);

void write_rows_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
void write_bias_csv(const std::filesystem::path& path, const std::vector<BiasPoint>& points);
void write_coverage_csv(const std::filesystem::path& path, const metrics::CoverageCurve& curve);
void write_meta_csv(const std::filesystem::path& path, const std::vector<MetaRow>& rows);

double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace rise::exp
