#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rise/rng.hpp"
#include "rise/tensor.hpp"

namespace rise::metrics {

/// Biased (V-statistic) MMD with an RBF kernel, reported as
/// sqrt(max(MMD^2, 0)).
double mmd_rbf(const Tensor& x, const Tensor& y, double lengthscale);

/// Median of the n(n-1)/2 pairwise Euclidean distances between rows.
double median_heuristic(const Tensor& reference);

struct C2stConfig {
  std::size_t folds = 5;
  std::size_t epochs = 60;
  std::size_t batch = 128;
  double lr = 3e-3;
};

/// Mean held-out accuracy of a 2-hidden-layer (width max(2p, 16), relu) classifier
/// separating rows of x (label 0) from rows of y (label 1), stratified
/// k-fold cross-validation on jointly standardized features.
double c2st(const Tensor& x, const Tensor& y, Rng& rng, const C2stConfig& cfg = {});

struct CoverageCurve {
  std::vector<double> levels;
  std::vector<double> coverage;
  std::size_t n_calibration = 0;
};

/// Fraction of posterior draws whose log density exceeds the truth's.
double hdr_rank(std::span<const double> draw_log_probs, double truth_log_prob);

/// coverage(level) = fraction of ranks <= level.
CoverageCurve coverage_from_ranks(std::span<const double> ranks, std::span<const double> levels);

/// Sampler and density of one calibration posterior.
struct PosteriorOracle {
  std::function<Tensor(std::size_t, Rng&)> sample;
  std::function<std::vector<double>(const Tensor&)> log_prob;
};

/// Density-rank (highest-density-region) expected coverage over calibration
/// pairs; row j of theta_star is the truth for posteriors[j].
CoverageCurve expected_coverage(std::span<const PosteriorOracle> posteriors, const Tensor& theta_star,
                                std::span<const double> levels, std::size_t n_draws, Rng& rng);

double r2_score(std::span<const double> predictions, std::span<const double> targets);

/// Mean over columns of |mean(samples[:, j]) - truth[j]|.
double mean_abs_error(const Tensor& samples, std::span<const double> truth);
std::vector<double> column_means(const Tensor& samples);

/// Sample sets as CSV: one header line of column names, one row per draw.
void write_samples(const std::filesystem::path& path, const Tensor& samples,
                   const std::vector<std::string>& names = {});
Tensor read_samples(const std::filesystem::path& path, std::vector<std::string>* names = nullptr);

}  // namespace rise::metrics
