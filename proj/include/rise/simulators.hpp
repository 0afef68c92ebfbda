#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rise/rng.hpp"
#include "rise/tensor.hpp"

namespace rise::sim {

enum class TaskId { Ricker, Oup, Glm, Glu };

std::string to_string(TaskId id);
TaskId parse_task(const std::string& name);

struct UniformBox {
  std::vector<double> lower;
  std::vector<double> upper;
};

struct MultivariateNormal {
  std::vector<double> mean;
  Tensor precision;  // p x p, symmetric positive definite
};

using PriorSpec = std::variant<UniformBox, MultivariateNormal>;

enum class SummaryKind { Identity, Conv, Mlp };

struct TaskSpec {
  TaskId id;
  std::size_t data_dim;
  std::size_t param_dim;
  PriorSpec prior;
  SummaryKind summary;
};

TaskSpec make_task(TaskId id);
std::size_t prior_dim(const PriorSpec& prior);
void validate_prior(const PriorSpec& prior);
bool in_support(const PriorSpec& prior, std::span<const double> theta);

/// n x p matrix of i.i.d. prior draws.
Tensor sample_prior(const PriorSpec& prior, std::size_t n, Rng& rng);

/// F^T F for the 9x9 banded F with F(i,i-2)=1, F(i,i-1)=-2, F(i,i)=1+sqrt((i-1)/9).
Tensor build_glm_precision();
/// 10x10 block-diagonal precision diag(1, F^T F): bias coordinate first.
Tensor glm_full_precision();

inline constexpr double kRickerNoiseVar = 0.09;
inline constexpr std::size_t kRickerSteps = 100;
inline constexpr std::size_t kOupSteps = 25;
inline constexpr double kOupDt = 0.2;
inline constexpr double kOupX0 = 10.0;
inline constexpr std::size_t kGlmTrials = 100;
inline constexpr std::uint64_t kGlmDesignSeed = 20240101;
inline constexpr double kGluNoiseVar = 0.1;

/// Latent Ricker population N_1..N_T from N_0 = 1 and the given noise e_t.
std::vector<double> ricker_population(std::span<const double> theta, std::span<const double> noise);
std::vector<double> simulate_ricker(std::span<const double> theta, Rng& rng);

/// OU path x_1..x_T from x0 with Euler steps; `w` holds the N(0, dt) increments.
std::vector<double> oup_path(std::span<const double> theta, double x0, std::span<const double> w);
std::vector<double> simulate_oup(std::span<const double> theta, Rng& rng);

std::vector<double> simulate_glu(std::span<const double> theta, Rng& rng);

/// Frozen T x 10 design; column 0 is the constant 1.
const Tensor& glm_design();
/// Sufficient statistic (1/T) sum_t y_t v_t for given binary responses.
std::vector<double> glm_statistic(std::span<const int> y);
std::vector<double> simulate_glm(std::span<const double> theta, Rng& rng);

std::vector<double> simulate(const TaskSpec& task, std::span<const double> theta, Rng& rng);

struct SimBatch {
  TaskId task;
  std::uint64_t seed = 0;
  Tensor thetas;  // n x p
  Tensor xs;      // n x d
  std::size_t size() const { return thetas.rows(); }
};

/// n pairs (theta_i, x_i); row i uses sub-streams derived from `rng` and i.
SimBatch simulate_batch(const TaskSpec& task, std::size_t n, Rng& rng);
SimBatch simulate_batch(const TaskSpec& task, std::size_t n, std::uint64_t seed);

void save_batch(const SimBatch& batch, const std::filesystem::path& stem);
SimBatch load_batch(const std::filesystem::path& stem);

}  // namespace rise::sim
