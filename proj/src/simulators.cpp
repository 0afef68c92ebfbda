#include "rise/simulators.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "rise/error.hpp"
#include "rise/params.hpp"

namespace rise::sim {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

double sigmoid(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

}  // namespace

std::string to_string(TaskId id) {
  switch (id) {
    case TaskId::Ricker: return "ricker";
    case TaskId::Oup: return "oup";
    case TaskId::Glm: return "glm";
    case TaskId::Glu: return "glu";
  }
  return "unknown";
}

TaskId parse_task(const std::string& name) {
  if (name == "ricker") return TaskId::Ricker;
  if (name == "oup") return TaskId::Oup;
  if (name == "glm") return TaskId::Glm;
  if (name == "glu") return TaskId::Glu;
  throw ConfigError("unknown task '" + name + "' (expected ricker|oup|glm|glu)");
}

Tensor build_glm_precision() {
  constexpr std::size_t n = 9;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 1; i <= n; ++i) {
    if (i >= 3) f(i - 1, i - 3) = 1.0;
    if (i >= 2) f(i - 1, i - 2) = -2.0;
    f(i - 1, i - 1) = 1.0 + std::sqrt(static_cast<double>(i - 1) / 9.0);
  }
  const Eigen::MatrixXd ftf = f.transpose() * f;
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = ftf(i, j);
  return out;
}

Tensor glm_full_precision() {
  const Tensor inner = build_glm_precision();
  Tensor out({10, 10}, 0.0);
  out.at(0, 0) = 1.0;
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) out.at(i + 1, j + 1) = inner.at(i, j);
  return out;
}

TaskSpec make_task(TaskId id) {
  switch (id) {
    case TaskId::Ricker:
      return {id, kRickerSteps, 2, UniformBox{{2.0, 0.0}, {8.0, 20.0}}, SummaryKind::Conv};
    case TaskId::Oup:
      return {id, kOupSteps, 2, UniformBox{{0.0, -2.0}, {2.0, 2.0}}, SummaryKind::Conv};
    case TaskId::Glm:
      return {id, 10, 10, MultivariateNormal{std::vector<double>(10, 0.0), glm_full_precision()},
              SummaryKind::Identity};
    case TaskId::Glu:
      return {id, 10, 10, UniformBox{std::vector<double>(10, -1.0), std::vector<double>(10, 1.0)},
              SummaryKind::Identity};
  }
  throw ConfigError("unknown task id");
}

std::size_t prior_dim(const PriorSpec& prior) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, UniformBox>) return p.lower.size();
        else return p.mean.size();
      },
      prior);
}

void validate_prior(const PriorSpec& prior) {
  if (const auto* box = std::get_if<UniformBox>(&prior)) {
    if (box->lower.size() != box->upper.size() || box->lower.empty()) {
      throw ConfigError("uniform prior: lower/upper size mismatch");
    }
    for (std::size_t i = 0; i < box->lower.size(); ++i) {
      if (!(box->lower[i] < box->upper[i])) {
        throw ConfigError("uniform prior: lower >= upper in coordinate " + std::to_string(i));
      }
    }
    return;
  }
  const auto& mvn = std::get<MultivariateNormal>(prior);
  const std::size_t p = mvn.mean.size();
  if (mvn.precision.rows() != p || mvn.precision.cols() != p) throw ConfigError("normal prior: precision shape mismatch");
  const Eigen::MatrixXd prec = to_eigen(mvn.precision);
  if (!prec.isApprox(prec.transpose(), 1e-12)) throw ConfigError("normal prior: precision not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw ConfigError("normal prior: precision not positive definite");
}

bool in_support(const PriorSpec& prior, std::span<const double> theta) {
  if (theta.size() != prior_dim(prior)) return false;
  if (const auto* box = std::get_if<UniformBox>(&prior)) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!(theta[i] >= box->lower[i] && theta[i] <= box->upper[i])) return false;
    }
    return true;
  }
  for (double t : theta)
    if (!std::isfinite(t)) return false;
  return true;
}

Tensor sample_prior(const PriorSpec& prior, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample_prior: n must be >= 1");
  validate_prior(prior);
  const std::size_t p = prior_dim(prior);
  Tensor out({n, p});
  if (const auto* box = std::get_if<UniformBox>(&prior)) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j) out.at(i, j) = rng.uniform(box->lower[j], box->upper[j]);
    return out;
  }
  const auto& mvn = std::get<MultivariateNormal>(prior);
  const Eigen::MatrixXd cov = to_eigen(mvn.precision).inverse();
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
  Eigen::VectorXd z(p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) z(j) = rng.normal();
    const Eigen::VectorXd draw = chol * z;
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = mvn.mean[j] + draw(j);
  }
  return out;
}

std::vector<double> ricker_population(std::span<const double> theta, std::span<const double> noise) {
  std::vector<double> n_t(noise.size());
  double n = 1.0;
  for (std::size_t t = 0; t < noise.size(); ++t) {
    n = n * std::exp(theta[0] - n + noise[t]);
    n_t[t] = n;
  }
  return n_t;
}

std::vector<double> simulate_ricker(std::span<const double> theta, Rng& rng) {
  if (theta.size() != 2) throw ConfigError("ricker: theta must have 2 entries");
  if (theta[1] < 0) throw DomainError("ricker: theta2 must be non-negative (Poisson rate)");
  std::vector<double> noise(kRickerSteps);
  const double sd = std::sqrt(kRickerNoiseVar);
  for (auto& e : noise) e = sd * rng.normal();
  const auto pop = ricker_population(theta, noise);
  std::vector<double> x(kRickerSteps);
  for (std::size_t t = 0; t < kRickerSteps; ++t) {
    const double rate = theta[1] * pop[t];
    if (rate <= 0) {
      x[t] = 0.0;
    } else {
      std::poisson_distribution<long long> pois(rate);
      x[t] = static_cast<double>(pois(rng));
    }
  }
  return x;
}

std::vector<double> oup_path(std::span<const double> theta, double x0, std::span<const double> w) {
  std::vector<double> x(w.size());
  double cur = x0;
  const double target = std::exp(theta[1]);
  for (std::size_t t = 0; t < w.size(); ++t) {
    cur = cur + theta[0] * (target - cur) * kOupDt + 0.5 * w[t];
    x[t] = cur;
  }
  return x;
}

std::vector<double> simulate_oup(std::span<const double> theta, Rng& rng) {
  if (theta.size() != 2) throw ConfigError("oup: theta must have 2 entries");
  std::vector<double> w(kOupSteps);
  const double sd = std::sqrt(kOupDt);
  for (auto& v : w) v = sd * rng.normal();
  return oup_path(theta, kOupX0, w);
}

std::vector<double> simulate_glu(std::span<const double> theta, Rng& rng) {
  const double sd = std::sqrt(kGluNoiseVar);
  std::vector<double> x(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) x[i] = theta[i] + sd * rng.normal();
  return x;
}

const Tensor& glm_design() {
  static const Tensor design = [] {
    Rng rng(kGlmDesignSeed);
    Tensor v({kGlmTrials, 10});
    for (std::size_t t = 0; t < kGlmTrials; ++t) {
      v.at(t, 0) = 1.0;
      for (std::size_t j = 1; j < 10; ++j) v.at(t, j) = rng.normal();
    }
    return v;
  }();
  return design;
}

std::vector<double> glm_statistic(std::span<const int> y) {
  const Tensor& v = glm_design();
  if (y.size() != kGlmTrials) throw ConfigError("glm: expected " + std::to_string(kGlmTrials) + " responses");
  std::vector<double> x(10, 0.0);
  for (std::size_t t = 0; t < kGlmTrials; ++t) {
    if (!y[t]) continue;
    for (std::size_t j = 0; j < 10; ++j) x[j] += v.at(t, j);
  }
  for (auto& xi : x) xi /= static_cast<double>(kGlmTrials);
  return x;
}

std::vector<double> simulate_glm(std::span<const double> theta, Rng& rng) {
  if (theta.size() != 10) throw ConfigError("glm: theta must have 10 entries");
  const Tensor& v = glm_design();
  std::vector<int> y(kGlmTrials);
  for (std::size_t t = 0; t < kGlmTrials; ++t) {
    double eta = 0.0;
    for (std::size_t j = 0; j < 10; ++j) eta += v.at(t, j) * theta[j];
    y[t] = rng.bernoulli(sigmoid(eta)) ? 1 : 0;
  }
  return glm_statistic(y);
}

std::vector<double> simulate(const TaskSpec& task, std::span<const double> theta, Rng& rng) {
  switch (task.id) {
    case TaskId::Ricker: return simulate_ricker(theta, rng);
    case TaskId::Oup: return simulate_oup(theta, rng);
    case TaskId::Glm: return simulate_glm(theta, rng);
    case TaskId::Glu: return simulate_glu(theta, rng);
  }
  throw ConfigError("unknown task id");
}

SimBatch simulate_batch(const TaskSpec& task, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("simulate_batch: n must be >= 1");
  Rng prior_rng = rng.split("prior");
  SimBatch batch{task.id, 0, sample_prior(task.prior, n, prior_rng), Tensor({n, task.data_dim})};
  const Rng sim_root = rng.split("simulate");
  for (std::size_t i = 0; i < n; ++i) {
    Rng row_rng = sim_root.split(static_cast<std::uint64_t>(i));
    const auto x = simulate(task, std::span(batch.thetas.data() + i * task.param_dim, task.param_dim), row_rng);
    std::copy(x.begin(), x.end(), batch.xs.data() + i * task.data_dim);
  }
  return batch;
}

SimBatch simulate_batch(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SimBatch b = simulate_batch(task, n, rng);
  b.seed = seed;
  return b;
}

void save_batch(const SimBatch& batch, const std::filesystem::path& stem) {
  nlohmann::json header = {{"task", to_string(batch.task)},
                           {"n", batch.size()},
                           {"p", batch.thetas.cols()},
                           {"d", batch.xs.cols()},
                           {"seed", batch.seed}};
  write_blob(stem, {{"thetas", batch.thetas}, {"xs", batch.xs}}, header);
}

SimBatch load_batch(const std::filesystem::path& stem) {
  nlohmann::json header;
  auto tensors = read_blob(stem, &header);
  if (tensors.size() != 2 || tensors[0].first != "thetas" || tensors[1].first != "xs") {
    throw ConfigError("batch file " + stem.string() + " does not hold thetas/xs");
  }
  SimBatch b{parse_task(header.at("task").get<std::string>()), header.at("seed").get<std::uint64_t>(),
             std::move(tensors[0].second), std::move(tensors[1].second)};
  return b;
}

}  // namespace rise::sim
