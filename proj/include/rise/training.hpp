#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rise/flow.hpp"
#include "rise/missingness.hpp"
#include "rise/neural_process.hpp"
#include "rise/params.hpp"
#include "rise/simulators.hpp"

namespace rise::train {

/// Npe is the fully observed reference estimator (masks are ignored).
enum class Method { Rise, RiseMeta, RiseSep, NpeNn, NpeMaskZero, NpeMaskMean, Npe };

std::string to_string(Method m);
Method parse_method(const std::string& name);
bool uses_np(Method m);
bool uses_mask_context(Method m);

struct TrainConfig {
  sim::TaskId task = sim::TaskId::Glu;
  Method method = Method::Rise;
  miss::Mechanism mechanism = miss::Mechanism::Mcar;
  double eps = 0.1;
  std::vector<double> eps_set;  // RISE-Meta: equiprobable atoms
  std::size_t n_iter = 2000;
  std::size_t budget = 1000;  // 0 = fresh simulations every iteration
  double validation = 0.0;    // held-out share of the budget set, best checkpoint kept
  std::size_t batch = 50;
  double lr = 5e-4;
  std::size_t m = 8;
  std::size_t k = 16;
  std::uint64_t seed = 0;
  std::string out;
};

void validate(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);

/// Every parameter set a method needs, all in one store.
struct Model {
  TrainConfig config;
  sim::TaskSpec task;
  miss::MissingnessSpec missing;  // eps of the training run (MAR offset calibrated)
  ParameterStore store;
  std::optional<np::NPModel> np;
  flow::SummaryNet summary;
  flow::FlowModel flow;
  std::optional<nn::Mlp> imputer;  // NPE-NN point imputer on [x_std filled 0, s]
  std::vector<double> fill;         // constant fill for mask baselines (raw units)
  std::vector<double> loss_trace;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
};

/// Missingness spec of a run; MAR offsets are calibrated from the seed.
miss::MissingnessSpec missing_spec(const sim::TaskSpec& task, miss::Mechanism mechanism, double eps,
                                   std::uint64_t seed);

/// Fresh, untrained model with the architecture implied by `cfg`.
std::unique_ptr<Model> build_model(const TrainConfig& cfg);

/// Flow context rows for completed data `xs` (B x d); mask baselines
/// append each row's mask.
ad::Var flow_context(const Model& model, const ad::Var& xs, std::span<const miss::MaskedSample> samples);

/// Mean over the batch of -[np log-likelihood + log q(theta | summary(x))],
/// with x the true completed vector. `eta` is the latent noise (B*m x L).
ad::Var rise_loss(const Model& model, const Tensor& thetas, std::span<const miss::MaskedSample> batch,
                  std::size_t m, const Tensor& eta);
ad::Var rise_loss(const Model& model, const Tensor& thetas, std::span<const miss::MaskedSample> batch,
                  std::size_t m, Rng& rng);
/// -mean log q(theta | summary(x)) on full vectors.
ad::Var npe_loss(const Model& model, const Tensor& thetas, const Tensor& xs);

/// NPE-NN point imputation (B x d, raw units), differentiable.
ad::Var nn_impute(const Model& model, std::span<const miss::MaskedSample> batch);
/// Constant-fill completion used by the mask baselines (B x d, raw units).
Tensor fill_batch(const Model& model, std::span<const miss::MaskedSample> batch);

/// RISE-Meta missingness level at iteration `iter`.
double meta_eps(const TrainConfig& cfg, std::size_t iter);

/// Called after each optimizer step with (iteration, loss).
using Progress = std::function<void(std::size_t, double)>;

/// Trains any method; dispatches to the meta/separate variants.
std::unique_ptr<Model> train(const TrainConfig& cfg, const Progress& progress = {});

/// Checkpoint = manifest/blob pair with the config echo under "meta" plus a
/// `<stem>.loss.csv` trace.
void save_model(const Model& model, const std::filesystem::path& stem);
std::unique_ptr<Model> load_model(const std::filesystem::path& stem);
void write_loss_trace(const std::vector<double>& trace, const std::filesystem::path& path);

/// Posterior of one method for one (partially observed) observation: an
/// equal-weight mixture of the flow under K contexts.
class ConditionedPosterior {
 public:
  ConditionedPosterior(const Model& model, Tensor contexts);

  std::size_t n_components() const { return contexts_.rows(); }
  const Tensor& contexts() const { return contexts_; }
  /// n draws; draw r uses component r mod K.
  Tensor sample(std::size_t n, Rng& rng) const;
  /// Mixture log density per row of thetas (n x 1 values).
  std::vector<double> log_prob(const Tensor& thetas) const;
  double log_prob(std::span<const double> theta) const;

 private:
  const Model* model_;
  Tensor contexts_;
};

/// Imputes (RISE variants draw k completions, NPE-NN one point, mask
/// baselines fill) and returns the conditioned posterior. k = 0 uses the
/// configured number of imputations.
ConditionedPosterior condition(const Model& model, const miss::MaskedSample& sample, Rng& rng, std::size_t k = 0);

/// Ensemble of k imputations, n_per draws each, stacked (k*n_per x p).
Tensor posterior_ensemble(const Model& model, const miss::MaskedSample& sample, std::size_t k, std::size_t n_per,
                          Rng& rng);

/// log of the mixture density at theta* over m_eval imputations.
double nlpp(const Model& model, std::span<const double> theta_star, const miss::MaskedSample& sample,
            std::size_t m_eval, Rng& rng);

/// Imputation RMSE of the method's own imputation rule.
double method_imputation_rmse(const Model& model, std::span<const miss::MaskedSample> batch, Rng& rng);

/// Training data used by train(): the pre-simulated budget set.
sim::SimBatch training_set(const TrainConfig& cfg, const sim::TaskSpec& task);

}  // namespace rise::train
