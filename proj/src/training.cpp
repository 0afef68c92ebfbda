#include "rise/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

#include "rise/error.hpp"

namespace rise::train {

namespace {

constexpr std::size_t kScaleSims = 1000;
constexpr std::size_t kImputerWidth = 64;

Tensor mask_matrix(std::span<const miss::MaskedSample> batch, std::size_t d) {
  Tensor s({batch.size(), d});
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) s.at(i, j) = batch[i].mask.s[j] ? 1.0 : 0.0;
  return s;
}

Tensor full_matrix(std::span<const miss::MaskedSample> batch, std::size_t d) {
  Tensor x({batch.size(), d});
  for (std::size_t i = 0; i < batch.size(); ++i) std::copy(batch[i].x.begin(), batch[i].x.end(), x.data() + i * d);
  return x;
}

Tensor rows_of(const Tensor& m, std::span<const std::size_t> idx) {
  const std::size_t c = m.cols();
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.data() + idx[i] * c, c, out.data() + i * c);
  return out;
}

ad::Var neg_mean(const ad::Var& v) { return ad::neg(ad::mean(v)); }

bool is_rise(Method m) { return m == Method::Rise || m == Method::RiseMeta || m == Method::RiseSep; }

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::Rise: return "rise";
    case Method::RiseMeta: return "rise_meta";
    case Method::RiseSep: return "rise_sep";
    case Method::NpeNn: return "npe_nn";
    case Method::NpeMaskZero: return "npe_mask_zero";
    case Method::NpeMaskMean: return "npe_mask_mean";
    case Method::Npe: return "npe";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return c == '-' ? '_' : std::tolower(c); });
  for (Method m : {Method::Rise, Method::RiseMeta, Method::RiseSep, Method::NpeNn, Method::NpeMaskZero,
                   Method::NpeMaskMean, Method::Npe}) {
    if (to_string(m) == n) return m;
  }
  throw ConfigError("unknown method '" + name +
                    "' (expected rise|rise_meta|rise_sep|npe_nn|npe_mask_zero|npe_mask_mean|npe)");
}

bool uses_np(Method m) { return is_rise(m); }

bool uses_mask_context(Method m) { return m == Method::NpeMaskZero || m == Method::NpeMaskMean; }

void validate(const TrainConfig& cfg) {
  if (cfg.batch < 1) throw ConfigError("train config: batch must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError("train config: lr must be positive");
  if (cfg.m < 1) throw ConfigError("train config: m must be >= 1");
  if (cfg.k < 1) throw ConfigError("train config: k must be >= 1");
  if (!(cfg.eps >= 0.0 && cfg.eps <= 1.0)) throw ConfigError("train config: eps must lie in [0, 1]");
  for (double e : cfg.eps_set) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("train config: eps_set entries must lie in [0, 1]");
  }
  if (cfg.method == Method::RiseMeta && cfg.eps_set.empty()) {
    throw ConfigError("train config: rise_meta needs a non-empty eps_set");
  }
  if (cfg.budget == 1) throw ConfigError("train config: budget must be 0 (fresh) or >= 2");
  if (!(cfg.validation >= 0.0 && cfg.validation < 1.0)) {
    throw ConfigError("train config: validation must lie in [0, 1)");
  }
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known{"task", "method", "mechanism", "eps", "eps_set", "n_iter", "budget",
                                              "validation", "batch", "lr", "m", "k", "seed", "out"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("train config: unknown key '" + item.key() + "'");
    }
  }
  TrainConfig cfg;
  try {
    if (j.contains("task")) cfg.task = sim::parse_task(j.at("task").get<std::string>());
    if (j.contains("method")) cfg.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("mechanism")) cfg.mechanism = miss::parse_mechanism(j.at("mechanism").get<std::string>());
    if (j.contains("eps")) cfg.eps = j.at("eps").get<double>();
    if (j.contains("eps_set")) cfg.eps_set = j.at("eps_set").get<std::vector<double>>();
    if (j.contains("n_iter")) cfg.n_iter = j.at("n_iter").get<std::size_t>();
    if (j.contains("budget")) cfg.budget = j.at("budget").get<std::size_t>();
    if (j.contains("validation")) cfg.validation = j.at("validation").get<double>();
    if (j.contains("batch")) cfg.batch = j.at("batch").get<std::size_t>();
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("m")) cfg.m = j.at("m").get<std::size_t>();
    if (j.contains("k")) cfg.k = j.at("k").get<std::size_t>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"task", sim::to_string(cfg.task)},
                   {"method", to_string(cfg.method)},
                   {"mechanism", miss::to_string(cfg.mechanism)},
                   {"eps", cfg.eps},
                   {"n_iter", cfg.n_iter},
                   {"budget", cfg.budget},
                   {"validation", cfg.validation},
                   {"batch", cfg.batch},
                   {"lr", cfg.lr},
                   {"m", cfg.m},
                   {"k", cfg.k},
                   {"seed", cfg.seed},
                   {"out", cfg.out}};
  if (!cfg.eps_set.empty()) j["eps_set"] = cfg.eps_set;
  return j;
}

miss::MissingnessSpec missing_spec(const sim::TaskSpec& task, miss::Mechanism mechanism, double eps,
                                   std::uint64_t seed) {
  miss::MissingnessSpec spec;
  spec.mechanism = mechanism;
  spec.eps = eps;
  if (mechanism == miss::Mechanism::Mar) {
    // Driver is coordinate 0; slope is two per driver standard deviation.
    Rng mar = Rng(seed).split("mar");
    const auto pilot = sim::simulate_batch(task, kScaleSims, mar);
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < pilot.size(); ++i) mu += pilot.xs.at(i, 0);
    mu /= static_cast<double>(pilot.size());
    for (std::size_t i = 0; i < pilot.size(); ++i) var += (pilot.xs.at(i, 0) - mu) * (pilot.xs.at(i, 0) - mu);
    const double sd = std::sqrt(var / static_cast<double>(pilot.size() - 1));
    spec.slope = sd > 0 ? 2.0 / sd : 1.0;
    spec = miss::calibrate_mar(task, spec, kScaleSims, mar);
  }
  return spec;
}

std::unique_ptr<Model> build_model(const TrainConfig& cfg) {
  validate(cfg);
  auto model = std::make_unique<Model>();
  model->config = cfg;
  model->task = sim::make_task(cfg.task);
  const std::size_t d = model->task.data_dim, p = model->task.param_dim;
  const Rng root(cfg.seed);
  const Rng init = root.split("init");

  model->missing = missing_spec(model->task, cfg.mechanism, cfg.eps_set.empty() ? cfg.eps : cfg.eps_set.front(),
                                cfg.seed);

  if (uses_np(cfg.method)) {
    np::NPConfig npc;
    npc.data_dim = d;
    npc.m = cfg.m;
    npc.mechanism = cfg.mechanism;
    Rng r = init.split("np");
    model->np.emplace(model->store, npc, r);
  }
  Rng rs = init.split("summary");
  model->summary = flow::SummaryNet(model->store, model->task.summary, d, rs);
  flow::MAFConfig fc;
  fc.param_dim = p;
  fc.context_dim = model->summary.out_dim() + (uses_mask_context(cfg.method) ? d : 0);
  Rng rf = init.split("flow");
  model->flow = flow::FlowModel(model->store, fc, rf);
  model->flow.zero_init();
  if (cfg.method == Method::NpeNn) {
    Rng ri = init.split("imputer");
    model->imputer.emplace(model->store, "imputer", std::vector<std::size_t>{2 * d, kImputerWidth, kImputerWidth, d},
                           nn::Activation::Relu, ri);
  }
  model->fill.assign(d, 0.0);
  return model;
}

sim::SimBatch training_set(const TrainConfig& cfg, const sim::TaskSpec& task) {
  Rng sims = Rng(cfg.seed).split("simulate");
  return sim::simulate_batch(task, cfg.budget > 0 ? cfg.budget : kScaleSims, sims);
}

ad::Var flow_context(const Model& model, const ad::Var& xs, std::span<const miss::MaskedSample> samples) {
  ad::Var ctx = model.summary.forward(xs);
  if (uses_mask_context(model.config.method)) {
    if (samples.size() != xs.rows()) throw ShapeError("flow_context: mask count does not match data rows");
    ctx = ad::concat_cols({ctx, ad::constant(mask_matrix(samples, model.task.data_dim))});
  }
  return ctx;
}

ad::Var npe_loss(const Model& model, const Tensor& thetas, const Tensor& xs) {
  return neg_mean(model.flow.log_prob(ad::constant(thetas), model.summary.forward(xs)));
}

ad::Var rise_loss(const Model& model, const Tensor& thetas, std::span<const miss::MaskedSample> batch,
                  std::size_t m, const Tensor& eta) {
  if (batch.empty()) throw ConfigError("rise_loss: empty batch");
  if (!model.np) throw ConfigError("rise_loss: model has no imputation network");
  ad::Var ll = np::log_likelihood(*model.np, batch, m, eta);
  ad::Var lq = model.flow.log_prob(ad::constant(thetas), model.summary.forward(full_matrix(batch, model.task.data_dim)));
  return neg_mean(ad::add(ll, lq));
}

ad::Var rise_loss(const Model& model, const Tensor& thetas, std::span<const miss::MaskedSample> batch,
                  std::size_t m, Rng& rng) {
  if (!model.np) throw ConfigError("rise_loss: model has no imputation network");
  Tensor eta({batch.size() * m, model.np->config().latent_dim});
  for (auto& v : eta.vec()) v = rng.normal();
  return rise_loss(model, thetas, batch, m, eta);
}

namespace {

// Standardized inputs with missing entries zeroed, plus the mask.
std::pair<Tensor, Tensor> imputer_inputs(const Model& model, std::span<const miss::MaskedSample> batch) {
  const std::size_t d = model.task.data_dim;
  const auto& sc = model.summary.input_scaler();
  Tensor xs({batch.size(), d}, 0.0);
  Tensor s = mask_matrix(batch, d);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      if (batch[i].mask.s[j]) xs.at(i, j) = (batch[i].x[j] - sc.mean()[j]) / sc.std()[j];
  return {xs, s};
}

}  // namespace

ad::Var nn_impute(const Model& model, std::span<const miss::MaskedSample> batch) {
  if (!model.imputer) throw ConfigError("nn_impute: model has no point imputer");
  auto [xs, s] = imputer_inputs(model, batch);
  Tensor miss_ind = s;
  for (auto& v : miss_ind.vec()) v = 1.0 - v;
  ad::Var pred = model.imputer->forward(ad::concat_cols({ad::constant(xs), ad::constant(s)}));
  ad::Var completed = ad::add(ad::constant(xs), ad::mul(pred, ad::constant(std::move(miss_ind))));
  return model.summary.input_scaler().inverse(completed);
}

Tensor fill_batch(const Model& model, std::span<const miss::MaskedSample> batch) {
  const std::size_t d = model.task.data_dim;
  Tensor out({batch.size(), d});
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = batch[i].mask.s[j] ? batch[i].x[j] : model.fill[j];
  return out;
}

namespace {

// Cycles through the budget set in shuffled epochs, or simulates afresh.
class BatchSource {
 public:
  BatchSource(const Model& model, const sim::SimBatch& data, Rng stream)
      : model_(model), data_(data), stream_(stream) {}

  std::pair<Tensor, Tensor> next(std::size_t iter) {
    const std::size_t b = model_.config.batch;
    if (model_.config.budget == 0) {
      Rng r = stream_.split("fresh").split(iter);
      auto fresh = sim::simulate_batch(model_.task, b, r);
      return {std::move(fresh.thetas), std::move(fresh.xs)};
    }
    const std::size_t n = data_.size();
    std::vector<std::size_t> idx;
    idx.reserve(b);
    while (idx.size() < b) {
      if (pos_ == order_.size()) {
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), 0);
        Rng r = stream_.split(epoch_++);
        for (std::size_t i = n; i > 1; --i) std::swap(order_[i - 1], order_[r.below(i)]);
        pos_ = 0;
      }
      idx.push_back(order_[pos_++]);
    }
    return {rows_of(data_.thetas, idx), rows_of(data_.xs, idx)};
  }

 private:
  const Model& model_;
  const sim::SimBatch& data_;
  Rng stream_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::uint64_t epoch_ = 0;
};

std::vector<miss::MaskedSample> make_masked(const Model& model, const Tensor& xs, double eps, const Rng& stream) {
  miss::MissingnessSpec spec = model.missing;
  spec.eps = eps;
  const std::size_t d = model.task.data_dim;
  std::vector<miss::MaskedSample> out;
  out.reserve(xs.rows());
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    std::span<const double> x(xs.data() + i * d, d);
    Rng r = stream.split(i);
    out.push_back(miss::apply_mask(x, miss::generate_mask(spec, x, r)));
  }
  return out;
}

void fit_scalers(Model& model, const sim::SimBatch& data) {
  if (model.np) model.np->scaler().fit(data.xs);
  model.summary.input_scaler().fit(data.xs);
  model.flow.theta_scaler().fit(data.thetas);
  const std::size_t d = model.task.data_dim;
  model.fill.assign(d, 0.0);
  if (model.config.method == Method::NpeMaskMean) {
    const std::size_t n = std::min(data.size(), kScaleSims);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) model.fill[j] += data.xs.at(i, j);
    for (auto& v : model.fill) v /= static_cast<double>(n);
  }
}

}  // namespace

double meta_eps(const TrainConfig& cfg, std::size_t iter) {
  if (cfg.eps_set.empty()) throw ConfigError("meta_eps: empty eps_set");
  Rng r = Rng(cfg.seed).split("run").split("eps").split(iter);
  return cfg.eps_set[r.below(cfg.eps_set.size())];
}

namespace {

enum class Phase { Joint, ImputerOnly, FlowOnImputations };

// Loss of one batch. `noise` feeds NP latents, `impute` the RISE-Sep completions.
ad::Var batch_loss(const Model& model, Phase phase, const Tensor& thetas, const Tensor& xs,
                   std::span<const miss::MaskedSample> batch, Rng& noise, Rng& impute) {
  const TrainConfig& cfg = model.config;
  const std::size_t d = model.task.data_dim;
  switch (cfg.method) {
    case Method::Rise:
    case Method::RiseMeta:
      return rise_loss(model, thetas, batch, cfg.m, noise);
    case Method::RiseSep: {
      if (phase == Phase::ImputerOnly) return neg_mean(np::log_likelihood(*model.np, batch, cfg.m, noise));
      Tensor completed = np::impute_batch(*model.np, batch, 1, impute);
      return neg_mean(model.flow.log_prob(ad::constant(thetas), model.summary.forward(completed)));
    }
    case Method::NpeNn: {
      auto [xs_std, s] = imputer_inputs(model, batch);
      ad::Var completed = nn_impute(model, batch);
      // Squared error on the missing coordinates, in standardized units.
      Tensor target({batch.size(), d}), miss_ind({batch.size(), d});
      std::size_t n_missing = 0;
      const auto& sc = model.summary.input_scaler();
      for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) {
          target.at(i, j) = (xs.at(i, j) - sc.mean()[j]) / sc.std()[j];
          miss_ind.at(i, j) = s.at(i, j) > 0.5 ? 0.0 : 1.0;
          n_missing += s.at(i, j) > 0.5 ? 0 : 1;
        }
      ad::Var lq = model.flow.log_prob(ad::constant(thetas), model.summary.forward(completed));
      ad::Var loss = neg_mean(lq);
      if (n_missing > 0) {
        ad::Var completed_std = model.summary.input_scaler().forward(completed);
        ad::Var err = ad::mul(ad::sub(completed_std, ad::constant(target)), ad::constant(miss_ind));
        loss = ad::add(loss, ad::scale(ad::sum(ad::square(err)), 1.0 / static_cast<double>(n_missing)));
      }
      return loss;
    }
    case Method::NpeMaskZero:
    case Method::NpeMaskMean: {
      ad::Var ctx = flow_context(model, ad::constant(fill_batch(model, batch)), batch);
      return neg_mean(model.flow.log_prob(ad::constant(thetas), ctx));
    }
    case Method::Npe:
      break;
  }
  return npe_loss(model, thetas, xs);
}

bool is_np(const std::string& name) { return name.rfind("np.", 0) == 0; }

// Held-out set with frozen masks and noise, so successive evaluations compare
// parameters only. The NP term and the rest are tracked apart: their
// parameter sets are disjoint and each is restored from its own best point.
class Validator {
 public:
  Validator(Model& model, const sim::SimBatch& data, Phase phase, const Rng& root)
      : model_(model), data_(data), phase_(phase), root_(root) {
    const TrainConfig& cfg = model.config;
    if (cfg.method == Method::Npe) return;
    const std::size_t d = model.task.data_dim;
    for (std::size_t i = 0; i < data.size(); ++i) {
      double eps = cfg.eps;
      if (cfg.method == Method::RiseMeta) eps = cfg.eps_set[i % cfg.eps_set.size()];
      miss::MissingnessSpec spec = model.missing;
      spec.eps = eps;
      std::span<const double> x(data.xs.data() + i * d, d);
      Rng r = root.split("mask").split(i);
      batch_.push_back(miss::apply_mask(x, miss::generate_mask(spec, x, r)));
    }
  }

  void check() {
    Rng noise = root_.split("noise"), impute = root_.split("impute");
    double np_term = 0.0;
    double total = 0.0;
    if (model_.config.method == Method::Rise || model_.config.method == Method::RiseMeta) {
      Tensor eta({batch_.size() * model_.config.m, model_.np->config().latent_dim});
      for (auto& v : eta.vec()) v = noise.normal();
      np_term = neg_mean(np::log_likelihood(*model_.np, batch_, model_.config.m, eta)).item();
      total = rise_loss(model_, data_.thetas, batch_, model_.config.m, eta).item();
    } else {
      total = batch_loss(model_, phase_, data_.thetas, data_.xs, batch_, noise, impute).item();
      if (phase_ == Phase::ImputerOnly) np_term = total;
    }
    const double rest = total - np_term;
    if (np_term < best_np_) {
      best_np_ = np_term;
      snapshot(true, np_values_);
    }
    if (rest < best_rest_) {
      best_rest_ = rest;
      snapshot(false, rest_values_);
    }
  }

  void restore() {
    for (auto* values : {&np_values_, &rest_values_})
      for (auto& [name, value] : *values) {
        ad::Var v = model_.store.get(name);
        v.mutable_value() = value;
      }
  }

 private:
  void snapshot(bool np_group, std::map<std::string, Tensor>& out) {
    out.clear();
    for (const auto& name : model_.store.names())
      if (model_.store.trainable(name) && is_np(name) == np_group) out[name] = model_.store.get(name).value();
  }

  Model& model_;
  const sim::SimBatch& data_;
  Phase phase_;
  Rng root_;
  std::vector<miss::MaskedSample> batch_;
  double best_np_ = std::numeric_limits<double>::infinity();
  double best_rest_ = std::numeric_limits<double>::infinity();
  std::map<std::string, Tensor> np_values_, rest_values_;
};

void run_phase(Model& model, const sim::SimBatch& data, const sim::SimBatch* held_out, Phase phase,
               const std::string& label, const Progress& progress) {
  const TrainConfig& cfg = model.config;
  const Rng root = Rng(cfg.seed).split(label);
  BatchSource source(model, data, root.split("batch"));
  const Rng mask_stream = root.split("mask");
  const Rng noise_stream = root.split("train");
  const Rng impute_stream = root.split("impute");
  AdamState adam;
  adam.config.lr = cfg.lr;
  std::optional<Validator> validator;
  std::size_t every = 0;
  if (held_out) {
    validator.emplace(model, *held_out, phase, root.split("validation"));
    every = std::max<std::size_t>(1, (data.size() + cfg.batch - 1) / cfg.batch);
  }

  for (std::size_t it = 0; it < cfg.n_iter; ++it) {
    auto [thetas, xs] = source.next(it);
    double eps = cfg.eps;
    if (cfg.method == Method::RiseMeta) eps = meta_eps(cfg, it);
    std::vector<miss::MaskedSample> batch;
    if (cfg.method != Method::Npe) batch = make_masked(model, xs, eps, mask_stream.split(it));

    ad::Var loss;
    try {
      Rng noise = noise_stream.split(it), impute = impute_stream.split(it);
      loss = batch_loss(model, phase, thetas, xs, batch, noise, impute);
      backward(loss, model.store);
      adam_step(model.store, adam);
      if (validator && ((it + 1) % every == 0 || it + 1 == cfg.n_iter)) validator->check();
    } catch (const std::exception& e) {
      throw std::runtime_error("training iteration " + std::to_string(it) + ": " + e.what());
    }
    const double value = loss.item();
    model.loss_trace.push_back(value);
    if (progress) progress(model.loss_trace.size() - 1, value);
  }
  if (validator) validator->restore();
}

}  // namespace

std::unique_ptr<Model> train(const TrainConfig& cfg, const Progress& progress) {
  auto model = build_model(cfg);
  sim::SimBatch data = training_set(cfg, model->task);
  fit_scalers(*model, data);
  // The tail of the budget set is held out.
  std::optional<sim::SimBatch> held_out;
  if (cfg.budget > 0 && cfg.validation > 0.0) {
    const auto n = data.size();
    const auto n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.validation * n)), 1, n - 1);
    std::vector<std::size_t> head(n - n_val), tail(n_val);
    std::iota(head.begin(), head.end(), 0);
    std::iota(tail.begin(), tail.end(), n - n_val);
    held_out = sim::SimBatch{data.task, data.seed, rows_of(data.thetas, tail), rows_of(data.xs, tail)};
    data.thetas = rows_of(data.thetas, head);
    data.xs = rows_of(data.xs, head);
  }
  const sim::SimBatch* val = held_out ? &*held_out : nullptr;
  if (cfg.method == Method::RiseSep) {
    model->store.set_trainable("flow.", false);
    model->store.set_trainable("summary.", false);
    run_phase(*model, data, val, Phase::ImputerOnly, "run", progress);
    model->store.set_trainable("flow.", true);
    model->store.set_trainable("summary.", true);
    model->store.set_trainable("np.", false);
    run_phase(*model, data, val, Phase::FlowOnImputations, "phase2", progress);
    model->store.set_trainable("np.", true);
  } else {
    run_phase(*model, data, val, Phase::Joint, "run", progress);
  }
  return model;
}

// ---------------------------------------------------------------- checkpoints

void write_loss_trace(const std::vector<double>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iter,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << trace[i] << '\n';
}

void save_model(const Model& model, const std::filesystem::path& stem) {
  nlohmann::json meta{{"config", to_json(model.config)},
                      {"fill", model.fill},
                      {"mar_offset", model.missing.driver_offset},
                      {"n_steps", model.loss_trace.size()}};
  if (!model.loss_trace.empty()) meta["final_loss"] = model.loss_trace.back();
  save_checkpoint(model.store, stem, meta);
  std::filesystem::path trace = stem;
  trace += ".loss.csv";
  write_loss_trace(model.loss_trace, trace);
}

std::unique_ptr<Model> load_model(const std::filesystem::path& stem) {
  nlohmann::json meta;
  ParameterStore loaded = load_checkpoint(stem, &meta);
  if (!meta.contains("config")) throw ConfigError("checkpoint " + stem.string() + " has no config echo");
  auto model = build_model(config_from_json(meta.at("config")));
  for (const auto& name : model->store.names()) {
    if (!loaded.contains(name)) throw ConfigError("checkpoint " + stem.string() + " lacks parameter " + name);
  }
  model->store.assign(loaded);
  model->fill = meta.at("fill").get<std::vector<double>>();
  model->missing.driver_offset = meta.at("mar_offset").get<double>();
  std::filesystem::path trace = stem;
  trace += ".loss.csv";
  std::ifstream in(trace);
  std::string line;
  if (in && std::getline(in, line)) {
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos) model->loss_trace.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  return model;
}

// ---------------------------------------------------------------- inference

ConditionedPosterior::ConditionedPosterior(const Model& model, Tensor contexts)
    : model_(&model), contexts_(std::move(contexts)) {
  if (contexts_.rows() == 0) throw ConfigError("posterior needs at least one context");
}

Tensor ConditionedPosterior::sample(std::size_t n, Rng& rng) const {
  if (n < 1) throw ConfigError("posterior sample: n must be >= 1");
  const std::size_t c = contexts_.cols(), k = contexts_.rows();
  Tensor ctx({n, c});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(contexts_.data() + (r % k) * c, c, ctx.data() + r * c);
  return model_->flow.sample(ctx, rng);
}

std::vector<double> ConditionedPosterior::log_prob(const Tensor& thetas) const {
  ad::NoGradGuard guard;
  const std::size_t n = thetas.rows(), c = contexts_.cols(), k = contexts_.rows();
  Tensor all_theta({n * k, thetas.cols()});
  Tensor ctx({n * k, c});
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(thetas.vec().begin(), thetas.vec().end(), all_theta.data() + j * thetas.numel());
    for (std::size_t r = 0; r < n; ++r) std::copy_n(contexts_.data() + j * c, c, ctx.data() + (j * n + r) * c);
  }
  const Tensor lp = model_->flow.log_prob(ad::constant(all_theta), ad::constant(ctx)).value();
  std::vector<double> out(n), comp(k);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) comp[j] = lp[j * n + r];
    out[r] = ad::log_mean_exp(comp);
  }
  return out;
}

double ConditionedPosterior::log_prob(std::span<const double> theta) const {
  return log_prob(Tensor::row(theta))[0];
}

ConditionedPosterior condition(const Model& model, const miss::MaskedSample& sample, Rng& rng, std::size_t k) {
  ad::NoGradGuard guard;
  const std::size_t d = model.task.data_dim;
  if (sample.dim() != d) throw ShapeError("condition: sample has dim " + std::to_string(sample.dim()));
  const std::span<const miss::MaskedSample> one(&sample, 1);
  if (k == 0) k = model.config.k;
  Tensor completed;
  switch (model.config.method) {
    case Method::Rise:
    case Method::RiseMeta:
    case Method::RiseSep: {
      completed = np::impute_batch(*model.np, one, k, rng);
      break;
    }
    case Method::NpeNn:
      completed = nn_impute(model, one).value();
      break;
    case Method::NpeMaskZero:
    case Method::NpeMaskMean:
      completed = fill_batch(model, one);
      break;
    case Method::Npe: {
      completed = Tensor({1, d});
      for (std::size_t j = 0; j < d; ++j) completed[j] = sample.mask.s[j] ? sample.x[j] : 0.0;
      break;
    }
  }
  std::vector<miss::MaskedSample> masks(completed.rows(), sample);
  return ConditionedPosterior(model, flow_context(model, ad::constant(completed), masks).value());
}

Tensor posterior_ensemble(const Model& model, const miss::MaskedSample& sample, std::size_t k, std::size_t n_per,
                          Rng& rng) {
  if (k < 1 || n_per < 1) throw ConfigError("posterior_ensemble: k and n_per must be >= 1");
  Rng impute_rng = rng.split("impute");
  Rng draw_rng = rng.split("draw");
  const ConditionedPosterior post = condition(model, sample, impute_rng, k);
  const std::size_t kk = post.n_components(), c = post.contexts().cols();
  Tensor ctx({kk * n_per, c});
  for (std::size_t j = 0; j < kk; ++j)
    for (std::size_t r = 0; r < n_per; ++r) std::copy_n(post.contexts().data() + j * c, c, ctx.data() + (j * n_per + r) * c);
  return model.flow.sample(ctx, draw_rng);
}

double nlpp(const Model& model, std::span<const double> theta_star, const miss::MaskedSample& sample,
            std::size_t m_eval, Rng& rng) {
  if (m_eval < 1) throw ConfigError("nlpp: m_eval must be >= 1");
  return condition(model, sample, rng, m_eval).log_prob(theta_star);
}

double method_imputation_rmse(const Model& model, std::span<const miss::MaskedSample> batch, Rng& rng) {
  switch (model.config.method) {
    case Method::Rise:
    case Method::RiseMeta:
    case Method::RiseSep:
      return np::imputation_rmse(*model.np, batch, model.config.k, rng);
    case Method::NpeNn: {
      ad::NoGradGuard guard;
      const Tensor pred = nn_impute(model, batch).value();
      const std::size_t d = model.task.data_dim;
      double total = 0.0;
      std::size_t counted = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].mis_idx.empty()) continue;
        double se = 0.0;
        for (std::size_t q = 0; q < batch[i].mis_idx.size(); ++q) {
          const double diff = pred[i * d + batch[i].mis_idx[q]] - batch[i].x_mis[q];
          se += diff * diff;
        }
        total += std::sqrt(se / static_cast<double>(batch[i].mis_idx.size()));
        ++counted;
      }
      if (counted == 0) throw ConfigError("imputation RMSE undefined: no missing coordinates in batch");
      return total / static_cast<double>(counted);
    }
    case Method::NpeMaskZero:
    case Method::NpeMaskMean:
    case Method::Npe:
      return np::fill_imputation_rmse(batch, model.fill);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace rise::train
