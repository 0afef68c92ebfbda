#include "rise/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "rise/error.hpp"

namespace rise::exp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class T>
std::vector<T> as_list(const nlohmann::json& v) {
  if (v.is_array()) return v.get<std::vector<T>>();
  return {v.get<T>()};
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {kNaN, kNaN};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

miss::MaskedSample fully_observed(const miss::MaskedSample& s) {
  return miss::apply_mask(s.x, miss::Mask{std::vector<std::uint8_t>(s.dim(), 1)});
}

}  // namespace

const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> names{"mmd", "c2st", "nlpp", "rmse", "drift", "mean_error"};
  return names;
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.methods.empty()) throw ConfigError("experiment: methods must be non-empty");
  if (cfg.eps.empty()) throw ConfigError("experiment: eps list must be non-empty");
  if (cfg.seeds.empty()) throw ConfigError("experiment: seeds must be non-empty");
  for (double e : cfg.eps) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("experiment: eps values must lie in [0, 1]");
  }
  for (const auto& m : cfg.metrics) {
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) {
      throw ConfigError("experiment: unknown metric '" + m + "' (benchmark metrics: mmd|c2st|nlpp|rmse|drift|mean_error)");
    }
  }
  if (cfg.n_test < 1) throw ConfigError("experiment: n_test must be >= 1");
  if (cfg.n_samples < 2) throw ConfigError("experiment: n_samples must be >= 2");
  if (cfg.reference != "npe" && cfg.reference != "analytic") {
    throw ConfigError("experiment: reference must be npe or analytic");
  }
  if (cfg.reference == "analytic" && cfg.task != sim::TaskId::Glu) {
    throw ConfigError("experiment: analytic reference exists only for glu");
  }
  if (cfg.workers < 1) throw ConfigError("experiment: workers must be >= 1");
  train::validate(cfg.train);
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::vector<std::string> known{
      "task",   "methods", "method",    "mechanism",  "eps",           "eps_set",      "seeds",   "n_seeds",
      "seed",   "n_iter",  "budget",    "batch",      "lr",            "m",            "k",       "metrics",
      "n_test", "n_samples", "reference", "levels",   "n_calibration", "n_draws",      "n_meta_draws",
      "nn_eps", "workers", "out",   "validation"};
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("experiment config: unknown key '" + item.key() + "'");
    }
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("task")) cfg.task = sim::parse_task(j.at("task").get<std::string>());
    const char* mkey = j.contains("methods") ? "methods" : (j.contains("method") ? "method" : nullptr);
    if (mkey) {
      cfg.methods.clear();
      for (const auto& name : as_list<std::string>(j.at(mkey))) cfg.methods.push_back(train::parse_method(name));
    }
    if (j.contains("mechanism")) cfg.mechanism = miss::parse_mechanism(j.at("mechanism").get<std::string>());
    if (j.contains("eps")) cfg.eps = as_list<double>(j.at("eps"));
    if (j.contains("eps_set")) cfg.eps_set = j.at("eps_set").get<std::vector<double>>();
    if (j.contains("seeds")) {
      cfg.seeds = as_list<std::uint64_t>(j.at("seeds"));
    } else {
      const std::uint64_t base = j.value("seed", std::uint64_t{0});
      const std::size_t n = j.value("n_seeds", cfg.seeds.size());
      cfg.seeds.resize(n);
      std::iota(cfg.seeds.begin(), cfg.seeds.end(), base);
    }
    auto& t = cfg.train;
    if (j.contains("n_iter")) t.n_iter = j.at("n_iter").get<std::size_t>();
    if (j.contains("budget")) t.budget = j.at("budget").get<std::size_t>();
    if (j.contains("validation")) t.validation = j.at("validation").get<double>();
    if (j.contains("batch")) t.batch = j.at("batch").get<std::size_t>();
    if (j.contains("lr")) t.lr = j.at("lr").get<double>();
    if (j.contains("m")) t.m = j.at("m").get<std::size_t>();
    if (j.contains("k")) t.k = j.at("k").get<std::size_t>();
    if (j.contains("metrics")) cfg.metrics = as_list<std::string>(j.at("metrics"));
    if (j.contains("n_test")) cfg.n_test = j.at("n_test").get<std::size_t>();
    if (j.contains("n_samples")) cfg.n_samples = j.at("n_samples").get<std::size_t>();
    if (j.contains("reference")) cfg.reference = j.at("reference").get<std::string>();
    if (j.contains("levels")) cfg.levels = j.at("levels").get<std::vector<double>>();
    if (j.contains("n_calibration")) cfg.n_calibration = j.at("n_calibration").get<std::size_t>();
    if (j.contains("n_draws")) cfg.n_draws = j.at("n_draws").get<std::size_t>();
    if (j.contains("n_meta_draws")) cfg.n_meta_draws = j.at("n_meta_draws").get<std::size_t>();
    if (j.contains("nn_eps")) cfg.nn_eps = j.at("nn_eps").get<double>();
    if (j.contains("workers")) cfg.workers = j.at("workers").get<std::size_t>();
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  std::vector<std::string> methods;
  for (auto m : cfg.methods) methods.push_back(train::to_string(m));
  return {{"task", sim::to_string(cfg.task)},
          {"methods", methods},
          {"mechanism", miss::to_string(cfg.mechanism)},
          {"eps", cfg.eps},
          {"eps_set", cfg.eps_set},
          {"seeds", cfg.seeds},
          {"n_iter", cfg.train.n_iter},
          {"budget", cfg.train.budget},
          {"validation", cfg.train.validation},
          {"batch", cfg.train.batch},
          {"lr", cfg.train.lr},
          {"m", cfg.train.m},
          {"k", cfg.train.k},
          {"metrics", cfg.metrics},
          {"n_test", cfg.n_test},
          {"n_samples", cfg.n_samples},
          {"reference", cfg.reference},
          {"levels", cfg.levels},
          {"n_calibration", cfg.n_calibration},
          {"n_draws", cfg.n_draws},
          {"n_meta_draws", cfg.n_meta_draws},
          {"nn_eps", cfg.nn_eps},
          {"workers", cfg.workers},
          {"out", cfg.out}};
}

// ---------------------------------------------------------------- test data

std::vector<TestCase> make_test_cases(sim::TaskId task_id, miss::Mechanism mechanism, double eps,
                                      std::uint64_t seed, std::size_t n) {
  const sim::TaskSpec task = sim::make_task(task_id);
  const miss::MissingnessSpec spec = train::missing_spec(task, mechanism, eps, seed);
  // Truths, data and mask streams depend only on (seed, i), so cases are
  // shared across methods and masks are nested across eps under MCAR.
  const Rng root = Rng(seed).split("test");
  std::vector<TestCase> cases;
  cases.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Rng r = root.split(i);
    Rng prior_rng = r.split("prior"), sim_rng = r.split("simulate"), mask_rng = r.split("mask");
    const Tensor theta = sim::sample_prior(task.prior, 1, prior_rng);
    TestCase tc;
    tc.theta = theta.to_vector();
    const auto x = sim::simulate(task, tc.theta, sim_rng);
    tc.sample = miss::apply_mask(x, miss::generate_mask(spec, x, mask_rng));
    cases.push_back(std::move(tc));
  }
  return cases;
}

Tensor glu_analytic_posterior(std::span<const double> x, std::size_t n, Rng& rng) {
  const std::size_t p = x.size();
  const double sd = std::sqrt(sim::kGluNoiseVar);
  Tensor out({n, p});
  for (std::size_t j = 0; j < p; ++j) {
    // Acceptance probability is bounded below since x is close to the box.
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      std::size_t tries = 0;
      do {
        v = x[j] + sd * rng.normal();
        if (++tries > 1000000) throw DomainError("glu posterior: rejection sampler stalled");
      } while (v < -1.0 || v > 1.0);
      out.at(i, j) = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------- references

std::string ReferenceCache::key(const train::TrainConfig& cfg) {
  const std::string text = train::to_json(cfg).dump();
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_label(text);
  return os.str();
}

std::size_t ReferenceCache::trained() const {
  std::lock_guard lock(mu_);
  return trained_;
}

std::shared_ptr<const train::Model> ReferenceCache::get(const train::TrainConfig& cfg) {
  const std::string k = key(cfg);
  std::shared_ptr<Slot> slot;
  {
    std::lock_guard lock(mu_);
    auto& s = slots_[k];
    if (!s) s = std::make_shared<Slot>();
    slot = s;
  }
  std::call_once(slot->once, [&] {
    try {
      std::shared_ptr<train::Model> model;
      const auto stem = dir_.empty() ? std::filesystem::path{} : dir_ / ("reference-" + k);
      std::filesystem::path manifest = stem;
      manifest += ".json";
      if (!stem.empty() && std::filesystem::exists(manifest)) {
        model = train::load_model(stem);
      } else {
        model = train::train(cfg);
        if (!stem.empty()) {
          std::filesystem::create_directories(dir_);
          train::save_model(*model, stem);
        }
        std::lock_guard lock(mu_);
        ++trained_;
      }
      slot->model = std::move(model);
    } catch (...) {
      slot->error = std::current_exception();
    }
  });
  if (slot->error) std::rethrow_exception(slot->error);
  return slot->model;
}

train::TrainConfig cell_config(const ExperimentConfig& cfg, train::Method method, double eps, std::uint64_t seed) {
  train::TrainConfig t = cfg.train;
  t.task = cfg.task;
  t.method = method;
  t.mechanism = cfg.mechanism;
  t.eps = eps;
  t.seed = seed;
  t.eps_set = method == train::Method::RiseMeta ? cfg.eps_set : std::vector<double>{};
  t.out.clear();
  return t;
}

train::TrainConfig reference_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  train::TrainConfig t = cell_config(cfg, train::Method::Npe, 0.0, seed);
  t.mechanism = miss::Mechanism::Mcar;
  return t;
}

namespace {

Tensor reference_samples(const ExperimentConfig& cfg, const train::Model* ref, const TestCase& tc, std::size_t i,
                         std::uint64_t seed) {
  Rng r = Rng(seed).split("reference").split(i);
  if (cfg.reference == "analytic") return glu_analytic_posterior(tc.sample.x, cfg.n_samples, r);
  Rng impute = r.split("impute"), draw = r.split("draw");
  return train::condition(*ref, fully_observed(tc.sample), impute).sample(cfg.n_samples, draw);
}

}  // namespace

std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, train::Method method, double eps, std::uint64_t seed,
                                ReferenceCache& cache, std::shared_ptr<const train::Model>* trained) {
  const auto t0 = std::chrono::steady_clock::now();
  ResultRow base{sim::to_string(cfg.task), train::to_string(method), miss::to_string(cfg.mechanism), eps, seed, "",
                 kNaN, 0.0, ""};
  std::vector<ResultRow> rows;
  auto error_rows = [&](const std::string& msg) {
    for (const auto& m : cfg.metrics) {
      ResultRow r = base;
      r.metric = m;
      r.error = msg;
      r.seconds = seconds_since(t0);
      rows.push_back(r);
    }
    return rows;
  };

  std::shared_ptr<const train::Model> model;
  std::shared_ptr<const train::Model> ref;
  std::vector<TestCase> cases;
  try {
    model = train::train(cell_config(cfg, method, eps, seed));
    if (trained) *trained = model;
    const bool needs_ref = std::any_of(cfg.metrics.begin(), cfg.metrics.end(),
                                       [](const std::string& m) { return m == "mmd" || m == "c2st" || m == "mean_error"; });
    if (needs_ref && cfg.reference == "npe") ref = cache.get(reference_config(cfg, seed));
    cases = make_test_cases(cfg.task, cfg.mechanism, eps, seed, cfg.n_test);
  } catch (const std::exception& e) {
    return error_rows(e.what());
  }
  const double train_seconds = seconds_since(t0);

  // Posterior draws for each case, computed once and shared by metrics.
  const Rng eval = Rng(seed).split("eval");
  std::vector<Tensor> draws(cases.size()), refs(cases.size());
  auto posterior_draws = [&](std::size_t i) -> const Tensor& {
    if (draws[i].numel() == 0) {
      Rng r = eval.split(i);
      Rng impute = r.split("impute"), draw = r.split("draw");
      draws[i] = train::condition(*model, cases[i].sample, impute).sample(cfg.n_samples, draw);
    }
    return draws[i];
  };
  auto reference_draws = [&](std::size_t i) -> const Tensor& {
    if (refs[i].numel() == 0) refs[i] = reference_samples(cfg, ref.get(), cases[i], i, seed);
    return refs[i];
  };

  for (const auto& metric : cfg.metrics) {
    const auto tm = std::chrono::steady_clock::now();
    ResultRow row = base;
    row.metric = metric;
    try {
      double total = 0.0;
      if (metric == "rmse") {
        std::vector<miss::MaskedSample> batch;
        for (const auto& tc : cases) batch.push_back(tc.sample);
        Rng r = eval.split("rmse");
        total = train::method_imputation_rmse(*model, batch, r);
      } else {
        for (std::size_t i = 0; i < cases.size(); ++i) {
          if (metric == "mmd") {
            const Tensor& y = reference_draws(i);
            total += metrics::mmd_rbf(posterior_draws(i), y, metrics::median_heuristic(y));
          } else if (metric == "c2st") {
            Rng r = eval.split(i).split("c2st");
            total += metrics::c2st(posterior_draws(i), reference_draws(i), r);
          } else if (metric == "nlpp") {
            Rng r = eval.split(i).split("nlpp");
            total += train::nlpp(*model, cases[i].theta, cases[i].sample, cfg.train.k, r);
          } else if (metric == "drift") {
            total += metrics::mean_abs_error(posterior_draws(i), cases[i].theta);
          } else if (metric == "mean_error") {
            total += metrics::mean_abs_error(posterior_draws(i), metrics::column_means(reference_draws(i)));
          }
        }
        total /= static_cast<double>(cases.size());
      }
      if (!std::isfinite(total)) throw DomainError("metric " + metric + " is not finite");
      row.value = total;
    } catch (const std::exception& e) {
      row.value = kNaN;
      row.error = e.what();
    }
    row.seconds = train_seconds + seconds_since(tm);
    rows.push_back(row);
  }
  return rows;
}

void run_parallel(std::size_t workers, std::size_t n_jobs, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, n_jobs));
  if (workers == 1) {
    for (std::size_t i = 0; i < n_jobs; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n_jobs; i = next++) job(i);
    });
  }
  for (auto& t : threads) t.join();
}

nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<ResultRow>& rows) {
  struct Cell {
    ResultRow key;
    std::vector<double> values;
    std::size_t errors = 0;
  };
  std::vector<Cell> cells;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const Cell& c) {
      return c.key.task == r.task && c.key.method == r.method && c.key.mechanism == r.mechanism &&
             c.key.eps == r.eps && c.key.metric == r.metric;
    });
    if (it == cells.end()) {
      cells.push_back({r, {}, 0});
      it = cells.end() - 1;
    }
    if (r.error.empty()) {
      it->values.push_back(r.value);
    } else {
      ++it->errors;
    }
  }
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cells) {
    const auto [mean, sd] = mean_std(c.values);
    nlohmann::json j{{"task", c.key.task},     {"method", c.key.method}, {"mechanism", c.key.mechanism},
                     {"eps", c.key.eps},       {"metric", c.key.metric}, {"n", c.values.size()},
                     {"errors", c.errors}};
    j["mean"] = std::isfinite(mean) ? nlohmann::json(mean) : nlohmann::json(nullptr);
    j["std"] = std::isfinite(sd) ? nlohmann::json(sd) : nlohmann::json(nullptr);
    out.push_back(j);
  }
  std::size_t n_errors = 0;
  for (const auto& r : rows) n_errors += r.error.empty() ? 0 : 1;
  return {{"config", to_json(cfg)},
          {"budgets",
           {{"n_iter", cfg.train.n_iter},
            {"budget", cfg.train.budget},
            {"batch", cfg.train.batch},
            {"lr", cfg.train.lr},
            {"m", cfg.train.m},
            {"k", cfg.train.k},
            {"n_test", cfg.n_test},
            {"n_samples", cfg.n_samples},
            {"n_seeds", cfg.seeds.size()}}},
          {"conventions",
           {{"mmd", "sqrt(max(MMD^2, 0)) of the biased V-statistic, RBF kernel, median-heuristic lengthscale on "
                    "reference draws"},
            {"c2st", "held-out accuracy, 5-fold stratified, 0.5 = indistinguishable"},
            {"drift", "mean over coordinates of |posterior mean - true theta|"},
            {"mean_error", "mean over coordinates of |posterior mean - reference posterior mean|"},
            {"std", "sample standard deviation over seeds"}}},
          {"cells", out},
          {"errors", n_errors}};
}

BenchmarkResult run_benchmark(const ExperimentConfig& cfg) {
  validate(cfg);
  struct Job {
    train::Method method;
    double eps;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto m : cfg.methods)
    for (double e : cfg.eps)
      for (auto s : cfg.seeds) jobs.push_back({m, e, s});
  ReferenceCache cache(cfg.out.empty() ? std::filesystem::path{} : std::filesystem::path(cfg.out) / "references");
  std::vector<std::vector<ResultRow>> per_job(jobs.size());
  run_parallel(cfg.workers, jobs.size(), [&](std::size_t i) {
    per_job[i] = run_cell(cfg, jobs[i].method, jobs[i].eps, jobs[i].seed, cache);
  });
  BenchmarkResult result;
  for (auto& rows : per_job)
    for (auto& r : rows) result.rows.push_back(std::move(r));
  for (const auto& r : result.rows) result.n_errors += r.error.empty() ? 0 : 1;
  result.summary = summarize(cfg, result.rows);
  nlohmann::json refs = nlohmann::json::object();
  if (cfg.reference == "npe") {
    for (auto s : cfg.seeds) refs[std::to_string(s)] = ReferenceCache::key(reference_config(cfg, s));
  }
  result.summary["references"] = refs;
  result.summary["references_trained"] = cache.trained();
  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_rows_csv(std::filesystem::path(cfg.out) / "results.csv", result.rows);
    std::ofstream(std::filesystem::path(cfg.out) / "summary.json") << result.summary.dump(2) << '\n';
  }
  return result;
}

// ---------------------------------------------------------------- bias demo

std::vector<BiasPoint> run_bias_demo(const ExperimentConfig& cfg_in, BenchmarkResult* raw) {
  ExperimentConfig cfg = cfg_in;
  cfg.metrics = {"drift"};
  const std::string out = cfg.out;
  cfg.out.clear();
  BenchmarkResult result = run_benchmark(cfg);
  std::vector<BiasPoint> points;
  for (auto m : cfg.methods) {
    for (double e : cfg.eps) {
      BiasPoint pt{train::to_string(m), e, kNaN, kNaN, {}};
      for (const auto& r : result.rows) {
        if (r.method == pt.method && r.eps == e && r.error.empty()) pt.per_seed.push_back(r.value);
      }
      std::tie(pt.mean_drift, pt.std_drift) = mean_std(pt.per_seed);
      points.push_back(pt);
    }
  }
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_rows_csv(std::filesystem::path(out) / "results.csv", result.rows);
    write_bias_csv(std::filesystem::path(out) / "bias.csv", points);
    std::ofstream(std::filesystem::path(out) / "summary.json") << result.summary.dump(2) << '\n';
  }
  if (raw) *raw = std::move(result);
  return points;
}

// ---------------------------------------------------------------- coverage

metrics::CoverageCurve model_coverage(const train::Model& model, std::span<const double> levels,
                                      std::size_t n_calibration, std::size_t n_draws, std::uint64_t seed) {
  const auto& cfg = model.config;
  const auto cases = make_test_cases(cfg.task, cfg.mechanism, cfg.eps, seed, n_calibration);
  const Rng eval = Rng(seed).split("coverage");
  std::vector<train::ConditionedPosterior> posts;
  posts.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Rng r = eval.split(i).split("impute");
    posts.push_back(train::condition(model, cases[i].sample, r));
  }
  std::vector<metrics::PosteriorOracle> oracles;
  Tensor truth({cases.size(), model.task.param_dim});
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto* post = &posts[i];
    oracles.push_back({[post](std::size_t n, Rng& r) { return post->sample(n, r); },
                       [post](const Tensor& t) { return post->log_prob(t); }});
    std::copy(cases[i].theta.begin(), cases[i].theta.end(), truth.data() + i * truth.cols());
  }
  Rng draw = eval.split("draw");
  return metrics::expected_coverage(oracles, truth, levels, n_draws, draw);
}

metrics::CoverageCurve run_coverage(const ExperimentConfig& cfg) {
  validate(cfg);
  const std::uint64_t seed = cfg.seeds.front();
  const auto model = train::train(cell_config(cfg, cfg.methods.front(), cfg.eps.front(), seed));
  auto curve = model_coverage(*model, cfg.levels, cfg.n_calibration, cfg.n_draws, seed);
  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_coverage_csv(std::filesystem::path(cfg.out) / "coverage.csv", curve);
  }
  return curve;
}

// ---------------------------------------------------------------- meta eval

std::vector<MetaRow> run_meta_eval(const ExperimentConfig& cfg) {
  validate(cfg);
  std::vector<MetaRow> rows;
  std::vector<std::vector<MetaRow>> per_seed(cfg.seeds.size());
  ReferenceCache cache(cfg.out.empty() ? std::filesystem::path{} : std::filesystem::path(cfg.out) / "references");
  // Per seed: reference, RISE-Meta and NPE-NN models trained in parallel.
  const std::size_t n_jobs = cfg.seeds.size() * 3;
  std::vector<std::shared_ptr<const train::Model>> models(n_jobs);
  run_parallel(cfg.workers, n_jobs, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i / 3];
    switch (i % 3) {
      case 0: models[i] = cache.get(reference_config(cfg, seed)); break;
      case 1: models[i] = train::train(cell_config(cfg, train::Method::RiseMeta, cfg.eps_set.front(), seed)); break;
      case 2: models[i] = train::train(cell_config(cfg, train::Method::NpeNn, cfg.nn_eps, seed)); break;
    }
  });
  run_parallel(cfg.workers, cfg.seeds.size(), [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    const auto& ref = *models[3 * s];
    const train::Model* methods[2] = {models[3 * s + 1].get(), models[3 * s + 2].get()};
    Rng eps_rng = Rng(seed).split("meta-eps");
    for (std::size_t i = 0; i < cfg.n_meta_draws; ++i) {
      const double eps = eps_rng.uniform();
      const Rng r = Rng(seed).split("meta-eval").split(i);
      // One observation per draw; reuse the test-case generator at this eps.
      const Rng case_rng = r.split("case");
      Rng prior_rng = case_rng.split("prior"), sim_rng = case_rng.split("simulate"), mask_rng = case_rng.split("mask");
      const auto theta = sim::sample_prior(ref.task.prior, 1, prior_rng).vec();
      const auto x = sim::simulate(ref.task, theta, sim_rng);
      const auto spec = train::missing_spec(ref.task, cfg.mechanism, eps, seed);
      const auto sample = miss::apply_mask(x, miss::generate_mask(spec, x, mask_rng));
      Rng ref_impute = r.split("ref-impute"), ref_draw = r.split("ref-draw");
      const Tensor y = train::condition(ref, fully_observed(sample), ref_impute).sample(cfg.n_samples, ref_draw);
      const double ell = metrics::median_heuristic(y);
      for (const auto* m : methods) {
        Rng impute = r.split(train::to_string(m->config.method)).split("impute");
        Rng draw = r.split(train::to_string(m->config.method)).split("draw");
        const Tensor xs = train::condition(*m, sample, impute).sample(cfg.n_samples, draw);
        per_seed[s].push_back({train::to_string(m->config.method), eps, seed, metrics::mmd_rbf(xs, y, ell)});
      }
    }
  });
  for (auto& v : per_seed)
    for (auto& r : v) rows.push_back(r);
  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_meta_csv(std::filesystem::path(cfg.out) / "meta.csv", rows);
    nlohmann::json summary = nlohmann::json::object();
    for (const char* name : {"rise_meta", "npe_nn"}) {
      std::vector<double> v;
      for (const auto& r : rows)
        if (r.method == name) v.push_back(r.mmd);
      const auto [mean, sd] = mean_std(v);
      summary[name] = {{"mean_mmd", mean}, {"std_mmd", sd}, {"n", v.size()}};
    }
    summary["config"] = to_json(cfg);
    std::ofstream(std::filesystem::path(cfg.out) / "summary.json") << summary.dump(2) << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------- output

void write_rows_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "task,method,mechanism,eps,seed,metric,value,seconds,message\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.task << ',' << r.method << ',' << r.mechanism << ',' << r.eps << ',' << r.seed << ',' << r.metric << ',';
    if (std::isnan(r.value)) {
      out << "nan";
    } else {
      out << r.value;
    }
    out << ',' << std::setprecision(6) << r.seconds << std::setprecision(17) << ',' << csv_escape(r.error) << '\n';
  }
}

void write_bias_csv(const std::filesystem::path& path, const std::vector<BiasPoint>& points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "method,eps,mean_drift,std_drift,n_seeds\n" << std::setprecision(17);
  for (const auto& p : points) {
    out << p.method << ',' << p.eps << ',' << p.mean_drift << ',' << p.std_drift << ',' << p.per_seed.size() << '\n';
  }
}

void write_coverage_csv(const std::filesystem::path& path, const metrics::CoverageCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "level,coverage,n_calibration\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.levels.size(); ++i) {
    out << curve.levels[i] << ',' << curve.coverage[i] << ',' << curve.n_calibration << '\n';
  }
}

void write_meta_csv(const std::filesystem::path& path, const std::vector<MetaRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "method,eps,seed,mmd\n" << std::setprecision(17);
  for (const auto& r : rows) out << r.method << ',' << r.eps << ',' << r.seed << ',' << r.mmd << '\n';
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: need two equal-length series (n >= 2)");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace rise::exp
