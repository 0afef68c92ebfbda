#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rise/error.hpp"
#include "rise/experiments.hpp"
#include "rise/metrics.hpp"
#include "rise/training.hpp"

using namespace rise;
using nlohmann::json;

namespace {

struct Flags {
  std::string task, config, mechanism, metric, a, b, checkpoint, obs, out;
  std::optional<std::size_t> n, workers;
  std::optional<std::uint64_t> seed;
  std::optional<double> eps;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Observation CSV: header line then one row; "nan" marks a missing entry.
miss::MaskedSample read_observation(const std::string& path) {
  std::vector<std::string> names;
  const Tensor t = metrics::read_samples(path, &names);
  if (t.rows() != 1) throw ConfigError("observation file must hold exactly one row");
  std::vector<double> x(t.cols());
  miss::Mask mask{std::vector<std::uint8_t>(t.cols(), 1)};
  for (std::size_t j = 0; j < t.cols(); ++j) {
    if (std::isnan(t.at(0, j))) {
      mask.s[j] = 0;
      x[j] = 0.0;
    } else {
      x[j] = t.at(0, j);
    }
  }
  return miss::apply_mask(x, mask);
}

train::TrainConfig train_config(const Flags& f) {
  json j = f.config.empty() ? json::object() : read_json(f.config);
  if (!f.task.empty()) j["task"] = f.task;
  if (!f.mechanism.empty()) j["mechanism"] = f.mechanism;
  if (f.eps) j["eps"] = *f.eps;
  if (f.seed) j["seed"] = *f.seed;
  if (!f.out.empty()) j["out"] = f.out;
  if (f.n) j["budget"] = *f.n;
  auto cfg = train::config_from_json(j);
  if (cfg.out.empty()) throw ConfigError("train: an output stem is required (--out or config \"out\")");
  return cfg;
}

exp::ExperimentConfig experiment_config(const Flags& f) {
  json j = f.config.empty() ? json::object() : read_json(f.config);
  if (!f.task.empty()) j["task"] = f.task;
  if (!f.mechanism.empty()) j["mechanism"] = f.mechanism;
  if (f.eps) j["eps"] = *f.eps;
  if (f.seed) {
    j.erase("seeds");
    j["seed"] = *f.seed;
    if (!j.contains("n_seeds")) j["n_seeds"] = f.n.value_or(5);
  }
  if (f.n) {
    j.erase("seeds");
    j["n_seeds"] = *f.n;
  }
  if (!f.metric.empty()) j["metrics"] = f.metric;
  if (f.workers) j["workers"] = *f.workers;
  if (!f.out.empty()) j["out"] = f.out;
  return exp::experiment_from_json(j);
}

int cmd_simulate(const Flags& f) {
  if (f.task.empty() || f.out.empty()) throw ConfigError("simulate: --task and --out are required");
  const auto task = sim::make_task(sim::parse_task(f.task));
  const auto batch = sim::simulate_batch(task, f.n.value_or(1000), f.seed.value_or(0));
  sim::save_batch(batch, f.out);
  std::cout << "wrote " << batch.size() << " simulations to " << f.out << ".json/.bin\n";
  return 0;
}

int cmd_train(const Flags& f) {
  const auto cfg = train_config(f);
  const std::size_t every = std::max<std::size_t>(1, cfg.n_iter / 10);
  auto model = train::train(cfg, [&](std::size_t it, double loss) {
    if ((it + 1) % every == 0) std::cerr << "iter " << it + 1 << " loss " << loss << '\n';
  });
  train::save_model(*model, cfg.out);
  std::cout << "saved " << cfg.out << " (final loss " << model->loss_trace.back() << ")\n";
  return 0;
}

int cmd_infer(const Flags& f) {
  if (f.checkpoint.empty() || f.out.empty()) throw ConfigError("infer: --checkpoint and --out are required");
  const auto model = train::load_model(f.checkpoint);
  const std::uint64_t seed = f.seed.value_or(0);
  miss::MaskedSample sample;
  if (!f.obs.empty()) {
    sample = read_observation(f.obs);
  } else {
    // No observation given: draw a test case at the model's own mechanism/eps.
    const double eps = f.eps.value_or(model->config.eps);
    const auto cases = exp::make_test_cases(model->config.task, model->config.mechanism, eps, seed, 1);
    sample = cases.front().sample;
    std::cout << "theta*:";
    for (double v : cases.front().theta) std::cout << ' ' << v;
    std::cout << '\n';
  }
  Rng root = Rng(seed).split("infer");
  Rng impute = root.split("impute"), draw = root.split("draw");
  const Tensor draws = train::condition(*model, sample, impute).sample(f.n.value_or(1000), draw);
  metrics::write_samples(f.out, draws);
  std::cout << "wrote " << draws.rows() << " posterior draws to " << f.out << '\n';
  return 0;
}

int cmd_eval(const Flags& f) {
  if (f.metric.empty()) throw ConfigError("eval: --metric is required");
  std::vector<std::pair<std::string, double>> values;
  if (f.metric == "coverage") {
    if (f.checkpoint.empty()) throw ConfigError("eval --metric coverage needs --checkpoint");
    const auto model = train::load_model(f.checkpoint);
    const std::vector<double> levels{0.5, 0.7, 0.9};
    const auto curve = exp::model_coverage(*model, levels, f.n.value_or(200), 500, f.seed.value_or(0));
    if (!f.out.empty()) exp::write_coverage_csv(f.out, curve);
    for (std::size_t i = 0; i < curve.levels.size(); ++i) {
      std::cout << "coverage@" << curve.levels[i] << " = " << curve.coverage[i] << '\n';
    }
    return 0;
  }
  if (f.metric == "nlpp") {
    // --a: truths (one row per case), --b: observations with nan for missing.
    if (f.checkpoint.empty() || f.a.empty() || f.b.empty()) {
      throw ConfigError("eval --metric nlpp needs --checkpoint, --a (thetas) and --b (observations)");
    }
    const auto model = train::load_model(f.checkpoint);
    const Tensor thetas = metrics::read_samples(f.a), xs = metrics::read_samples(f.b);
    if (thetas.rows() != xs.rows()) throw ShapeError("nlpp: --a and --b need the same number of rows");
    double total = 0.0;
    for (std::size_t i = 0; i < thetas.rows(); ++i) {
      std::vector<double> x(xs.cols());
      miss::Mask mask{std::vector<std::uint8_t>(xs.cols(), 1)};
      for (std::size_t j = 0; j < xs.cols(); ++j) {
        if (std::isnan(xs.at(i, j))) mask.s[j] = 0; else x[j] = xs.at(i, j);
      }
      Rng r = Rng(f.seed.value_or(0)).split("nlpp").split(i);
      total += train::nlpp(*model, std::span<const double>(thetas.data() + i * thetas.cols(), thetas.cols()),
                           miss::apply_mask(x, mask), model->config.k, r);
    }
    values.push_back({"nlpp", total / static_cast<double>(thetas.rows())});
  } else {
    if (f.a.empty() || f.b.empty()) throw ConfigError("eval: --a and --b sample files are required");
    const Tensor a = metrics::read_samples(f.a), b = metrics::read_samples(f.b);
    if (f.metric == "mmd") {
      values.push_back({"mmd", metrics::mmd_rbf(a, b, metrics::median_heuristic(b))});
    } else if (f.metric == "c2st") {
      Rng r = Rng(f.seed.value_or(0)).split("c2st");
      values.push_back({"c2st", metrics::c2st(a, b, r)});
    } else if (f.metric == "rmse" || f.metric == "r2") {
      if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("eval: --a and --b shapes differ");
      if (f.metric == "r2") {
        values.push_back({"r2", metrics::r2_score(a.span(), b.span())});
      } else {
        double ss = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
        values.push_back({"rmse", std::sqrt(ss / static_cast<double>(a.numel()))});
      }
    } else {
      throw ConfigError("eval: unknown metric '" + f.metric + "' (mmd|c2st|nlpp|rmse|coverage|r2)");
    }
  }
  std::ostringstream csv;
  csv << "metric,value\n" << std::setprecision(17);
  for (const auto& [name, v] : values) csv << name << ',' << v << '\n';
  if (!f.out.empty()) {
    std::ofstream(f.out) << csv.str();
  }
  std::cout << csv.str();
  return 0;
}

int report_rows(const exp::BenchmarkResult& r) {
  std::cout << r.rows.size() << " rows, " << r.n_errors << " errors\n";
  for (const auto& row : r.rows) {
    if (!row.error.empty()) {
      std::cerr << "error: " << row.method << " eps=" << row.eps << " seed=" << row.seed << " " << row.metric << ": "
                << row.error << '\n';
    }
  }
  return r.n_errors == 0 ? 0 : 1;
}

int cmd_benchmark(const Flags& f) {
  const auto cfg = experiment_config(f);
  const auto result = exp::run_benchmark(cfg);
  for (const auto& cell : result.summary["cells"]) {
    std::cout << cell["method"].get<std::string>() << " eps=" << cell["eps"] << ' ' << cell["metric"].get<std::string>()
              << " mean=" << cell["mean"] << " std=" << cell["std"] << '\n';
  }
  return report_rows(result);
}

int cmd_bias_demo(const Flags& f) {
  json j = f.config.empty() ? json::object() : read_json(f.config);
  auto cfg = experiment_config(f);
  if (!j.contains("methods") && !j.contains("method")) {
    cfg.methods = {train::Method::NpeMaskZero, train::Method::Rise};
  }
  if (!j.contains("eps") && !f.eps) cfg.eps = {0.0, 0.1, 0.25, 0.6};
  if (!j.contains("n_test")) cfg.n_test = 20;
  exp::BenchmarkResult raw;
  const auto points = exp::run_bias_demo(cfg, &raw);
  std::cout << "method,eps,mean_drift,std_drift\n";
  for (const auto& p : points) std::cout << p.method << ',' << p.eps << ',' << p.mean_drift << ',' << p.std_drift << '\n';
  return report_rows(raw);
}

int cmd_coverage(const Flags& f) {
  const auto cfg = experiment_config(f);
  const auto curve = exp::run_coverage(cfg);
  std::cout << "level,coverage,n_calibration\n";
  for (std::size_t i = 0; i < curve.levels.size(); ++i) {
    std::cout << curve.levels[i] << ',' << curve.coverage[i] << ',' << curve.n_calibration << '\n';
  }
  return 0;
}

int cmd_meta_eval(const Flags& f) {
  json j = f.config.empty() ? json::object() : read_json(f.config);
  auto cfg = experiment_config(f);
  if (!j.contains("seeds") && !j.contains("n_seeds") && !f.n) cfg.seeds.resize(3);
  const auto rows = exp::run_meta_eval(cfg);
  for (const char* name : {"rise_meta", "npe_nn"}) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.method == name) {
        s += r.mmd;
        ++n;
      }
    }
    std::cout << name << " mean mmd " << (n ? s / static_cast<double>(n) : std::nan("")) << " over " << n << " draws\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rise: joint imputation and posterior estimation under missing data"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--task", f.task, "ricker|oup|glm|glu");
    sub->add_option("--n", f.n, "simulations / draws / seeds, depending on the command");
    sub->add_option("--seed", f.seed, "run seed");
    sub->add_option("--out", f.out, "output path or directory");
    sub->add_option("--config", f.config, "JSON config file");
    sub->add_option("--mechanism", f.mechanism, "mcar|mar|mnar");
    sub->add_option("--eps", f.eps, "missingness level in [0, 1]");
    sub->add_option("--workers", f.workers, "parallel cells");
  };

  auto* simulate = app.add_subcommand("simulate", "simulate (theta, x) pairs from the prior");
  common(simulate);
  auto* trainc = app.add_subcommand("train", "train one method and write a checkpoint");
  common(trainc);
  auto* infer = app.add_subcommand("infer", "draw posterior samples for one observation");
  common(infer);
  infer->add_option("--checkpoint", f.checkpoint, "checkpoint stem")->required();
  infer->add_option("--obs", f.obs, "observation CSV (nan = missing)");
  auto* eval = app.add_subcommand("eval", "evaluate a metric on sample files or a checkpoint");
  common(eval);
  eval->add_option("--metric", f.metric, "mmd|c2st|nlpp|rmse|coverage|r2")->required();
  eval->add_option("--a", f.a, "first sample CSV");
  eval->add_option("--b", f.b, "second (reference) sample CSV");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint stem (nlpp, coverage)");
  auto* bench = app.add_subcommand("benchmark", "methods x eps x seeds table");
  common(bench);
  bench->add_option("--metric", f.metric, "restrict to one metric");
  auto* bias = app.add_subcommand("bias-demo", "posterior drift vs eps");
  common(bias);
  auto* cov = app.add_subcommand("coverage", "expected coverage curve");
  common(cov);
  auto* meta = app.add_subcommand("meta-eval", "RISE-Meta vs NPE-NN over random eps");
  common(meta);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(f);
    if (trainc->parsed()) return cmd_train(f);
    if (infer->parsed()) return cmd_infer(f);
    if (eval->parsed()) return cmd_eval(f);
    if (bench->parsed()) return cmd_benchmark(f);
    if (bias->parsed()) return cmd_bias_demo(f);
    if (cov->parsed()) return cmd_coverage(f);
    if (meta->parsed()) return cmd_meta_eval(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
