#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <memory>

#include "rise/error.hpp"
#include "rise/experiments.hpp"
#include "rise/metrics.hpp"
#include "rise/training.hpp"

namespace py = pybind11;
using namespace rise;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) {
    const std::size_t n = static_cast<std::size_t>(a.shape(0));
    return Tensor({1, n}, std::vector<double>(a.data(), a.data() + n));
  }
  if (a.ndim() != 2) throw py::value_error("expected a 1-d or 2-d array");
  const std::size_t r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Tensor& t) {
  Array out({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

nlohmann::json to_json(const py::object& obj) {
  auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

py::object from_json(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

// NaN entries are missing.
miss::MaskedSample observation(const Array& x) {
  if (x.ndim() != 1) throw py::value_error("observation must be a 1-d array");
  std::vector<double> v(x.data(), x.data() + x.shape(0));
  miss::Mask mask{std::vector<std::uint8_t>(v.size(), 1)};
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (std::isnan(v[j])) {
      mask.s[j] = 0;
      v[j] = 0.0;
    }
  }
  return miss::apply_mask(v, mask);
}

struct PyModel {
  std::shared_ptr<train::Model> model;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint neural-process imputation and neural posterior estimation under missing data.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);

  m.def(
      "simulate",
      [](const std::string& task, std::size_t n, std::uint64_t seed) {
        const auto batch = sim::simulate_batch(sim::make_task(sim::parse_task(task)), n, seed);
        return py::make_tuple(to_array(batch.thetas), to_array(batch.xs));
      },
      py::arg("task"), py::arg("n"), py::arg("seed") = 0, "Draw (thetas, xs) from the prior and simulator.");

  m.def(
      "make_mask",
      [](const Array& x, const std::string& task, const std::string& mechanism, double eps, std::uint64_t seed) {
        const auto spec_task = sim::make_task(sim::parse_task(task));
        const auto spec = train::missing_spec(spec_task, miss::parse_mechanism(mechanism), eps, seed);
        Rng rng = Rng(seed).split("mask");
        const std::vector<double> v(x.data(), x.data() + x.size());
        const auto mask = miss::generate_mask(spec, v, rng);
        py::array_t<std::uint8_t> out(static_cast<py::ssize_t>(mask.s.size()));
        std::copy(mask.s.begin(), mask.s.end(), out.mutable_data());
        return out;
      },
      py::arg("x"), py::arg("task"), py::arg("mechanism") = "mcar", py::arg("eps") = 0.1, py::arg("seed") = 0,
      "Missingness mask for one data vector (1 = observed).");

  py::class_<PyModel>(m, "Model")
      .def_property_readonly("config", [](const PyModel& p) { return from_json(train::to_json(p.model->config)); })
      .def_property_readonly("loss_trace", [](const PyModel& p) { return p.model->loss_trace; })
      .def(
          "sample",
          [](const PyModel& p, const Array& x, std::size_t n, std::uint64_t seed, std::size_t k) {
            Rng root(seed);
            Rng impute = root.split("impute"), draw = root.split("draw");
            return to_array(train::condition(*p.model, observation(x), impute, k).sample(n, draw));
          },
          py::arg("x"), py::arg("n") = 1000, py::arg("seed") = 0, py::arg("k") = 0,
          "Posterior draws for one observation; NaN marks missing entries.")
      .def(
          "log_prob",
          [](const PyModel& p, const Array& thetas, const Array& x, std::uint64_t seed, std::size_t k) {
            Rng rng(seed);
            return train::condition(*p.model, observation(x), rng, k).log_prob(to_tensor(thetas));
          },
          py::arg("thetas"), py::arg("x"), py::arg("seed") = 0, py::arg("k") = 0)
      .def(
          "impute",
          [](const PyModel& p, const Array& x, std::size_t k, std::uint64_t seed) {
            if (!p.model->np) throw ConfigError("impute: method has no imputation network");
            Rng rng(seed);
            const auto s = observation(x);
            return to_array(np::impute_batch(*p.model->np, std::span(&s, 1), k, rng));
          },
          py::arg("x"), py::arg("k") = 16, py::arg("seed") = 0)
      .def("save", [](const PyModel& p, const std::string& stem) { train::save_model(*p.model, stem); });

  m.def(
      "train",
      [](const py::dict& config) {
        const auto cfg = train::config_from_json(to_json(config));
        train::validate(cfg);
        std::unique_ptr<train::Model> model;
        {
          py::gil_scoped_release release;
          model = train::train(cfg);
        }
        return PyModel{std::move(model)};
      },
      py::arg("config"), "Train one method from a config dict (same keys as the CLI train config).");

  m.def(
      "load_model", [](const std::string& stem) { return PyModel{train::load_model(stem)}; }, py::arg("stem"));

  m.def(
      "mmd",
      [](const Array& x, const Array& y, std::optional<double> lengthscale) {
        const Tensor a = to_tensor(x), b = to_tensor(y);
        return metrics::mmd_rbf(a, b, lengthscale ? *lengthscale : metrics::median_heuristic(b));
      },
      py::arg("x"), py::arg("y"), py::arg("lengthscale") = py::none(),
      "sqrt of the biased MMD^2; lengthscale defaults to the median heuristic on y.");
  m.def(
      "median_heuristic", [](const Array& x) { return metrics::median_heuristic(to_tensor(x)); }, py::arg("x"));
  m.def(
      "c2st",
      [](const Array& x, const Array& y, std::uint64_t seed) {
        Rng rng(seed);
        return metrics::c2st(to_tensor(x), to_tensor(y), rng);
      },
      py::arg("x"), py::arg("y"), py::arg("seed") = 0);

  m.def(
      "run_benchmark",
      [](const py::dict& config) {
        const auto cfg = exp::experiment_from_json(to_json(config));
        exp::BenchmarkResult res;
        {
          py::gil_scoped_release release;
          res = exp::run_benchmark(cfg);
        }
        py::list rows;
        for (const auto& r : res.rows) {
          py::dict d;
          d["task"] = r.task;
          d["method"] = r.method;
          d["mechanism"] = r.mechanism;
          d["eps"] = r.eps;
          d["seed"] = r.seed;
          d["metric"] = r.metric;
          d["value"] = r.value;
          d["seconds"] = r.seconds;
          d["message"] = r.error;
          rows.append(d);
        }
        return py::make_tuple(rows, from_json(res.summary));
      },
      py::arg("config"), "Run every (method, eps, seed) cell; returns (rows, summary).");
}
