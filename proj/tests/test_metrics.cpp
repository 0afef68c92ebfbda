#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "helpers.hpp"
#include "rise/error.hpp"
#include "rise/metrics.hpp"

using namespace rise;

namespace {

Tensor column(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

// 1-D Gaussian posterior oracle
metrics::PosteriorOracle gaussian(double mean, double sd) {
  metrics::PosteriorOracle o;
  o.sample = [=](std::size_t n, Rng& rng) {
    Tensor t({n, 1});
    for (auto& v : t.vec()) v = mean + sd * rng.normal();
    return t;
  };
  o.log_prob = [=](const Tensor& t) {
    std::vector<double> out;
    for (double v : t.vec()) {
      const double z = (v - mean) / sd;
      out.push_back(-0.5 * z * z - std::log(sd) - 0.5 * std::log(2 * std::numbers::pi));
    }
    return out;
  };
  return o;
}

}  // namespace

TEST_CASE("mmd") {
  Rng rng(1);
  SUBCASE("identical sets give zero") {
    const Tensor x = testutil::randn({50, 3}, rng);
    CHECK(metrics::mmd_rbf(x, x, 1.3) == 0.0);
  }
  SUBCASE("singletons") {
    for (double d : {0.5, 1.0, 2.0}) {
      const double l = 1.0;
      const double expected = std::sqrt(2 - 2 * std::exp(-d * d / (2 * l * l)));
      CHECK(metrics::mmd_rbf(column({0.0}), column({d}), l) == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK(metrics::mmd_rbf(column({0.0}), column({1.0}), 1.0) == doctest::Approx(0.8872).epsilon(1e-4));
  }
  SUBCASE("symmetric and non-negative") {
    for (int t = 0; t < 10; ++t) {
      const Tensor x = testutil::randn({30, 2}, rng), y = testutil::randn({40, 2}, rng, 1.5);
      const double a = metrics::mmd_rbf(x, y, 0.8), b = metrics::mmd_rbf(y, x, 0.8);
      CHECK(std::abs(a - b) <= 1e-12);
      CHECK(a >= 0.0);
    }
  }
  SUBCASE("shifted gaussians") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng r(seed);
      Tensor x = testutil::randn({1000, 1}, r), y = testutil::randn({1000, 1}, r);
      for (auto& v : y.vec()) v += 3.0;
      CHECK(metrics::mmd_rbf(x, y, metrics::median_heuristic(x)) > 0.5);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(metrics::mmd_rbf(column({0.0}), column({1.0}), 0.0), DomainError);
    CHECK_THROWS_AS(metrics::mmd_rbf(testutil::randn({3, 2}, rng), testutil::randn({3, 3}, rng), 1.0), ShapeError);
  }
}

TEST_CASE("median heuristic") {
  CHECK(metrics::median_heuristic(column({0.0, 1.0, 3.0})) == 2.0);
  CHECK(metrics::median_heuristic(column({2.0, 4.5})) == 2.5);
  CHECK_THROWS_AS(metrics::median_heuristic(column({1.0, 1.0, 1.0})), DomainError);
  CHECK_THROWS_AS(metrics::median_heuristic(column({1.0})), ConfigError);
  Rng rng(2);
  const Tensor x = testutil::randn({41, 3}, rng);
  const double base = metrics::median_heuristic(x);
  // brute-force oracle
  std::vector<double> d;
  for (std::size_t i = 0; i < 41; ++i)
    for (std::size_t j = i + 1; j < 41; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 3; ++c) s += (x.at(i, c) - x.at(j, c)) * (x.at(i, c) - x.at(j, c));
      d.push_back(std::sqrt(s));
    }
  std::sort(d.begin(), d.end());
  CHECK(base == doctest::Approx(0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2])).epsilon(1e-14));

  Tensor scaled = x, shifted = x, permuted({41, 3});
  for (auto& v : scaled.vec()) v *= 2.5;
  for (std::size_t i = 0; i < 41; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      shifted.at(i, c) += 7.0 - c;
      permuted.at(i, c) = x.at(40 - i, c);
    }
  CHECK(metrics::median_heuristic(scaled) == doctest::Approx(2.5 * base).epsilon(1e-12));
  CHECK(metrics::median_heuristic(shifted) == doctest::Approx(base).epsilon(1e-12));
  CHECK(metrics::median_heuristic(permuted) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("c2st") {
  SUBCASE("null case") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(100 + seed);
      const Tensor x = testutil::randn({1000, 2}, rng), y = testutil::randn({1000, 2}, rng);
      const double acc = metrics::c2st(x, y, rng);
      CAPTURE(seed);
      CHECK(acc >= 0.45);
      CHECK(acc <= 0.55);
    }
  }
  SUBCASE("separable") {
    Rng rng(3);
    Tensor x = testutil::randn({500, 1}, rng), y = testutil::randn({500, 1}, rng);
    for (auto& v : y.vec()) v += 10.0;
    CHECK(metrics::c2st(x, y, rng) > 0.99);
  }
  SUBCASE("errors") {
    Rng rng(4);
    CHECK_THROWS_AS(metrics::c2st(testutil::randn({4, 2}, rng), testutil::randn({4, 2}, rng), rng), ConfigError);
    CHECK_THROWS_AS(metrics::c2st(testutil::randn({10, 2}, rng), testutil::randn({12, 2}, rng), rng), ShapeError);
  }
  SUBCASE("reproducible") {
    Rng data(5);
    const Tensor x = testutil::randn({100, 2}, data), y = testutil::randn({100, 2}, data, 1.3);
    Rng a(6), b(6);
    CHECK(metrics::c2st(x, y, a) == metrics::c2st(x, y, b));
  }
}

TEST_CASE("expected coverage") {
  // theta ~ N(0,1), x ~ N(theta,1)  =>  theta | x ~ N(x/2, 1/2)
  const std::vector<double> levels{0.5, 0.7, 0.9};
  const std::size_t n = 200;
  Rng rng(7);
  Tensor truth({n, 1});
  std::vector<metrics::PosteriorOracle> exact, wide;
  for (std::size_t j = 0; j < n; ++j) {
    truth[j] = rng.normal();
    const double x = truth[j] + rng.normal();
    exact.push_back(gaussian(x / 2, std::sqrt(0.5)));
    wide.push_back(gaussian(x / 2, 3 * std::sqrt(0.5)));
  }
  Rng r1(8), r2(8);
  const auto calibrated = metrics::expected_coverage(exact, truth, levels, 500, r1);
  const auto conservative = metrics::expected_coverage(wide, truth, levels, 500, r2);
  CHECK(calibrated.n_calibration == n);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double g = levels[i];
    CHECK(std::abs(calibrated.coverage[i] - g) < 3 * std::sqrt(g * (1 - g) / n));
    CHECK(conservative.coverage[i] >= g);
  }
  CHECK_THROWS_AS(metrics::expected_coverage(std::span(exact).first(20), Tensor({20, 1}), levels, 10, rng),
                  ConfigError);
  const std::vector<double> bad{0.7, 0.5};
  CHECK_THROWS_AS(metrics::coverage_from_ranks(std::vector<double>{0.1}, bad), ConfigError);
}

TEST_CASE("hdr rank") {
  const std::vector<double> lp{-1.0, -2.0, -3.0, -4.0};
  CHECK(metrics::hdr_rank(lp, -2.5) == 0.5);
  CHECK(metrics::hdr_rank(lp, 0.0) == 0.0);
  CHECK(metrics::hdr_rank(lp, -10.0) == 1.0);
}

TEST_CASE("r2") {
  const std::vector<double> t{1.0, 2.0, 4.0, 7.0};
  CHECK(metrics::r2_score(t, t) == 1.0);
  const std::vector<double> mean(4, 3.5);
  CHECK(metrics::r2_score(mean, t) == doctest::Approx(0.0).epsilon(1e-14));
  const std::vector<double> anti{7.0, 4.0, 2.0, 1.0};
  CHECK(metrics::r2_score(anti, t) < 0.0);
  CHECK_THROWS_AS(metrics::r2_score(std::vector<double>{1, 2}, std::vector<double>{3, 3}), DomainError);
}

TEST_CASE("mean abs error") {
  const Tensor s = Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 6.0});
  CHECK(metrics::mean_abs_error(s, std::vector<double>{2.0, 0.0}) == doctest::Approx(2.0));
}

TEST_CASE("sample csv") {
  const auto dir = std::filesystem::temp_directory_path() / "rise_metrics_test";
  std::filesystem::create_directories(dir);
  Rng rng(9);
  const Tensor s = testutil::randn({25, 3}, rng);
  metrics::write_samples(dir / "s.csv", s);
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "theta0,theta1,theta2");
  std::vector<std::string> names;
  const Tensor back = metrics::read_samples(dir / "s.csv", &names);
  CHECK(back.vec() == s.vec());
  CHECK(back.shape() == s.shape());
  CHECK(names.size() == 3);
  {
    std::ofstream bad(dir / "bad.csv");
    bad << "a,b\n1,2\n3\n";
  }
  CHECK_THROWS_AS(metrics::read_samples(dir / "bad.csv"), ShapeError);
}
