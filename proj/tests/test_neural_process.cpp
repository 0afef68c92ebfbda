#include <doctest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "rise/error.hpp"
#include "rise/neural_process.hpp"

using namespace rise;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2 * std::numbers::pi);

np::NPConfig config(miss::Mechanism mech, std::size_t d) {
  np::NPConfig c;
  c.data_dim = d;
  c.mechanism = mech;
  return c;
}

struct Fixture {
  Rng init;
  ParameterStore store;
  np::NPModel model;
  explicit Fixture(miss::Mechanism mech = miss::Mechanism::Mcar, std::size_t d = 6, std::uint64_t seed = 1)
      : init(seed), model(store, config(mech, d), init) {}
};

miss::MaskedSample sample_with(std::vector<double> x, std::vector<std::uint8_t> s) {
  return miss::apply_mask(x, miss::Mask{std::move(s)});
}

}  // namespace

TEST_CASE("encoder is permutation invariant") {
  for (auto mech : {miss::Mechanism::Mcar, miss::Mechanism::Mnar}) {
    Fixture f(mech);
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
      std::vector<double> x(6);
      for (auto& v : x) v = rng.normal();
      const auto s = sample_with(x, {1, 0, 1, 1, 0, 1});
      // Reorder the context points by hand.
      auto p = s;
      std::reverse(p.x_obs.begin(), p.x_obs.end());
      std::reverse(p.c_obs.begin(), p.c_obs.end());
      std::reverse(p.obs_idx.begin(), p.obs_idx.end());
      const auto a = f.model.encode(std::span(&s, 1));
      const auto b = f.model.encode(std::span(&p, 1));
      CHECK(testutil::max_abs_diff(a.mean.value(), b.mean.value()) < 1e-10);
      CHECK(testutil::max_abs_diff(a.sigma.value(), b.sigma.value()) < 1e-10);
    }
  }
}

TEST_CASE("duplicating every context point leaves the encoding unchanged") {
  Fixture f;
  const auto s = sample_with({0.3, -1.0, 0.2, 0.8, 1.1, -0.4}, {1, 1, 0, 1, 0, 1});
  auto dup = s;
  dup.x_obs.insert(dup.x_obs.end(), s.x_obs.begin(), s.x_obs.end());
  dup.c_obs.insert(dup.c_obs.end(), s.c_obs.begin(), s.c_obs.end());
  dup.obs_idx.insert(dup.obs_idx.end(), s.obs_idx.begin(), s.obs_idx.end());
  const auto a = f.model.encode(std::span(&s, 1));
  const auto b = f.model.encode(std::span(&dup, 1));
  CHECK(testutil::max_abs_diff(a.mean.value(), b.mean.value()) < 1e-12);
}

TEST_CASE("empty context is deterministic") {
  Fixture f;
  const auto s = sample_with(std::vector<double>(6, 0.5), std::vector<std::uint8_t>(6, 0));
  const auto a = f.model.encode(std::span(&s, 1));
  const auto b = f.model.encode(std::span(&s, 1));
  CHECK(a.mean.value().vec() == b.mean.value().vec());
  CHECK(a.mean.value().all_finite());
}

TEST_CASE("decoder") {
  Fixture f;
  Rng rng(3);
  const std::size_t l = f.model.config().latent_dim;
  SUBCASE("identical locations give identical outputs") {
    Tensor z = testutil::randn({1, l}, rng);
    Tensor zz({2, l});
    std::copy(z.vec().begin(), z.vec().end(), zz.vec().begin());
    std::copy(z.vec().begin(), z.vec().end(), zz.vec().begin() + l);
    const std::vector<double> locs{0.4, 0.4};
    const std::vector<std::size_t> coords{2, 2};
    const auto pred = f.model.decode(ad::constant(zz), locs, coords);
    CHECK(pred.mean.value()[0] == pred.mean.value()[1]);
    CHECK(pred.sigma.value()[0] == pred.sigma.value()[1]);
  }
  SUBCASE("sigma floor holds for random inputs") {
    const Tensor z = testutil::randn({1000, l}, rng, 5.0);
    std::vector<double> locs(1000);
    std::vector<std::size_t> coords(1000);
    for (std::size_t i = 0; i < 1000; ++i) {
      locs[i] = rng.uniform();
      coords[i] = i % 6;
    }
    const auto pred = f.model.decode(ad::constant(z), locs, coords);
    for (double s : pred.sigma.value().vec()) CHECK(s >= f.model.config().sigma_floor);
  }
  SUBCASE("zeroed output layer") {
    f.model.zero_decoder_output();
    const Tensor z = testutil::randn({5, l}, rng);
    const std::vector<double> locs{0, 0.2, 0.4, 0.6, 1};
    const std::vector<std::size_t> coords{0, 1, 2, 3, 5};
    const auto pred = f.model.decode(ad::constant(z), locs, coords);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(pred.mean.value()[i] == 0.0);
      CHECK(pred.sigma.value()[i] == doctest::Approx(std::log(2.0) + f.model.config().sigma_floor).epsilon(1e-15));
    }
  }
}

TEST_CASE("np log-likelihood closed forms") {
  Fixture f;
  Rng rng(4);
  SUBCASE("pinned decoder at the missing value with unit sigma") {
    const auto s = sample_with({0.1, 0.2, 0.7, 0.4, 0.5, 0.6}, {1, 1, 0, 1, 1, 1});
    const double raw = std::log(std::expm1(1.0 - f.model.config().sigma_floor));
    f.model.pin_decoder(f.model.standardize(2, 0.7), raw);
    const double ll = np::np_log_likelihood(s, f.model, 1, rng).item();
    CHECK(ll == doctest::Approx(-kHalfLog2Pi).epsilon(1e-12));
  }
  SUBCASE("no missing values contributes exactly zero") {
    const auto s = sample_with({0.1, 0.2, 0.7, 0.4, 0.5, 0.6}, {1, 1, 1, 1, 1, 1});
    CHECK(np::np_log_likelihood(s, f.model, 8, rng).item() == 0.0);
  }
  SUBCASE("identical draws collapse to the single-draw value") {
    const auto s = sample_with({0.1, 0.2, 0.7, 0.4, 0.5, 0.6}, {1, 0, 1, 0, 1, 1});
    const std::size_t l = f.model.config().latent_dim;
    Tensor one = testutil::randn({1, l}, rng);
    Tensor many({8, l});
    for (std::size_t j = 0; j < 8; ++j) std::copy(one.vec().begin(), one.vec().end(), many.vec().begin() + j * l);
    const double a = np::log_likelihood(f.model, std::span(&s, 1), 1, one).item();
    const double b = np::log_likelihood(f.model, std::span(&s, 1), 8, many).item();
    CHECK(b == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("np log-likelihood gradient with frozen latent noise") {
  for (auto mech : {miss::Mechanism::Mcar, miss::Mechanism::Mar, miss::Mechanism::Mnar}) {
    CAPTURE(miss::to_string(mech));
    Fixture f(mech, 5, 7);
    Rng rng(5);
    std::vector<miss::MaskedSample> batch;
    batch.push_back(sample_with({0.3, -0.2, 1.1, 0.6, -0.9}, {1, 0, 1, 0, 1}));
    batch.push_back(sample_with({-0.5, 0.4, 0.1, 0.9, 0.2}, {0, 1, 1, 1, 0}));
    const std::size_t m = 3;
    const Tensor eta = testutil::randn({batch.size() * m, f.model.config().latent_dim}, rng);
    double worst = 0.0;
    for (const auto& name : f.store.names()) {
      if (!f.store.trainable(name)) continue;
      ad::Var p = f.store.get(name);
      const Tensor original = p.value();
      rise::backward(ad::sum(np::log_likelihood(f.model, batch, m, eta)), f.store);
      const Tensor analytic = p.grad();
      const double h = 1e-5;
      for (std::size_t i = 0; i < original.numel(); i += std::max<std::size_t>(1, original.numel() / 7)) {
        p.mutable_value()[i] = original[i] + h;
        const double up = ad::sum(np::log_likelihood(f.model, batch, m, eta)).item();
        p.mutable_value()[i] = original[i] - h;
        const double down = ad::sum(np::log_likelihood(f.model, batch, m, eta)).item();
        p.mutable_value()[i] = original[i];
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("estimator spread shrinks with m") {
  Fixture f;
  const auto s = sample_with({0.3, -0.2, 1.1, 0.6, -0.9, 0.4}, {1, 0, 1, 0, 0, 1});
  auto spread = [&](std::size_t m) {
    Rng rng(6);
    double sum = 0, sq = 0;
    for (int r = 0; r < 200; ++r) {
      Rng rr = rng.split(std::uint64_t(r));
      const double v = np::np_log_likelihood(s, f.model, m, rr).item();
      sum += v;
      sq += v * v;
    }
    const double mean = sum / 200;
    return std::sqrt(sq / 200 - mean * mean);
  };
  CHECK(spread(32) < spread(1));
}

TEST_CASE("imputations") {
  Fixture f;
  const auto s = sample_with({0.3, -0.2, 1.1, 0.6, -0.9, 0.4}, {1, 0, 1, 0, 0, 1});
  SUBCASE("observed coordinates are copied bit for bit") {
    Rng rng(7);
    const auto imps = np::sample_imputations(s, f.model, 16, rng);
    REQUIRE(imps.size() == 16);
    for (const auto& v : imps) {
      for (std::size_t k = 0; k < s.obs_idx.size(); ++k) CHECK(v[s.obs_idx[k]] == s.x_obs[k]);
    }
  }
  SUBCASE("k = 1 is reproducible") {
    Rng a(8), b(8);
    CHECK(np::sample_imputations(s, f.model, 1, a) == np::sample_imputations(s, f.model, 1, b));
  }
  SUBCASE("spread is at least half the floor") {
    f.model.pin_decoder(0.0, -50.0);  // sigma collapses to the floor
    Rng rng(9);
    const auto imps = np::sample_imputations(s, f.model, 1000, rng);
    double sum = 0, sq = 0;
    for (const auto& v : imps) {
      sum += v[1];
      sq += v[1] * v[1];
    }
    const double sd = std::sqrt(sq / 1000 - (sum / 1000) * (sum / 1000));
    CHECK(sd >= 0.5 * f.model.config().sigma_floor);
  }
}

TEST_CASE("imputation rmse") {
  Fixture f;
  Rng rng(10);
  SUBCASE("constant zero predictor on standard normal targets") {
    const std::size_t d = 2000;
    std::vector<miss::MaskedSample> batch;
    for (int i = 0; i < 20; ++i) {
      std::vector<double> x(d);
      for (auto& v : x) v = rng.normal();
      std::vector<std::uint8_t> s(d, 0);
      s[0] = 1;
      batch.push_back(sample_with(x, s));
    }
    const std::vector<double> zero(d, 0.0);
    CHECK(np::fill_imputation_rmse(batch, zero) == doctest::Approx(1.0).epsilon(0.02));
  }
  SUBCASE("perfect imputer gives zero") {
    // a model pinned at the standardized truth of a constant coordinate
    const auto s = sample_with({0.3, 0.7, 0.0, 0.0, 0.0, 0.0}, {1, 0, 1, 1, 1, 1});
    f.model.pin_decoder(f.model.standardize(1, 0.7), -50.0);
    std::vector<miss::MaskedSample> batch{s};
    CHECK(np::imputation_rmse(f.model, batch, 4, rng) < 1e-2);
  }
  SUBCASE("no missing values is an error") {
    std::vector<miss::MaskedSample> batch{sample_with({1, 2, 3, 4, 5, 6}, {1, 1, 1, 1, 1, 1})};
    CHECK_THROWS_AS(np::imputation_rmse(f.model, batch, 4, rng), ConfigError);
  }
}
