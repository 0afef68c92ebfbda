#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>

#include "helpers.hpp"
#include "rise/error.hpp"
#include "rise/flow.hpp"

using namespace rise;

namespace {

const double kLog2Pi = std::log(2 * std::numbers::pi);

struct Flow {
  Rng init;
  ParameterStore store;
  flow::FlowModel model;
  Flow(std::size_t p, std::size_t c, std::uint64_t seed = 1, double jitter = 0.3)
      : init(seed), model(store, flow::MAFConfig{p, c}, init) {
    // Larger weights make the transform visibly non-linear.
    Rng rng(seed + 100);
    for (const auto& name : store.names()) {
      if (!store.trainable(name)) continue;
      ad::Var v = store.get(name);
      for (auto& x : v.mutable_value().vec()) x += jitter * rng.normal();
    }
  }
};

Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

}  // namespace

TEST_CASE("made masks are autoregressive") {
  for (std::size_t p : {1u, 2u, 3u, 5u}) {
    const auto masks = flow::made_masks(p, {20, 20});
    REQUIRE(masks.size() == 3);
    Eigen::MatrixXd conn = Eigen::MatrixXd::Identity(p, p);
    for (const auto& m : masks) {
      Eigen::MatrixXd e(m.rows(), m.cols());
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m.at(i, j);
      conn = conn * e;
    }
    // output j (shift) and p + j (log-scale) may only see inputs i < j
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        if (i >= j) {
          CHECK(conn(i, j) == 0.0);
          CHECK(conn(i, p + j) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("zero-initialized flow is the identity") {
  Flow f(3, 2);
  f.model.zero_init();
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const Tensor ctx = testutil::randn({1, 2}, rng);
    const double lq = f.model.log_prob(ad::constant(row({0, 0, 0})), ad::constant(ctx)).item();
    CHECK(lq == doctest::Approx(-1.5 * kLog2Pi).epsilon(1e-14));
  }
  SUBCASE("samples are standard normal") {
    const std::size_t n = 20000;
    const std::vector<double> ctx{0.5, -1.0};
    const Tensor s = f.model.sample(ctx, n, rng);
    for (std::size_t j = 0; j < 3; ++j) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < n; ++i) m += s.at(i, j);
      m /= n;
      for (std::size_t i = 0; i < n; ++i) v += (s.at(i, j) - m) * (s.at(i, j) - m);
      v /= n - 1;
      CHECK(std::abs(m) < 4 / std::sqrt(double(n)));
      CHECK(std::abs(v - 1) < 4 * std::sqrt(2.0 / n));
    }
    double c01 = 0;
    for (std::size_t i = 0; i < n; ++i) c01 += s.at(i, 0) * s.at(i, 1);
    CHECK(std::abs(c01 / n) < 4 / std::sqrt(double(n)));
  }
}

TEST_CASE("invertibility") {
  for (std::size_t p : {1u, 2u, 4u, 10u}) {
    CAPTURE(p);
    Flow f(p, 3, 3);
    f.model.theta_scaler().set(std::vector<double>(p, 0.7), std::vector<double>(p, 2.5));
    Rng rng(4);
    const Tensor z = testutil::randn({1000, p}, rng);
    const Tensor ctx = testutil::randn({1000, 3}, rng);
    const Tensor theta = f.model.forward(z, ctx);
    CHECK(testutil::max_abs_diff(f.model.inverse(theta, ctx), z) < 1e-8);
    const Tensor theta2 = testutil::randn({1000, p}, rng, 3.0);
    CHECK(testutil::max_abs_diff(f.model.forward(f.model.inverse(theta2, ctx), ctx), theta2) < 1e-8);
  }
}

TEST_CASE("log-determinant matches a numerical Jacobian") {
  for (std::size_t p : {1u, 2u, 3u}) {
    CAPTURE(p);
    Flow f(p, 2, 5, 0.5);
    f.model.theta_scaler().set(std::vector<double>(p, -0.3), std::vector<double>(p, 1.7));
    Rng rng(6);
    for (int t = 0; t < 10; ++t) {
      const Tensor theta = testutil::randn({1, p}, rng);
      const Tensor ctx = testutil::randn({1, 2}, rng);
      const Tensor z = f.model.inverse(theta, ctx);
      Eigen::MatrixXd jac(p, p);
      const double h = 1e-6;
      for (std::size_t j = 0; j < p; ++j) {
        Tensor up = theta, down = theta;
        up[j] += h;
        down[j] -= h;
        const Tensor zu = f.model.inverse(up, ctx), zd = f.model.inverse(down, ctx);
        for (std::size_t i = 0; i < p; ++i) jac(i, j) = (zu[i] - zd[i]) / (2 * h);
      }
      double base = -0.5 * p * kLog2Pi;
      for (std::size_t i = 0; i < p; ++i) base -= 0.5 * z[i] * z[i];
      const double logdet = f.model.log_prob(ad::constant(theta), ad::constant(ctx)).item() - base;
      const double numeric = std::log(std::abs(jac.determinant()));
      CHECK(std::abs(logdet - numeric) <= 1e-4 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST_CASE("one-dimensional density integrates to one") {
  Flow f(1, 1, 7, 0.5);
  const Tensor ctx = row({0.4});
  Rng rng(8);
  const Tensor s = f.model.sample(std::vector<double>{0.4}, 20000, rng);
  double m = 0, v = 0;
  for (double x : s.vec()) m += x;
  m /= s.numel();
  for (double x : s.vec()) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / (s.numel() - 1));
  const std::size_t n = 20001;
  const double lo = m - 6 * sd, hi = m + 6 * sd, step = (hi - lo) / (n - 1);
  Tensor grid({n, 1}), ctxs({n, 1}, 0.4);
  for (std::size_t i = 0; i < n; ++i) grid[i] = lo + step * i;
  const Tensor lq = f.model.log_prob(ad::constant(grid), ad::constant(ctxs)).value();
  double integral = 0;
  for (std::size_t i = 0; i < n; ++i) integral += (i == 0 || i == n - 1 ? 0.5 : 1.0) * std::exp(lq[i]) * step;
  CHECK(std::abs(integral - 1.0) < 0.01);
}

TEST_CASE("flow log-prob gradients") {
  Flow f(3, 2, 9);
  Rng rng(10);
  const Tensor ctx = testutil::randn({4, 2}, rng);
  const Tensor theta = testutil::randn({4, 3}, rng);
  SUBCASE("with respect to theta") {
    CHECK(ad::grad_check([&](const ad::Var& t) { return ad::sum(f.model.log_prob(t, ad::constant(ctx))); }, theta) <
          1e-4);
  }
  SUBCASE("with respect to context") {
    CHECK(ad::grad_check([&](const ad::Var& c) { return ad::sum(f.model.log_prob(ad::constant(theta), c)); }, ctx) <
          1e-4);
  }
  SUBCASE("with respect to every parameter") {
    double worst = 0;
    for (const auto& name : f.store.names()) {
      if (!f.store.trainable(name)) continue;
      ad::Var p = f.store.get(name);
      rise::backward(ad::sum(f.model.log_prob(ad::constant(theta), ad::constant(ctx))), f.store);
      const Tensor analytic = p.grad();
      const Tensor orig = p.value();
      for (std::size_t i = 0; i < orig.numel(); i += std::max<std::size_t>(1, orig.numel() / 5)) {
        const double h = 1e-5;
        p.mutable_value()[i] = orig[i] + h;
        const double up = ad::sum(f.model.log_prob(ad::constant(theta), ad::constant(ctx))).item();
        p.mutable_value()[i] = orig[i] - h;
        const double down = ad::sum(f.model.log_prob(ad::constant(theta), ad::constant(ctx))).item();
        p.mutable_value()[i] = orig[i];
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6}));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("sampling is reproducible and finite") {
  Flow f(2, 2, 11);
  const std::vector<double> ctx{0.1, 0.2};
  Rng a(12), b(12);
  const Tensor s1 = f.model.sample(ctx, 500, a), s2 = f.model.sample(ctx, 500, b);
  CHECK(s1.vec() == s2.vec());
  Tensor ctxs({500, 2});
  for (std::size_t i = 0; i < 500; ++i) {
    ctxs.at(i, 0) = 0.1;
    ctxs.at(i, 1) = 0.2;
  }
  CHECK(f.model.log_prob(ad::constant(s1), ad::constant(ctxs)).value().all_finite());
  SUBCASE("log q is not symmetric in theta order") {
    const double l1 = f.model.log_prob(ad::constant(row({0.3, -1.2})), ad::constant(row({0.1, 0.2}))).item();
    const double l2 = f.model.log_prob(ad::constant(row({-1.2, 0.3})), ad::constant(row({0.1, 0.2}))).item();
    CHECK(l1 != l2);
  }
}

TEST_CASE("flow config validation") {
  ParameterStore store;
  Rng rng(1);
  CHECK_THROWS_AS(flow::FlowModel(store, flow::MAFConfig{0, 1}, rng), ConfigError);
  flow::MAFConfig nsf{2, 1};
  nsf.kind = flow::FlowKind::Nsf;
  CHECK_THROWS_AS(flow::validate(nsf), ConfigError);
  Flow f(2, 3);
  CHECK_THROWS_AS(f.model.log_prob(ad::constant(row({1, 2, 3})), ad::constant(row({1, 2, 3}))), ShapeError);
}

TEST_CASE("summary networks") {
  Rng rng(13);
  SUBCASE("identity") {
    ParameterStore store;
    flow::SummaryNet net(store, sim::SummaryKind::Identity, 10, rng);
    const Tensor x = testutil::randn({3, 10}, rng);
    CHECK(net.forward(x).value().vec() == x.vec());
  }
  for (auto kind : {sim::SummaryKind::Conv, sim::SummaryKind::Mlp}) {
    for (std::size_t d : {25u, 100u}) {
      ParameterStore store;
      flow::SummaryNet net(store, kind, d, rng);
      const Tensor x = testutil::randn({5, d}, rng);
      const Tensor a = net.forward(x).value();
      CHECK(a.rows() == 5);
      CHECK(a.cols() == 4);
      CHECK(net.forward(x).value().vec() == a.vec());
      // each row is summarized independently
      Tensor first({1, d});
      std::copy(x.vec().begin(), x.vec().begin() + d, first.vec().begin());
      const Tensor a0 = net.forward(first).value();
      for (std::size_t j = 0; j < 4; ++j) CHECK(a0[j] == doctest::Approx(a.at(0, j)).epsilon(1e-12));
      Tensor bad = x;
      bad[3] = std::numeric_limits<double>::quiet_NaN();
      CHECK_THROWS_AS(net.forward(bad), DomainError);
    }
  }
  SUBCASE("conv gradient") {
    ParameterStore store;
    flow::SummaryNet net(store, sim::SummaryKind::Conv, 25, rng);
    const Tensor x = testutil::randn({2, 25}, rng);
    CHECK(ad::grad_check([&](const ad::Var& v) { return ad::sum(ad::square(net.forward(v))); }, x) < 1e-4);
  }
}
