#include "rise/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "rise/autodiff.hpp"
#include "rise/error.hpp"
#include "rise/nn.hpp"
#include "rise/params.hpp"

namespace rise::metrics {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::size_t kMinC2stWidth = 16;

Eigen::Map<const RowMat> view(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

double mean_kernel(const Tensor& a, const Tensor& b, double gamma) {
  const auto A = view(a);
  const auto B = view(b);
  const Eigen::VectorXd na = A.rowwise().squaredNorm();
  const Eigen::VectorXd nb = B.rowwise().squaredNorm();
  const RowMat cross = A * B.transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < cross.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < cross.cols(); ++j) {
      const double d2 = std::max(na(i) + nb(j) - 2.0 * cross(i, j), 0.0);
      row += std::exp(-gamma * d2);
    }
    total += row;
  }
  return total / (static_cast<double>(cross.rows()) * static_cast<double>(cross.cols()));
}

}  // namespace

double mmd_rbf(const Tensor& x, const Tensor& y, double lengthscale) {
  if (!(lengthscale > 0)) throw DomainError("mmd_rbf: lengthscale must be positive");
  if (x.cols() != y.cols()) {
    throw ShapeError("mmd_rbf: sample sets " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                     " differ in dimension");
  }
  if (x.rows() == 0 || y.rows() == 0) throw ShapeError("mmd_rbf: empty sample set");
  const double gamma = 1.0 / (2.0 * lengthscale * lengthscale);
  if (x == y) return 0.0;
  const double mmd2 = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
  return std::sqrt(std::max(mmd2, 0.0));
}

double median_heuristic(const Tensor& reference) {
  const std::size_t n = reference.rows(), p = reference.cols();
  if (n < 2) throw ConfigError("median_heuristic: need at least two points");
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < p; ++c) {
        const double diff = reference.at(i, c) - reference.at(j, c);
        s += diff * diff;
      }
      dist.push_back(std::sqrt(s));
    }
  const std::size_t m = dist.size();
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(m / 2), dist.end());
  double med = dist[m / 2];
  if (m % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(m / 2));
    med = 0.5 * (med + lower);
  }
  if (!(med > 0)) throw DomainError("median_heuristic: all points identical (zero lengthscale)");
  return med;
}

double c2st(const Tensor& x, const Tensor& y, Rng& rng, const C2stConfig& cfg) {
  const std::size_t n = x.rows(), p = x.cols();
  if (y.rows() != n) throw ShapeError("c2st: sample sets must have equal size");
  if (y.cols() != p) throw ShapeError("c2st: sample sets differ in dimension");
  if (cfg.folds < 2) throw ConfigError("c2st: need at least two folds");
  if (n < cfg.folds) throw ConfigError("c2st: fewer samples than folds");

  // Joint standardization over the pooled set.
  Tensor data({2 * n, p});
  std::copy(x.vec().begin(), x.vec().end(), data.data());
  std::copy(y.vec().begin(), y.vec().end(), data.data() + n * p);
  for (std::size_t c = 0; c < p; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 2 * n; ++r) mu += data.at(r, c);
    mu /= static_cast<double>(2 * n);
    for (std::size_t r = 0; r < 2 * n; ++r) var += (data.at(r, c) - mu) * (data.at(r, c) - mu);
    const double sd = std::max(std::sqrt(var / static_cast<double>(2 * n)), 1e-12);
    for (std::size_t r = 0; r < 2 * n; ++r) data.at(r, c) = (data.at(r, c) - mu) / sd;
  }

  // Stratified folds: shuffle each class, deal positions round-robin.
  std::vector<std::size_t> fold(2 * n);
  for (std::size_t cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), cls * n);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    for (std::size_t i = 0; i < n; ++i) fold[idx[i]] = i % cfg.folds;
  }

  double acc_total = 0.0;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < 2 * n; ++i) (fold[i] == f ? test_idx : train_idx).push_back(i);
    Rng fold_rng = rng.split(f);
    ParameterStore store;
    Rng init = fold_rng.split("init");
    const std::size_t w = std::max<std::size_t>(2 * p, kMinC2stWidth);
    nn::Mlp net(store, "c2st", {p, w, w, 1}, nn::Activation::Relu, init);
    AdamState adam;
    adam.config.lr = cfg.lr;
    Rng order_rng = fold_rng.split("order");
    std::vector<std::size_t> order = train_idx;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t b = std::min(cfg.batch, order.size() - start);
        Tensor xb({b, p}), yb({b, 1});
        for (std::size_t i = 0; i < b; ++i) {
          const std::size_t r = order[start + i];
          std::copy_n(data.data() + r * p, p, xb.data() + i * p);
          yb[i] = r >= n ? 1.0 : 0.0;
        }
        ad::Var logit = net.forward(ad::constant(std::move(xb)));
        // Binary cross-entropy: softplus(l) - y l.
        ad::Var loss = ad::mean(ad::sub(ad::softplus(logit), ad::mul(logit, ad::constant(std::move(yb)))));
        backward(loss, store);
        adam_step(store, adam);
      }
    }
    ad::NoGradGuard guard;
    Tensor xt({test_idx.size(), p});
    for (std::size_t i = 0; i < test_idx.size(); ++i) std::copy_n(data.data() + test_idx[i] * p, p, xt.data() + i * p);
    const Tensor logits = net.forward(ad::constant(std::move(xt))).value();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_idx.size(); ++i) {
      const bool pred = logits[i] > 0.0;
      correct += pred == (test_idx[i] >= n) ? 1 : 0;
    }
    acc_total += static_cast<double>(correct) / static_cast<double>(test_idx.size());
  }
  return acc_total / static_cast<double>(cfg.folds);
}

double hdr_rank(std::span<const double> draw_log_probs, double truth_log_prob) {
  if (draw_log_probs.empty()) throw ConfigError("hdr_rank: no posterior draws");
  std::size_t above = 0;
  for (double v : draw_log_probs) above += v > truth_log_prob ? 1 : 0;
  return static_cast<double>(above) / static_cast<double>(draw_log_probs.size());
}

CoverageCurve coverage_from_ranks(std::span<const double> ranks, std::span<const double> levels) {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] > 0 && levels[i] < 1)) throw ConfigError("coverage levels must lie in (0, 1)");
    if (i > 0 && !(levels[i] > levels[i - 1])) throw ConfigError("coverage levels must be strictly increasing");
  }
  if (ranks.empty()) throw ConfigError("coverage: no calibration ranks");
  CoverageCurve curve;
  curve.levels.assign(levels.begin(), levels.end());
  curve.n_calibration = ranks.size();
  for (double level : levels) {
    std::size_t inside = 0;
    for (double r : ranks) inside += r <= level ? 1 : 0;
    curve.coverage.push_back(static_cast<double>(inside) / static_cast<double>(ranks.size()));
  }
  return curve;
}

CoverageCurve expected_coverage(std::span<const PosteriorOracle> posteriors, const Tensor& theta_star,
                                std::span<const double> levels, std::size_t n_draws, Rng& rng) {
  if (posteriors.size() < 50) throw ConfigError("expected_coverage: need at least 50 calibration pairs");
  if (theta_star.rows() != posteriors.size()) throw ShapeError("expected_coverage: one truth row per posterior");
  std::vector<double> ranks;
  ranks.reserve(posteriors.size());
  const std::size_t p = theta_star.cols();
  for (std::size_t j = 0; j < posteriors.size(); ++j) {
    Rng r = rng.split(j);
    const Tensor draws = posteriors[j].sample(n_draws, r);
    const auto lp = posteriors[j].log_prob(draws);
    const double truth = posteriors[j].log_prob(Tensor::row(std::span(theta_star.data() + j * p, p)))[0];
    ranks.push_back(hdr_rank(lp, truth));
  }
  return coverage_from_ranks(ranks, levels);
}

double r2_score(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw ShapeError("r2_score: length mismatch");
  if (targets.size() < 2) throw ConfigError("r2_score: need at least two targets");
  const double mean = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(targets.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    ss_tot += (targets[i] - mean) * (targets[i] - mean);
  }
  if (ss_tot == 0.0) throw DomainError("r2_score: targets are constant");
  return 1.0 - ss_res / ss_tot;
}

std::vector<double> column_means(const Tensor& samples) {
  const std::size_t n = samples.rows(), p = samples.cols();
  if (n == 0) throw ShapeError("column_means: empty sample set");
  std::vector<double> m(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) m[j] += samples.at(i, j);
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

double mean_abs_error(const Tensor& samples, std::span<const double> truth) {
  const auto m = column_means(samples);
  if (truth.size() != m.size()) throw ShapeError("mean_abs_error: dimension mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < m.size(); ++j) s += std::abs(m[j] - truth[j]);
  return s / static_cast<double>(m.size());
}

void write_samples(const std::filesystem::path& path, const Tensor& samples, const std::vector<std::string>& names) {
  const std::size_t p = samples.cols();
  if (!names.empty() && names.size() != p) throw ShapeError("write_samples: one name per column");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t j = 0; j < p; ++j) {
    if (j) out << ',';
    out << (names.empty() ? "theta" + std::to_string(j) : names[j]);
  }
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      if (j) out << ',';
      out << samples.at(i, j);
    }
    out << '\n';
  }
}

Tensor read_samples(const std::filesystem::path& path, std::vector<std::string>* names) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header line");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  const std::size_t p = header.size();
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ": bad number '" + cell + "' on data row " + std::to_string(rows + 1));
      }
      ++cols;
    }
    if (cols != p) {
      throw ShapeError(path.string() + ": row " + std::to_string(rows + 1) + " has " + std::to_string(cols) +
                       " fields, header has " + std::to_string(p));
    }
    ++rows;
  }
  if (names) *names = header;
  return Tensor({rows, p}, std::move(values));
}

}  // namespace rise::metrics
