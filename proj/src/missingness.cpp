#include "rise/missingness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rise/error.hpp"

namespace rise::miss {

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::Mcar: return "mcar";
    case Mechanism::Mar: return "mar";
    case Mechanism::Mnar: return "mnar";
  }
  return "unknown";
}

Mechanism parse_mechanism(const std::string& name) {
  if (name == "mcar") return Mechanism::Mcar;
  if (name == "mar") return Mechanism::Mar;
  if (name == "mnar") return Mechanism::Mnar;
  throw ConfigError("unknown mechanism '" + name + "' (expected mcar|mar|mnar)");
}

void validate(const MissingnessSpec& spec, std::size_t d) {
  if (!(spec.eps >= 0.0 && spec.eps <= 1.0)) throw ConfigError("missingness eps must lie in [0, 1]");
  if (spec.mechanism == Mechanism::Mar && spec.driver >= d) {
    throw ConfigError("MAR driver index " + std::to_string(spec.driver) + " out of range for d=" + std::to_string(d));
  }
}

std::size_t Mask::n_missing() const {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), std::uint8_t{0}));
}

Mask gen_mask_mcar(std::size_t d, double eps, Rng& rng) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ConfigError("gen_mask_mcar: eps must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::lround(eps * static_cast<double>(d)));
  Mask mask{std::vector<std::uint8_t>(d, 1)};
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(d - i);
    std::swap(idx[i], idx[j]);
    mask.s[idx[i]] = 0;
  }
  return mask;
}

std::vector<double> mnar_probabilities(std::span<const double> x, double eps) {
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  std::vector<double> p(x.size(), 0.0);
  if (x.empty() || *hi == *lo) return p;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = eps * (x[i] - *lo) / range;
  return p;
}

Mask gen_mask_mnar(std::span<const double> x, double eps, Rng& rng) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ConfigError("gen_mask_mnar: eps must lie in [0, 1]");
  if (x.empty()) return Mask{};
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (*lo == *hi) return gen_mask_mcar(x.size(), eps / 2.0, rng);
  const auto p = mnar_probabilities(x, eps);
  Mask mask{std::vector<std::uint8_t>(x.size(), 1)};
  for (std::size_t i = 0; i < x.size(); ++i) mask.s[i] = rng.bernoulli(p[i]) ? 0 : 1;
  return mask;
}

Mask gen_mask_mar(std::span<const double> x, const MissingnessSpec& spec, Rng& rng) {
  validate(spec, x.size());
  const double z = spec.slope * (x[spec.driver] - spec.driver_offset);
  const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  const double p = std::clamp(2.0 * spec.eps * sig, 0.0, 1.0);
  Mask mask{std::vector<std::uint8_t>(x.size(), 1)};
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i == spec.driver) continue;
    mask.s[i] = rng.bernoulli(p) ? 0 : 1;
  }
  return mask;
}

Mask generate_mask(const MissingnessSpec& spec, std::span<const double> x, Rng& rng) {
  switch (spec.mechanism) {
    case Mechanism::Mcar: return gen_mask_mcar(x.size(), spec.eps, rng);
    case Mechanism::Mar: return gen_mask_mar(x, spec, rng);
    case Mechanism::Mnar: return gen_mask_mnar(x, spec.eps, rng);
  }
  throw ConfigError("unknown mechanism");
}

MissingnessSpec calibrate_mar(const sim::TaskSpec& task, MissingnessSpec spec, std::size_t n, Rng& rng) {
  validate(spec, task.data_dim);
  const auto batch = sim::simulate_batch(task, n, rng);
  std::vector<double> driver(n);
  for (std::size_t i = 0; i < n; ++i) driver[i] = batch.xs.at(i, spec.driver);
  std::nth_element(driver.begin(), driver.begin() + static_cast<std::ptrdiff_t>(n / 2), driver.end());
  spec.driver_offset = driver[n / 2];
  return spec;
}

double location(std::size_t i, std::size_t d) {
  return d > 1 ? static_cast<double>(i) / static_cast<double>(d - 1) : 0.0;
}

MaskedSample apply_mask(std::span<const double> x, const Mask& mask) {
  if (x.size() != mask.size()) {
    throw ShapeError("apply_mask: data length " + std::to_string(x.size()) + " vs mask length " +
                     std::to_string(mask.size()));
  }
  MaskedSample out;
  out.x.assign(x.begin(), x.end());
  out.mask = mask;
  const std::size_t d = x.size();
  for (std::size_t i = 0; i < d; ++i) {
    if (mask.observed(i)) {
      out.x_obs.push_back(x[i]);
      out.obs_idx.push_back(i);
      out.c_obs.push_back(location(i, d));
    } else {
      out.x_mis.push_back(x[i]);
      out.mis_idx.push_back(i);
      out.c_mis.push_back(location(i, d));
    }
  }
  return out;
}

std::vector<double> scatter(std::span<const double> x_obs, std::span<const double> x_mis, const Mask& mask) {
  const std::size_t n_mis = mask.n_missing();
  if (x_mis.size() != n_mis || x_obs.size() != mask.size() - n_mis) {
    throw ShapeError("scatter: partition sizes do not match the mask");
  }
  std::vector<double> x(mask.size());
  std::size_t io = 0, im = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) x[i] = mask.observed(i) ? x_obs[io++] : x_mis[im++];
  return x;
}

double empirical_missing_fraction(std::span<const Mask> masks) {
  if (masks.empty()) throw ConfigError("empirical_missing_fraction: no masks");
  double total = 0.0;
  for (const auto& m : masks) {
    total += m.size() ? static_cast<double>(m.n_missing()) / static_cast<double>(m.size()) : 0.0;
  }
  return total / static_cast<double>(masks.size());
}

}  // namespace rise::miss
