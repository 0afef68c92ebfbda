#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rise/rng.hpp"
#include "rise/simulators.hpp"

namespace rise::miss {

enum class Mechanism { Mcar, Mar, Mnar };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(const std::string& name);

struct MissingnessSpec {
  Mechanism mechanism = Mechanism::Mcar;
  double eps = 0.0;
  // MAR only: always-observed driver coordinate and logistic slope/offset.
  std::size_t driver = 0;
  double slope = 1.0;
  double driver_offset = 0.0;
};

void validate(const MissingnessSpec& spec, std::size_t d);

/// s_i = 1 when x_i is observed.
struct Mask {
  std::vector<std::uint8_t> s;

  std::size_t size() const { return s.size(); }
  std::size_t n_missing() const;
  bool observed(std::size_t i) const { return s[i] != 0; }
};

/// round(eps * d) coordinates masked, chosen uniformly without replacement.
Mask gen_mask_mcar(std::size_t d, double eps, Rng& rng);
/// Self-censoring: coordinate i missing with probability eps * (x_i - min) / (max - min).
/// A constant vector falls back to MCAR at eps / 2.
Mask gen_mask_mnar(std::span<const double> x, double eps, Rng& rng);
/// Missing-probability per coordinate under the range-normalized MNAR rule.
std::vector<double> mnar_probabilities(std::span<const double> x, double eps);
/// Driver coordinate always observed; others missing with probability
/// clip(2 eps sigmoid(slope (x_driver - offset)), 0, 1).
Mask gen_mask_mar(std::span<const double> x, const MissingnessSpec& spec, Rng& rng);
Mask generate_mask(const MissingnessSpec& spec, std::span<const double> x, Rng& rng);

/// Sets `driver_offset` to the median driver value over `n` prior-predictive
/// simulations, so the average missing fraction tracks eps.
MissingnessSpec calibrate_mar(const sim::TaskSpec& task, MissingnessSpec spec, std::size_t n, Rng& rng);

/// A data vector split by its mask. Locations are c_i = i / (d - 1).
struct MaskedSample {
  std::vector<double> x;  // full vector; ground truth in simulation settings
  Mask mask;
  std::vector<double> x_obs, x_mis;
  std::vector<std::size_t> obs_idx, mis_idx;
  std::vector<double> c_obs, c_mis;

  std::size_t dim() const { return x.size(); }
};

double location(std::size_t i, std::size_t d);
MaskedSample apply_mask(std::span<const double> x, const Mask& mask);
/// Inverse of apply_mask on the (x_obs, x_mis, s) triple.
std::vector<double> scatter(std::span<const double> x_obs, std::span<const double> x_mis, const Mask& mask);
/// Mean of (1 - mean(s)) across masks.
double empirical_missing_fraction(std::span<const Mask> masks);

}  // namespace rise::miss
