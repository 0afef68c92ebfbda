#pragma once

#include <optional>
#include <span>
#include <vector>

#include "rise/autodiff.hpp"
#include "rise/missingness.hpp"
#include "rise/nn.hpp"
#include "rise/params.hpp"

namespace rise::np {

/// Latent neural-process imputation model configuration.
///
/// Widths follow the GLM/GLU defaults: per-point encoder [32, 64], a
/// two-layer latent head of width 32, and a width-32 decoder stack emitting
/// (mean, raw sigma) per location.
struct NPConfig {
  std::size_t data_dim = 0;
  std::vector<std::size_t> encoder_widths{32, 64};
  std::vector<std::size_t> latent_widths{32, 32};
  std::size_t latent_dim = 16;
  std::vector<std::size_t> decoder_widths{32, 32, 32};
  std::size_t m = 8;
  miss::Mechanism mechanism = miss::Mechanism::Mcar;
  double sigma_floor = 1e-3;
  // sin/cos pairs appended to each location
  std::size_t location_frequencies = 4;
};

void validate(const NPConfig& cfg);

/// Gaussian over the latent, one row per sample.
struct LatentDist {
  ad::Var mean;   // B x L
  ad::Var sigma;  // B x L
};

/// Per-location Gaussian predictive; in MNAR mode also P(s_i = 0 | x_i).
struct PredictiveDist {
  ad::Var mean;                     // R x 1
  ad::Var sigma;                    // R x 1
  std::optional<ad::Var> mask_prob;  // R x 1
};

/// Encoder, decoder and (MNAR) mask head. Parameters live in the store
/// under np.encoder.*, np.latent.*, np.decoder.*, np.maskhead.*, np.scale.*.
class NPModel {
 public:
  NPModel(ParameterStore& store, NPConfig cfg, Rng& rng);

  const NPConfig& config() const { return cfg_; }
  nn::Standardizer& scaler() { return scaler_; }
  const nn::Standardizer& scaler() const { return scaler_; }
  bool uses_mask() const { return cfg_.mechanism != miss::Mechanism::Mcar; }
  bool has_mask_head() const { return cfg_.mechanism == miss::Mechanism::Mnar; }

  /// Permutation-invariant encoding of each sample's observed context.
  LatentDist encode(std::span<const miss::MaskedSample> batch) const;
  /// Predictive at `locations` for latent rows `z` (R x L, one row per location).
  /// `coords` gives each row's coordinate index for the mask head.
  PredictiveDist decode(const ad::Var& z, std::span<const double> locations,
                        std::span<const std::size_t> coords) const;

  /// MNAR mask-head logit of P(s_i = 0 | x_i) for standardized values x (R x 1).
  ad::Var mask_logit(const ad::Var& x, std::span<const std::size_t> coords) const;

  /// Sets the decoder's final layer to zero (mean 0, sigma softplus(0) + floor).
  void zero_decoder_output();
  /// Pins the decoder output bias; final weights are zeroed.
  void pin_decoder(double mean_std, double raw_sigma);

  double standardize(std::size_t coord, double v) const;
  double unstandardize(std::size_t coord, double v) const;

 private:
  NPConfig cfg_;
  nn::Standardizer scaler_;
  nn::Mlp encoder_;
  nn::Mlp latent_;
  nn::Mlp decoder_;
  ad::Var mask_slope_;      // d x 1
  ad::Var mask_intercept_;  // d x 1
};

/// Monte-Carlo log-likelihood of every sample's missing values, B x 1.
/// `eta` (B*m x L) holds the standard-normal latent noise; row b*m + j is
/// draw j of sample b.
ad::Var log_likelihood(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t m,
                       const Tensor& eta);
ad::Var log_likelihood(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t m, Rng& rng);

/// Scalar log-likelihood for one sample.
ad::Var np_log_likelihood(const miss::MaskedSample& sample, const NPModel& model, std::size_t m, Rng& rng);

/// k completed vectors per sample, row b*k + j of a (B*k) x d matrix.
/// Observed entries are copied verbatim.
Tensor impute_batch(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t k, Rng& rng);
std::vector<std::vector<double>> sample_imputations(const miss::MaskedSample& sample, const NPModel& model,
                                                    std::size_t k, Rng& rng);

/// Mean over samples (with at least one missing value) of the RMSE between
/// the average of k imputations and the true missing values.
double imputation_rmse(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t k, Rng& rng);
/// Same metric for a constant per-coordinate fill (mean or zero imputation).
double fill_imputation_rmse(std::span<const miss::MaskedSample> batch, std::span<const double> fill);

}  // namespace rise::np
