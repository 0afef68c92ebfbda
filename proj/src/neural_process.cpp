#include "rise/neural_process.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <functional>

#include "rise/error.hpp"

namespace rise::np {

namespace {

std::size_t loc_dim(const NPConfig& cfg) { return 1 + 2 * cfg.location_frequencies; }

void push_location(const NPConfig& cfg, double c, std::vector<double>& out) {
  out.push_back(c);
  for (std::size_t k = 1; k <= cfg.location_frequencies; ++k) {
    const double a = std::numbers::pi * static_cast<double>(k) * c;
    out.push_back(std::sin(a));
    out.push_back(std::cos(a));
  }
}

std::vector<std::size_t> with_ends(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

void check_batch(const NPModel& model, std::span<const miss::MaskedSample> batch) {
  for (const auto& s : batch) {
    if (s.dim() != model.config().data_dim) {
      throw ShapeError("neural process: sample of dim " + std::to_string(s.dim()) + ", model expects " +
                       std::to_string(model.config().data_dim));
    }
  }
}

}  // namespace

void validate(const NPConfig& cfg) {
  if (cfg.data_dim == 0) throw ConfigError("NPConfig: data_dim must be positive");
  if (cfg.m < 1) throw ConfigError("NPConfig: m must be >= 1");
  if (cfg.latent_dim < 1) throw ConfigError("NPConfig: latent_dim must be >= 1");
  if (!(cfg.sigma_floor > 0)) throw ConfigError("NPConfig: sigma_floor must be positive");
  if (cfg.encoder_widths.empty()) throw ConfigError("NPConfig: encoder needs at least one layer");
}

NPModel::NPModel(ParameterStore& store, NPConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  validate(cfg_);
  const std::size_t d = cfg_.data_dim;
  scaler_ = nn::Standardizer(store, "np.scale", d);
  std::vector<std::size_t> enc{1 + loc_dim(cfg_)};
  enc.insert(enc.end(), cfg_.encoder_widths.begin(), cfg_.encoder_widths.end());
  encoder_ = nn::Mlp(store, "np.encoder", enc, nn::Activation::Relu, rng);
  const std::size_t pooled = cfg_.encoder_widths.back() + (uses_mask() ? d : 0);
  latent_ = nn::Mlp(store, "np.latent", with_ends(pooled, cfg_.latent_widths, 2 * cfg_.latent_dim),
                    nn::Activation::Relu, rng);
  decoder_ = nn::Mlp(store, "np.decoder", with_ends(cfg_.latent_dim + loc_dim(cfg_), cfg_.decoder_widths, 2),
                     nn::Activation::Relu, rng);
  if (has_mask_head()) {
    // Start from a mildly positive slope: larger values more likely missing.
    mask_slope_ = store.add("np.maskhead.slope", Tensor({d, 1}, 0.5));
    mask_intercept_ = store.add("np.maskhead.intercept", Tensor({d, 1}, -1.0));
  }
}

double NPModel::standardize(std::size_t coord, double v) const {
  return (v - scaler_.mean()[coord]) / scaler_.std()[coord];
}

double NPModel::unstandardize(std::size_t coord, double v) const {
  return v * scaler_.std()[coord] + scaler_.mean()[coord];
}

LatentDist NPModel::encode(std::span<const miss::MaskedSample> batch) const {
  check_batch(*this, batch);
  const std::size_t b = batch.size();
  const std::size_t d = cfg_.data_dim;
  std::vector<double> points;
  std::vector<std::size_t> segment;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = batch[i];
    for (std::size_t k = 0; k < s.obs_idx.size(); ++k) {
      points.push_back(standardize(s.obs_idx[k], s.x_obs[k]));
      push_location(cfg_, s.c_obs[k], points);
      segment.push_back(i);
    }
  }
  const std::size_t width = cfg_.encoder_widths.back();
  ad::Var pooled;
  if (segment.empty()) {
    pooled = ad::constant(Tensor({b, width}, 0.0));
  } else {
    const std::size_t n = segment.size();
    ad::Var feats = encoder_.forward(ad::constant(Tensor({n, 1 + loc_dim(cfg_)}, std::move(points))));
    pooled = ad::segment_mean(feats, std::move(segment), b);
  }
  if (uses_mask()) {
    Tensor mask({b, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) mask.at(i, j) = batch[i].mask.s[j] ? 1.0 : 0.0;
    pooled = ad::concat_cols({pooled, ad::constant(std::move(mask))});
  }
  ad::Var head = latent_.forward(pooled);
  const std::size_t l = cfg_.latent_dim;
  ad::Var mean = ad::slice_cols(head, 0, l);
  ad::Var sigma = ad::add_scalar(ad::softplus(ad::slice_cols(head, l, l)), cfg_.sigma_floor);
  return {mean, sigma};
}

PredictiveDist NPModel::decode(const ad::Var& z, std::span<const double> locations,
                               std::span<const std::size_t> coords) const {
  const std::size_t r = locations.size();
  if (z.rows() != r || z.cols() != cfg_.latent_dim) {
    throw ShapeError("decode: latent rows " + shape_str(z.shape()) + " for " + std::to_string(r) + " locations");
  }
  std::vector<double> feats;
  feats.reserve(r * loc_dim(cfg_));
  for (double c : locations) push_location(cfg_, c, feats);
  ad::Var c = ad::constant(Tensor({r, loc_dim(cfg_)}, std::move(feats)));
  ad::Var out = decoder_.forward(ad::concat_cols({z, c}));
  PredictiveDist pred;
  pred.mean = ad::slice_cols(out, 0, 1);
  pred.sigma = ad::add_scalar(ad::softplus(ad::slice_cols(out, 1, 1)), cfg_.sigma_floor);
  if (has_mask_head()) {
    if (coords.size() != r) throw ShapeError("decode: coordinate index count mismatch");
    pred.mask_prob = ad::sigmoid(mask_logit(pred.mean, coords));
  }
  return pred;
}

ad::Var NPModel::mask_logit(const ad::Var& x, std::span<const std::size_t> coords) const {
  if (!has_mask_head()) throw ConfigError("mask_logit: model has no mask head");
  std::vector<std::size_t> idx(coords.begin(), coords.end());
  ad::Var a = ad::gather_rows(mask_slope_, idx);
  ad::Var b = ad::gather_rows(mask_intercept_, std::move(idx));
  return ad::add(ad::mul(a, x), b);
}

void NPModel::zero_decoder_output() { decoder_.zero_last_layer(); }

void NPModel::pin_decoder(double mean_std, double raw_sigma) {
  decoder_.zero_last_layer();
  const double bias[2] = {mean_std, raw_sigma};
  decoder_.set_last_bias(bias);
}

ad::Var log_likelihood(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t m,
                       const Tensor& eta) {
  if (m < 1) throw ConfigError("np log-likelihood: m must be >= 1");
  const auto& cfg = model.config();
  const std::size_t b = batch.size();
  const std::size_t l = cfg.latent_dim;
  if (b == 0) throw ConfigError("np log-likelihood: empty batch");
  if (eta.rows() != b * m || eta.cols() != l) {
    throw ShapeError("np log-likelihood: eta shape " + shape_str(eta.shape()) + ", expected [" +
                     std::to_string(b * m) + ", " + std::to_string(l) + "]");
  }

  // Rows for every (sample, draw, missing location) triple.
  std::vector<std::size_t> z_row, coords, draw_segment;
  std::vector<double> locs, targets;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = batch[i];
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t k = 0; k < s.mis_idx.size(); ++k) {
        z_row.push_back(i * m + j);
        coords.push_back(s.mis_idx[k]);
        locs.push_back(s.c_mis[k]);
        targets.push_back(model.standardize(s.mis_idx[k], s.x_mis[k]));
        draw_segment.push_back(i * m + j);
      }
    }
  }

  ad::Var per_sample;
  if (z_row.empty()) {
    per_sample = ad::constant(Tensor({b, 1}, 0.0));
  } else {
    LatentDist latent = model.encode(batch);
    std::vector<std::size_t> rep(b * m);
    for (std::size_t i = 0; i < b * m; ++i) rep[i] = i / m;
    ad::Var z = ad::add(ad::gather_rows(latent.mean, rep),
                        ad::mul(ad::gather_rows(latent.sigma, rep), ad::constant(eta)));
    const std::size_t r = z_row.size();
    PredictiveDist pred = model.decode(ad::gather_rows(z, std::move(z_row)), locs, coords);
    ad::Var lp = ad::gaussian_log_pdf(ad::constant(Tensor({r, 1}, std::move(targets))), pred.mean, pred.sigma);
    if (pred.mask_prob) {
      // log P(s_i = 0 | reconstructed x_i) for each missing coordinate.
      lp = ad::sub(lp, ad::softplus(ad::neg(model.mask_logit(pred.mean, coords))));
    }
    ad::Var per_draw = ad::reshape(ad::segment_sum(lp, std::move(draw_segment), b * m), {b, m});
    per_sample = ad::log_mean_exp_rows(per_draw);
  }

  if (model.has_mask_head()) {
    // Observed coordinates: log P(s_i = 1 | x_i), constant across draws.
    std::vector<std::size_t> obs_coords, obs_segment;
    std::vector<double> obs_values;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& s = batch[i];
      for (std::size_t k = 0; k < s.obs_idx.size(); ++k) {
        obs_coords.push_back(s.obs_idx[k]);
        obs_values.push_back(model.standardize(s.obs_idx[k], s.x_obs[k]));
        obs_segment.push_back(i);
      }
    }
    if (!obs_coords.empty()) {
      const std::size_t n = obs_coords.size();
      ad::Var x = ad::constant(Tensor({n, 1}, std::move(obs_values)));
      ad::Var logit = model.mask_logit(x, obs_coords);
      ad::Var log_observed = ad::neg(ad::softplus(logit));
      per_sample = ad::add(per_sample, ad::segment_sum(log_observed, std::move(obs_segment), b));
    }
  }
  return per_sample;
}

ad::Var log_likelihood(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t m, Rng& rng) {
  const std::size_t l = model.config().latent_dim;
  Tensor eta({batch.size() * m, l});
  for (auto& v : eta.vec()) v = rng.normal();
  return log_likelihood(model, batch, m, eta);
}

ad::Var np_log_likelihood(const miss::MaskedSample& sample, const NPModel& model, std::size_t m, Rng& rng) {
  return ad::sum(log_likelihood(model, std::span(&sample, 1), m, rng));
}

Tensor impute_batch(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t k, Rng& rng) {
  if (k < 1) throw ConfigError("impute: k must be >= 1");
  check_batch(model, batch);
  const std::size_t b = batch.size();
  const std::size_t d = model.config().data_dim;
  const std::size_t l = model.config().latent_dim;
  Tensor out({b * k, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j) std::copy(batch[i].x.begin(), batch[i].x.end(), out.data() + (i * k + j) * d);

  std::vector<std::size_t> z_row, coords, out_pos;
  std::vector<double> locs;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = batch[i];
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t q = 0; q < s.mis_idx.size(); ++q) {
        z_row.push_back(i * k + j);
        coords.push_back(s.mis_idx[q]);
        locs.push_back(s.c_mis[q]);
        out_pos.push_back((i * k + j) * d + s.mis_idx[q]);
      }
    }
  }
  if (z_row.empty()) return out;

  ad::NoGradGuard no_grad;
  LatentDist latent = model.encode(batch);
  Tensor z({b * k, l});
  for (std::size_t row = 0; row < b * k; ++row) {
    const std::size_t i = row / k;
    for (std::size_t c = 0; c < l; ++c) {
      z.at(row, c) = latent.mean.value().at(i, c) + latent.sigma.value().at(i, c) * rng.normal();
    }
  }
  ad::Var zr = ad::gather_rows(ad::constant(std::move(z)), z_row);
  PredictiveDist pred = model.decode(zr, locs, coords);
  for (std::size_t r = 0; r < z_row.size(); ++r) {
    const double v = pred.mean.value()[r] + pred.sigma.value()[r] * rng.normal();
    out[out_pos[r]] = model.unstandardize(coords[r], v);
  }
  return out;
}

std::vector<std::vector<double>> sample_imputations(const miss::MaskedSample& sample, const NPModel& model,
                                                    std::size_t k, Rng& rng) {
  const Tensor t = impute_batch(model, std::span(&sample, 1), k, rng);
  std::vector<std::vector<double>> out(k);
  for (std::size_t j = 0; j < k; ++j) out[j].assign(t.data() + j * t.cols(), t.data() + (j + 1) * t.cols());
  return out;
}

namespace {

double mean_rmse(std::span<const miss::MaskedSample> batch,
                 const std::function<double(std::size_t sample, std::size_t coord)>& predict) {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    if (s.mis_idx.empty()) continue;
    double se = 0.0;
    for (std::size_t q = 0; q < s.mis_idx.size(); ++q) {
      const double diff = predict(i, s.mis_idx[q]) - s.x_mis[q];
      se += diff * diff;
    }
    total += std::sqrt(se / static_cast<double>(s.mis_idx.size()));
    ++counted;
  }
  if (counted == 0) throw ConfigError("imputation RMSE undefined: no missing coordinates in batch");
  return total / static_cast<double>(counted);
}

}  // namespace

double imputation_rmse(const NPModel& model, std::span<const miss::MaskedSample> batch, std::size_t k, Rng& rng) {
  const Tensor imps = impute_batch(model, batch, k, rng);
  const std::size_t d = model.config().data_dim;
  return mean_rmse(batch, [&](std::size_t i, std::size_t c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += imps[(i * k + j) * d + c];
    return acc / static_cast<double>(k);
  });
}

double fill_imputation_rmse(std::span<const miss::MaskedSample> batch, std::span<const double> fill) {
  return mean_rmse(batch, [&](std::size_t, std::size_t c) { return fill[c]; });
}

}  // namespace rise::np
