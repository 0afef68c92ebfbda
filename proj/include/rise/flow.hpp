#pragma once

#include <span>
#include <string>
#include <vector>

#include "rise/autodiff.hpp"
#include "rise/nn.hpp"
#include "rise/params.hpp"
#include "rise/simulators.hpp"

namespace rise::flow {

enum class FlowKind { Maf, Nsf };

struct MAFConfig {
  std::size_t param_dim = 0;
  std::size_t context_dim = 0;
  std::size_t n_transforms = 5;
  std::size_t hidden = 20;
  std::size_t hidden_layers = 2;
  double log_scale_clamp = 7.0;
  FlowKind kind = FlowKind::Maf;
};

void validate(const MAFConfig& cfg);

/// Maps a completed data matrix (B x d) to statistics (B x out_dim).
/// Identity only standardizes; Conv is two strided 1D convolutions and a
/// linear read-out; Mlp is a two-layer relu net. Input standardization
/// lives in buffers summary.in.mean / summary.in.std.
class SummaryNet {
 public:
  SummaryNet() = default;
  SummaryNet(ParameterStore& store, sim::SummaryKind kind, std::size_t data_dim, Rng& rng,
             std::size_t out_dim = 4, std::size_t channels = 8);

  ad::Var forward(const ad::Var& x) const;
  ad::Var forward(const Tensor& x) const { return forward(ad::constant(x)); }
  sim::SummaryKind kind() const { return kind_; }
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  nn::Standardizer& input_scaler() { return scaler_; }
  const nn::Standardizer& input_scaler() const { return scaler_; }

 private:
  ad::Var conv(const ad::Var& x, std::size_t in_len, std::size_t in_ch, const nn::Dense& layer,
               std::size_t batch, std::size_t& out_len) const;

  sim::SummaryKind kind_ = sim::SummaryKind::Identity;
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::size_t channels_ = 8;
  nn::Standardizer scaler_;
  nn::Dense conv1_, conv2_, readout_;
  nn::Mlp mlp_;
};

/// Conditional masked autoregressive flow over theta given a context row.
/// theta is first standardized with buffers flow.theta.*; each block is a
/// MADE emitting (shift, log-scale) with z = (u - shift) * exp(-log_scale).
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(ParameterStore& store, MAFConfig cfg, Rng& rng);

  const MAFConfig& config() const { return cfg_; }
  nn::Standardizer& theta_scaler() { return theta_scaler_; }
  const nn::Standardizer& theta_scaler() const { return theta_scaler_; }

  /// log q(theta | context), one row per input row (B x 1).
  ad::Var log_prob(const ad::Var& theta, const ad::Var& context) const;
  /// Base-space image of theta (no graph).
  Tensor inverse(const Tensor& theta, const Tensor& context) const;
  /// theta from base draws z (no graph).
  Tensor forward(const Tensor& z, const Tensor& context) const;
  /// One draw per context row.
  Tensor sample(const Tensor& context, Rng& rng) const;
  /// n draws for a single context vector.
  Tensor sample(std::span<const double> context, std::size_t n, Rng& rng) const;

  /// Zeroes each block's output layer so the flow is the identity in
  /// standardized space.
  void zero_init();

 private:
  struct Made {
    std::vector<ad::Var> weights;  // masked layers
    std::vector<ad::Var> biases;
    std::vector<ad::Var> masks;    // constants, same shape as weights
    ad::Var context_weight;        // context -> first hidden layer
    ad::Var perm;                  // buffer of p indices
  };

  /// (shift, log-scale) for block input u.
  std::pair<ad::Var, ad::Var> made_forward(const Made& made, const ad::Var& u, const ad::Var& context) const;
  ad::Var permute(const Made& made, const ad::Var& u) const;
  Tensor unpermute(const Made& made, const Tensor& u) const;
  void check(const ad::Var& theta, const ad::Var& context) const;

  MAFConfig cfg_;
  nn::Standardizer theta_scaler_;
  std::vector<Made> blocks_;
};

/// MADE degree masks for a network with the given hidden widths; entry k is
/// the (in x out) mask of layer k, the last one producing 2p outputs.
std::vector<Tensor> made_masks(std::size_t p, const std::vector<std::size_t>& hidden);

}  // namespace rise::flow
