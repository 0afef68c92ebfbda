#pragma once

#include <string>
#include <vector>

#include "rise/autodiff.hpp"
#include "rise/params.hpp"
#include "rise/rng.hpp"

namespace rise::nn {

enum class Activation { Relu, Tanh, None };

/// Fully connected layer y = x W + b with W stored as (in x out).
struct Dense {
  ad::Var weight;
  ad::Var bias;

  ad::Var forward(const ad::Var& x) const;
};

Dense make_dense(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);

/// Stack of Dense layers; `widths` lists input, hidden and output sizes.
/// The activation is applied after every layer but the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& prefix, const std::vector<std::size_t>& widths,
      Activation activation, Rng& rng);

  ad::Var forward(const ad::Var& x) const;
  std::size_t in_dim() const { return widths_.front(); }
  std::size_t out_dim() const { return widths_.back(); }
  bool empty() const { return layers_.empty(); }
  /// Sets the final layer's weight and bias to zero.
  void zero_last_layer();
  void set_last_bias(std::span<const double> values);

 private:
  std::vector<Dense> layers_;
  std::vector<std::size_t> widths_;
  Activation activation_ = Activation::Relu;
};

ad::Var activate(const ad::Var& x, Activation activation);

/// Per-column affine standardizer (x - mean) / std held as buffers.
class Standardizer {
 public:
  Standardizer() = default;
  Standardizer(ParameterStore& store, const std::string& prefix, std::size_t dim);

  /// Fits mean/std column-wise over rows of `data`; std floored at 1e-8.
  void fit(const Tensor& data);
  void set(std::span<const double> mean, std::span<const double> std);

  ad::Var forward(const ad::Var& x) const;
  ad::Var inverse(const ad::Var& z) const;
  const Tensor& mean() const { return mean_.value(); }
  const Tensor& std() const { return std_.value(); }
  /// Sum of log std, the log-Jacobian of the inverse map.
  double log_scale_sum() const;
  std::size_t dim() const { return mean_.value().numel(); }

 private:
  ad::Var mean_;
  ad::Var std_;
};

}  // namespace rise::nn
