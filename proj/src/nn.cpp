#include "rise/nn.hpp"

#include <algorithm>
#include <cmath>

#include "rise/error.hpp"

namespace rise::nn {

ad::Var Dense::forward(const ad::Var& x) const { return ad::affine(x, weight, bias); }

Dense make_dense(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  // Uniform(-1/sqrt(in), 1/sqrt(in)), the usual fan-in default.
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
  Tensor w({in, out});
  for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
  Tensor b({1, out});
  for (auto& v : b.vec()) v = rng.uniform(-bound, bound);
  return Dense{store.add(prefix + ".weight", std::move(w)), store.add(prefix + ".bias", std::move(b))};
}

ad::Var activate(const ad::Var& x, Activation activation) {
  switch (activation) {
    case Activation::Relu: return ad::relu(x);
    case Activation::Tanh: return ad::tanh(x);
    case Activation::None: return x;
  }
  return x;
}

Mlp::Mlp(ParameterStore& store, const std::string& prefix, const std::vector<std::size_t>& widths,
         Activation activation, Rng& rng)
    : widths_(widths), activation_(activation) {
  if (widths.size() < 2) throw ConfigError("Mlp " + prefix + ": need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers_.push_back(make_dense(store, prefix + ".l" + std::to_string(i), widths[i], widths[i + 1], rng));
  }
}

ad::Var Mlp::forward(const ad::Var& x) const {
  if (x.cols() != in_dim()) {
    throw ShapeError("Mlp: input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(in_dim()));
  }
  ad::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) h = activate(h, activation_);
  }
  return h;
}

void Mlp::zero_last_layer() {
  if (layers_.empty()) return;
  layers_.back().weight.mutable_value().fill(0.0);
  layers_.back().bias.mutable_value().fill(0.0);
}

void Mlp::set_last_bias(std::span<const double> values) {
  if (layers_.empty() || values.size() != out_dim()) throw ShapeError("Mlp::set_last_bias: size mismatch");
  std::copy(values.begin(), values.end(), layers_.back().bias.mutable_value().data());
}

Standardizer::Standardizer(ParameterStore& store, const std::string& prefix, std::size_t dim)
    : mean_(store.add_buffer(prefix + ".mean", Tensor({1, dim}, 0.0))),
      std_(store.add_buffer(prefix + ".std", Tensor({1, dim}, 1.0))) {}

void Standardizer::fit(const Tensor& data) {
  const std::size_t n = data.rows(), d = data.cols();
  if (d != dim()) throw ShapeError("Standardizer::fit: got " + std::to_string(d) + " columns, expected " + std::to_string(dim()));
  if (n < 2) throw ConfigError("Standardizer::fit: need at least two rows");
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += data.at(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = data.at(i, j) - mean[j];
      sd[j] += c * c;
    }
  for (auto& s : sd) s = std::max(std::sqrt(s / static_cast<double>(n - 1)), 1e-8);
  set(mean, sd);
}

void Standardizer::set(std::span<const double> mean, std::span<const double> std) {
  if (mean.size() != dim() || std.size() != dim()) throw ShapeError("Standardizer::set: dimension mismatch");
  std::copy(mean.begin(), mean.end(), mean_.mutable_value().data());
  std::copy(std.begin(), std.end(), std_.mutable_value().data());
}

ad::Var Standardizer::forward(const ad::Var& x) const {
  Tensor inv = std_.value();
  for (auto& v : inv.vec()) v = 1.0 / v;
  return ad::mul(ad::sub(x, mean_), ad::constant(std::move(inv)));
}

ad::Var Standardizer::inverse(const ad::Var& z) const { return ad::add(ad::mul(z, std_), mean_); }

double Standardizer::log_scale_sum() const {
  double s = 0.0;
  for (double v : std_.value().vec()) s += std::log(v);
  return s;
}

}  // namespace rise::nn
