#include "rise/flow.hpp"

#include <cmath>
#include <numbers>

#include "rise/error.hpp"

namespace rise::flow {

void validate(const MAFConfig& cfg) {
  if (cfg.kind != FlowKind::Maf) throw ConfigError("flow: only MAF is implemented (nsf is reserved)");
  if (cfg.param_dim == 0) throw ConfigError("MAFConfig: param_dim must be positive");
  if (cfg.n_transforms < 1) throw ConfigError("MAFConfig: n_transforms must be >= 1");
  if (cfg.hidden < 1 || cfg.hidden_layers < 1) throw ConfigError("MAFConfig: hidden must be >= 1");
}

// ---------------------------------------------------------------- summary

SummaryNet::SummaryNet(ParameterStore& store, sim::SummaryKind kind, std::size_t data_dim, Rng& rng,
                       std::size_t out_dim, std::size_t channels)
    : kind_(kind), in_dim_(data_dim), channels_(channels) {
  scaler_ = nn::Standardizer(store, "summary.in", data_dim);
  switch (kind) {
    case sim::SummaryKind::Identity:
      out_dim_ = data_dim;
      break;
    case sim::SummaryKind::Conv: {
      out_dim_ = out_dim;
      const std::size_t l1 = (data_dim + 1) / 2, l2 = (l1 + 1) / 2;
      conv1_ = nn::make_dense(store, "summary.conv1", 5, channels, rng);
      conv2_ = nn::make_dense(store, "summary.conv2", 5 * channels, channels, rng);
      readout_ = nn::make_dense(store, "summary.readout", l2 * channels, out_dim, rng);
      break;
    }
    case sim::SummaryKind::Mlp:
      out_dim_ = out_dim;
      mlp_ = nn::Mlp(store, "summary.mlp", {data_dim, 64, 64, out_dim}, nn::Activation::Relu, rng);
      break;
  }
}

// Kernel 5, stride 2, zero padding 2. Rows of x are (batch, position) with
// in_ch columns; the result has rows (batch, out position).
ad::Var SummaryNet::conv(const ad::Var& x, std::size_t in_len, std::size_t in_ch, const nn::Dense& layer,
                         std::size_t batch, std::size_t& out_len) const {
  out_len = (in_len + 1) / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(batch * out_len * 5 * in_ch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      for (std::size_t k = 0; k < 5; ++k) {
        const auto pos = static_cast<std::int64_t>(2 * t + k) - 2;
        for (std::size_t c = 0; c < in_ch; ++c) {
          if (pos < 0 || pos >= static_cast<std::int64_t>(in_len)) {
            idx.push_back(-1);
          } else {
            idx.push_back(static_cast<std::int64_t>((b * in_len + static_cast<std::size_t>(pos)) * in_ch + c));
          }
        }
      }
    }
  }
  ad::Var cols = ad::gather(x, std::move(idx), {batch * out_len, 5 * in_ch});
  return ad::relu(layer.forward(cols));
}

ad::Var SummaryNet::forward(const ad::Var& x) const {
  if (x.cols() != in_dim_) {
    throw ShapeError("summary: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(in_dim_));
  }
  if (!x.value().all_finite()) throw DomainError("summary: input contains holes; impute before summarizing");
  ad::Var h = scaler_.forward(x);
  switch (kind_) {
    case sim::SummaryKind::Identity:
      return h;
    case sim::SummaryKind::Conv: {
      const std::size_t b = x.rows();
      std::size_t l1 = 0, l2 = 0;
      ad::Var c1 = conv(h, in_dim_, 1, conv1_, b, l1);
      ad::Var c2 = conv(c1, l1, channels_, conv2_, b, l2);
      return readout_.forward(ad::reshape(c2, {b, l2 * channels_}));
    }
    case sim::SummaryKind::Mlp:
      return mlp_.forward(h);
  }
  return h;
}

// ---------------------------------------------------------------- MADE

std::vector<Tensor> made_masks(std::size_t p, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> prev(p);
  for (std::size_t i = 0; i < p; ++i) prev[i] = i + 1;
  std::vector<Tensor> masks;
  for (std::size_t width : hidden) {
    std::vector<std::size_t> deg(width);
    for (std::size_t k = 0; k < width; ++k) deg[k] = p > 1 ? (k % (p - 1)) + 1 : 0;
    Tensor m({prev.size(), width}, 0.0);
    for (std::size_t i = 0; i < prev.size(); ++i)
      for (std::size_t k = 0; k < width; ++k) m.at(i, k) = deg[k] >= prev[i] ? 1.0 : 0.0;
    masks.push_back(std::move(m));
    prev = std::move(deg);
  }
  Tensor out({prev.size(), 2 * p}, 0.0);
  for (std::size_t k = 0; k < prev.size(); ++k)
    for (std::size_t j = 0; j < 2 * p; ++j) out.at(k, j) = (j % p) + 1 > prev[k] ? 1.0 : 0.0;
  masks.push_back(std::move(out));
  return masks;
}

FlowModel::FlowModel(ParameterStore& store, MAFConfig cfg, Rng& rng) : cfg_(cfg) {
  validate(cfg_);
  const std::size_t p = cfg_.param_dim;
  theta_scaler_ = nn::Standardizer(store, "flow.theta", p);
  const std::vector<std::size_t> hidden(cfg_.hidden_layers, cfg_.hidden);
  const auto masks = made_masks(p, hidden);
  for (std::size_t b = 0; b < cfg_.n_transforms; ++b) {
    const std::string prefix = "flow.made" + std::to_string(b);
    Made made;
    std::size_t in = p;
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const std::size_t out = masks[k].cols();
      nn::Dense layer = nn::make_dense(store, prefix + ".l" + std::to_string(k), in, out, rng);
      made.weights.push_back(layer.weight);
      made.biases.push_back(layer.bias);
      made.masks.push_back(ad::constant(masks[k]));
      in = out;
    }
    if (cfg_.context_dim > 0) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.context_dim));
      Tensor w({cfg_.context_dim, cfg_.hidden});
      for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
      made.context_weight = store.add(prefix + ".context", std::move(w));
    }
    Tensor perm({1, p});
    for (std::size_t i = 0; i < p; ++i) perm[i] = static_cast<double>(b % 2 == 0 ? i : p - 1 - i);
    made.perm = store.add_buffer("flow.perm" + std::to_string(b), std::move(perm));
    blocks_.push_back(std::move(made));
  }
}

void FlowModel::zero_init() {
  for (auto& made : blocks_) {
    made.weights.back().mutable_value().fill(0.0);
    made.biases.back().mutable_value().fill(0.0);
  }
}

void FlowModel::check(const ad::Var& theta, const ad::Var& context) const {
  if (theta.cols() != cfg_.param_dim) {
    throw ShapeError("flow: theta shape " + shape_str(theta.shape()) + ", expected " +
                     std::to_string(cfg_.param_dim) + " columns");
  }
  if (cfg_.context_dim > 0 && context.cols() != cfg_.context_dim) {
    throw ShapeError("flow: context shape " + shape_str(context.shape()) + ", expected " +
                     std::to_string(cfg_.context_dim) + " columns");
  }
  if (cfg_.context_dim > 0 && context.rows() != theta.rows()) {
    throw ShapeError("flow: theta " + shape_str(theta.shape()) + " and context " + shape_str(context.shape()) +
                     " row counts differ");
  }
}

std::pair<ad::Var, ad::Var> FlowModel::made_forward(const Made& made, const ad::Var& u,
                                                    const ad::Var& context) const {
  const std::size_t p = cfg_.param_dim;
  ad::Var h = u;
  for (std::size_t k = 0; k < made.weights.size(); ++k) {
    ad::Var pre = ad::affine(h, ad::mul(made.weights[k], made.masks[k]), made.biases[k]);
    if (k == 0 && cfg_.context_dim > 0) pre = ad::add(pre, ad::matmul(context, made.context_weight));
    h = k + 1 < made.weights.size() ? ad::tanh(pre) : pre;
  }
  ad::Var shift = ad::slice_cols(h, 0, p);
  ad::Var log_scale = ad::clamp(ad::slice_cols(h, p, p), -cfg_.log_scale_clamp, cfg_.log_scale_clamp);
  return {shift, log_scale};
}

ad::Var FlowModel::permute(const Made& made, const ad::Var& u) const {
  const std::size_t p = cfg_.param_dim, n = u.rows();
  const Tensor& perm = made.perm.value();
  std::vector<std::int64_t> idx(n * p);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < p; ++j) idx[r * p + j] = static_cast<std::int64_t>(r * p) + static_cast<std::int64_t>(perm[j]);
  return ad::gather(u, std::move(idx), {n, p});
}

Tensor FlowModel::unpermute(const Made& made, const Tensor& u) const {
  const std::size_t p = cfg_.param_dim, n = u.rows();
  const Tensor& perm = made.perm.value();
  Tensor out({n, p});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < p; ++j) out.at(r, static_cast<std::size_t>(perm[j])) = u.at(r, j);
  return out;
}

ad::Var FlowModel::log_prob(const ad::Var& theta, const ad::Var& context) const {
  check(theta, context);
  ad::Var u = theta_scaler_.forward(theta);
  ad::Var log_det;
  for (const auto& made : blocks_) {
    u = permute(made, u);
    auto [shift, log_scale] = made_forward(made, u, context);
    u = ad::mul(ad::sub(u, shift), ad::exp(ad::neg(log_scale)));
    ad::Var ld = ad::neg(ad::row_sum(log_scale));
    log_det = log_det ? ad::add(log_det, ld) : ld;
  }
  const double p = static_cast<double>(cfg_.param_dim);
  const double base_const = -0.5 * p * std::log(2.0 * std::numbers::pi) - theta_scaler_.log_scale_sum();
  ad::Var base = ad::add_scalar(ad::scale(ad::row_sum(ad::square(u)), -0.5), base_const);
  return ad::add(base, log_det);
}

Tensor FlowModel::inverse(const Tensor& theta, const Tensor& context) const {
  ad::NoGradGuard guard;
  ad::Var t = ad::constant(theta), c = ad::constant(context);
  check(t, c);
  ad::Var u = theta_scaler_.forward(t);
  for (const auto& made : blocks_) {
    u = permute(made, u);
    auto [shift, log_scale] = made_forward(made, u, c);
    u = ad::mul(ad::sub(u, shift), ad::exp(ad::neg(log_scale)));
  }
  return u.value();
}

Tensor FlowModel::forward(const Tensor& z, const Tensor& context) const {
  ad::NoGradGuard guard;
  const std::size_t p = cfg_.param_dim, n = z.rows();
  ad::Var c = ad::constant(context);
  check(ad::constant(z), c);
  Tensor y = z;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    // Invert z = (u - shift(u)) * exp(-a(u)) one coordinate per pass.
    Tensor u({n, p}, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
      auto [shift, log_scale] = made_forward(*it, ad::constant(u), c);
      for (std::size_t r = 0; r < n; ++r) {
        u.at(r, i) = y.at(r, i) * std::exp(log_scale.value().at(r, i)) + shift.value().at(r, i);
      }
    }
    y = unpermute(*it, u);
  }
  return theta_scaler_.inverse(ad::constant(y)).value();
}

Tensor FlowModel::sample(const Tensor& context, Rng& rng) const {
  const std::size_t n = context.rows();
  Tensor z({n, cfg_.param_dim});
  for (auto& v : z.vec()) v = rng.normal();
  return forward(z, context);
}

Tensor FlowModel::sample(std::span<const double> context, std::size_t n, Rng& rng) const {
  if (n < 1) throw ConfigError("flow sample: n must be >= 1");
  if (context.size() != cfg_.context_dim) throw ShapeError("flow sample: context length mismatch");
  Tensor ctx({n, cfg_.context_dim});
  for (std::size_t r = 0; r < n; ++r) std::copy(context.begin(), context.end(), ctx.data() + r * cfg_.context_dim);
  return sample(ctx, rng);
}

}  // namespace rise::flow
