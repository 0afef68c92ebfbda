#include "rise/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <type_traits>
#include <unordered_set>
#include <utility>

#include "rise/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rise::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Graph tensors are allocated and freed every step; keeping them on the heap
// instead of fresh mmap pages avoids a page-fault storm.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

Var make_op(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool needs = std::any_of(parents.begin(), parents.end(),
                                   [](const NodePtr& p) { return p->requires_grad; });
    if (needs) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MapMat as_mat(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

enum class Bcast { Same, Scalar, Row, Col };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  if (b.rank() <= 2 && a.rank() <= 2) {
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
    if (b.cols() == 1 && b.rows() == a.rows() && b.rank() == 2) return Bcast::Col;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

// Calls f with the broadcast kind as a compile-time constant so the inner
// loops carry no per-element switch.
template <class F>
void with_kind(Bcast kind, F&& f) {
  switch (kind) {
    case Bcast::Same: f(std::integral_constant<Bcast, Bcast::Same>{}); break;
    case Bcast::Scalar: f(std::integral_constant<Bcast, Bcast::Scalar>{}); break;
    case Bcast::Row: f(std::integral_constant<Bcast, Bcast::Row>{}); break;
    case Bcast::Col: f(std::integral_constant<Bcast, Bcast::Col>{}); break;
  }
}

template <Bcast K>
inline std::size_t bcast_index(std::size_t r, std::size_t c, std::size_t cols) {
  if constexpr (K == Bcast::Same) return r * cols + c;
  if constexpr (K == Bcast::Scalar) return 0;
  if constexpr (K == Bcast::Row) return c;
  if constexpr (K == Bcast::Col) return r;
}

template <class ValueFn, class GradAFn, class GradBFn>
Var binary(const Var& a, const Var& b, const char* name, ValueFn vf, GradAFn ga, GradBFn gb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast kind = broadcast_kind(av, bv, name);
  const std::size_t cols = av.cols();
  const std::size_t rows = cols ? av.numel() / cols : 0;
  Tensor out(av.shape());
  with_kind(kind, [&](auto k) {
    constexpr Bcast K = decltype(k)::value;
    const double* pa = av.data();
    const double* pb = bv.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = vf(pa[r * cols + c], pb[bcast_index<K>(r, c, cols)]);
  });
  return make_op(std::move(out), {a.node(), b.node()}, [kind, rows, cols, ga, gb](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* g = self.grad.data();
    with_kind(kind, [&](auto k) {
      constexpr Bcast K = decltype(k)::value;
      const double* pa = na.value.data();
      const double* pb = nb.value.data();
      if (na.requires_grad) {
        double* dst = na.ensure_grad().data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dst[i] += g[i] * ga(pa[i], pb[bcast_index<K>(r, c, cols)]);
          }
      }
      if (nb.requires_grad) {
        double* dst = nb.ensure_grad().data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c, j = bcast_index<K>(r, c, cols);
            dst[j] += g[i] * gb(pa[i], pb[j]);
          }
      }
    });
  });
}

template <class ValueFn, class DerivFn>
Var unary(const Var& a, ValueFn vf, DerivFn df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  const std::size_t n = out.numel();
  const double* src = av.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = vf(src[i]);
  return make_op(std::move(out), {a.node()}, [df, n](Node& self) {
    Node& pa = *self.parents[0];
    double* dst = pa.ensure_grad().data();
    const double* g = self.grad.data();
    const double* x = pa.value.data();
    const double* y = self.value.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * df(x[i], y[i]);
  });
}

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (!has_grad()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows() || bv.rank() != 2) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  return make_op(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto g = as_mat(std::as_const(self.grad));
    if (pa.requires_grad) as_mat(pa.ensure_grad()).noalias() += g * as_mat(std::as_const(pb.value)).transpose();
    if (pb.requires_grad) as_mat(pb.ensure_grad()).noalias() += as_mat(std::as_const(pa.value)).transpose() * g;
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_matrix(xv, "affine");
  if (xv.cols() != wv.rows() || wv.rank() != 2 || bv.numel() != wv.cols()) {
    throw ShapeError("affine: shape mismatch " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()) + " + " +
                     shape_str(bv.shape()));
  }
  Tensor out({xv.rows(), wv.cols()});
  auto o = as_mat(out);
  o.noalias() = as_mat(xv) * as_mat(wv);
  o.rowwise() += as_mat(bv).row(0);
  return make_op(std::move(out), {x.node(), w.node(), b.node()}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    const auto g = as_mat(std::as_const(self.grad));
    if (px.requires_grad) as_mat(px.ensure_grad()).noalias() += g * as_mat(std::as_const(pw.value)).transpose();
    if (pw.requires_grad) as_mat(pw.ensure_grad()).noalias() += as_mat(std::as_const(px.value)).transpose() * g;
    if (pb.requires_grad) {
      Tensor& db = pb.ensure_grad();
      MapMat(db.data(), 1, static_cast<Eigen::Index>(db.numel())) += g.colwise().sum();
    }
  });
}

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double v : a.value().vec()) {
    if (v < 0) throw DomainError("log of negative value " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var softplus(const Var& a) {
  return unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().vec()) s += v;
  return make_op(Tensor::scalar(s), {a.node()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Tensor& dst = pa.ensure_grad();
    const double g = self.grad[0];
    for (auto& d : dst.vec()) d += g;
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().numel());
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  const Tensor& av = a.value();
  require_matrix(av, "row_sum");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j];
    out[i] = s;
  }
  return make_op(std::move(out), {a.node()}, [r, c](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += self.grad[i];
  });
}

Var log_mean_exp_rows(const Var& a) {
  const Tensor& av = a.value();
  require_matrix(av, "log_mean_exp_rows");
  const std::size_t r = av.rows(), c = av.cols();
  if (c == 0) throw ShapeError("log_mean_exp_rows: zero columns");
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) out[i] = log_mean_exp(std::span(av.data() + i * c, c));
  return make_op(std::move(out), {a.node()}, [r, c](Node& self) {
    Node& pa = *self.parents[0];
    Tensor& dst = pa.ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double o = self.value[i];
      if (!std::isfinite(o)) continue;
      for (std::size_t j = 0; j < c; ++j) {
        dst[i * c + j] += self.grad[i] * std::exp(pa.value[i * c + j] - o) / static_cast<double>(c);
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
    parents.push_back(p.node());
  }
  Tensor out({r, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + offset);
    offset += widths[k];
  }
  return make_op(std::move(out), std::move(parents), [widths, r, total](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        Tensor& dst = p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) dst[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  require_matrix(av, "slice_cols");
  const std::size_t r = av.rows(), c = av.cols();
  if (start + count > c) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_str(av.shape()));
  }
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.data() + i * c + start, count, out.data() + i * count);
  return make_op(std::move(out), {a.node()}, [r, c, start, count](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) dst[i * c + start + j] += self.grad[i * count + j];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a.node()}, [](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += self.grad[i];
  });
}

Var gather_rows(const Var& a, std::vector<std::size_t> index) {
  const Tensor& av = a.value();
  require_matrix(av, "gather_rows");
  const std::size_t c = av.cols(), r = av.rows();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " + shape_str(av.shape()));
    std::copy_n(av.data() + index[i] * c, c, out.data() + i * c);
  }
  return make_op(std::move(out), {a.node()}, [index = std::move(index), c](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) dst[index[i] * c + j] += self.grad[i * c + j];
  });
}

Var gather(const Var& a, std::vector<std::int64_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw ShapeError("gather: index length does not match output shape " + shape_str(out_shape));
  }
  const Tensor& av = a.value();
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<std::int64_t>(av.numel())) throw ShapeError("gather: index out of range");
    out[i] = index[i] < 0 ? 0.0 : av[static_cast<std::size_t>(index[i])];
  }
  return make_op(std::move(out), {a.node()}, [index = std::move(index)](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) dst[static_cast<std::size_t>(index[i])] += self.grad[i];
  });
}

Var segment_sum(const Var& a, std::vector<std::size_t> segment, std::size_t n_segments) {
  const Tensor& av = a.value();
  require_matrix(av, "segment_sum");
  const std::size_t c = av.cols();
  if (segment.size() != av.rows()) {
    throw ShapeError("segment_sum: " + std::to_string(segment.size()) + " segment ids for " + shape_str(av.shape()));
  }
  Tensor out({n_segments, c});
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] >= n_segments) throw ShapeError("segment_sum: segment id out of range");
    for (std::size_t j = 0; j < c; ++j) out[segment[i] * c + j] += av[i * c + j];
  }
  return make_op(std::move(out), {a.node()}, [segment = std::move(segment), c](Node& self) {
    Tensor& dst = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < segment.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += self.grad[segment[i] * c + j];
  });
}

Var segment_mean(const Var& a, std::vector<std::size_t> segment, std::size_t n_segments) {
  std::vector<double> counts(n_segments, 0.0);
  for (auto s : segment) {
    if (s >= n_segments) throw ShapeError("segment_mean: segment id out of range");
    counts[s] += 1.0;
  }
  Tensor inv({n_segments, 1});
  for (std::size_t s = 0; s < n_segments; ++s) inv[s] = counts[s] > 0 ? 1.0 / counts[s] : 0.0;
  return mul(segment_sum(a, std::move(segment), n_segments), constant(std::move(inv)));
}

Var gaussian_log_pdf(const Var& x, const Var& mu, const Var& sigma) {
  const Tensor& xv = x.value();
  const Tensor& mv = mu.value();
  const Tensor& sv = sigma.value();
  if (xv.shape() != mv.shape() || xv.shape() != sv.shape()) {
    throw ShapeError("gaussian_log_pdf: shapes " + shape_str(xv.shape()) + ", " + shape_str(mv.shape()) +
                     ", " + shape_str(sv.shape()) + " differ");
  }
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!(sv[i] > 0)) throw DomainError("gaussian_log_pdf: non-positive sigma " + std::to_string(sv[i]));
    const double z = (xv[i] - mv[i]) / sv[i];
    out[i] = -kHalfLog2Pi - std::log(sv[i]) - 0.5 * z * z;
  }
  return make_op(std::move(out), {x.node(), mu.node(), sigma.node()}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& pm = *self.parents[1];
    Node& ps = *self.parents[2];
    const std::size_t n = self.grad.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double s = ps.value[i];
      const double diff = px.value[i] - pm.value[i];
      const double g = self.grad[i];
      const double dz = diff / (s * s);
      if (px.requires_grad) px.ensure_grad()[i] += -g * dz;
      if (pm.requires_grad) pm.ensure_grad()[i] += g * dz;
      if (ps.requires_grad) ps.ensure_grad()[i] += g * (-1.0 / s + diff * diff / (s * s * s));
    }
  });
}

void backward(const Var& loss) {
  if (!loss.shape().empty()) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (loss.get()->requires_grad) stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Tensor();
  if (order.empty()) return;
  loss.get()->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

double log_mean_exp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("log_mean_exp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double h) {
  Var p = parameter(x);
  Var y = f(p);
  backward(y);
  Tensor analytic = p.get()->has_grad() ? p.grad() : Tensor(x.shape(), 0.0);

  NoGradGuard guard;
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(constant(probe)).item();
    probe[i] = orig - h;
    const double fm = f(constant(probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace rise::ad
