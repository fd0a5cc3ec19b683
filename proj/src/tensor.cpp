#include "pretune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <unordered_set>

namespace pretune {

namespace {

thread_local bool g_grad_enabled = true;
thread_local uint64_t g_seq_counter = 0;

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

Impl new_impl(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->seq = ++g_seq_counter;
  return impl;
}

// Wires parents + backward only while grad mode is on, so evaluation paths
// build no graph at all.
Tensor make_node(Impl out, std::vector<Impl> parents, std::function<void(TensorImpl&)> backward) {
  if (g_grad_enabled) {
    out->parents = std::move(parents);
    out->backward_fn = std::move(backward);
  }
  return Tensor::wrap(std::move(out));
}

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Aligns `shape` to `rank` dims (prepending 1s) and returns element strides
// with 0 on broadcast axes.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const size_t rank = out.size();
  const size_t off = rank - shape.size();
  std::vector<int64_t> full(rank, 1);
  for (size_t i = 0; i < shape.size(); ++i) full[off + i] = shape[i];
  auto st = contiguous_strides(Shape(full.begin(), full.end()));
  for (size_t i = 0; i < rank; ++i) {
    if (full[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Odometer walk over `out`, yielding offsets into two broadcast operands.
template <class F>
void for_each_broadcast2(const Shape& out, const std::vector<int64_t>& sa,
                         const std::vector<int64_t>& sb, F&& fn) {
  const int64_t n = shape_numel(out);
  const size_t rank = out.size();
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

void check_same_defined(const Tensor& a, const char* op) {
  if (!a.defined()) throw ShapeError(std::string("undefined tensor passed to ") + op);
}

// ---- generic binary elementwise with broadcasting ----
// fwd(a,b) -> out; dfa/dfb give local partials as functions of (a, b, out).
template <class Ffwd, class Fda, class Fdb>
Tensor binary_op(const Tensor& a, const Tensor& b, Ffwd fwd, Fda dfa, Fdb dfb, const char* /*name*/) {
  check_same_defined(a, "binary op");
  check_same_defined(b, "binary op");
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto out = new_impl(out_shape);
  auto ia = a.impl();
  auto ib = b.impl();
  const auto& av = ia->values;
  const auto& bv = ib->values;
  auto& ov = out->values;

  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast2(out_shape, sa, sb,
                        [&](int64_t i, int64_t offa, int64_t offb) { ov[i] = fwd(av[offa], bv[offb]); });
  }

  return make_node(out, {ia, ib}, [ia, ib, out_shape, fwd, dfa, dfb](TensorImpl& self) {
    ia->ensure_grad();
    ib->ensure_grad();
    const auto& g = self.grad;
    const auto& av2 = ia->values;
    const auto& bv2 = ib->values;
    if (ia->shape == ib->shape) {
      for (size_t i = 0; i < g.size(); ++i) {
        ia->grad[i] += g[i] * dfa(av2[i], bv2[i], self.values[i]);
        ib->grad[i] += g[i] * dfb(av2[i], bv2[i], self.values[i]);
      }
    } else {
      const auto sa = broadcast_strides(ia->shape, out_shape);
      const auto sb = broadcast_strides(ib->shape, out_shape);
      for_each_broadcast2(out_shape, sa, sb, [&](int64_t i, int64_t offa, int64_t offb) {
        ia->grad[offa] += g[i] * dfa(av2[offa], bv2[offb], self.values[i]);
        ib->grad[offb] += g[i] * dfb(av2[offa], bv2[offb], self.values[i]);
      });
    }
  });
}

template <class Ffwd, class Fd>
Tensor unary_op(const Tensor& a, Ffwd fwd, Fd dfa, const char* /*name*/) {
  check_same_defined(a, "unary op");
  auto ia = a.impl();
  auto out = new_impl(ia->shape);
  auto& ov = out->values;
  const auto& av = ia->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
  return make_node(out, {ia}, [ia, dfa](TensorImpl& self) {
    ia->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ia->grad[i] += self.grad[i] * dfa(ia->values[i], self.values[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0);
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

// ---- Tensor basics ----

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool leaf_param) {
  auto impl = new_impl(std::move(shape));
  impl->is_leaf_param = leaf_param;
  return wrap(impl);
}

Tensor Tensor::full(Shape shape, double value, bool leaf_param) {
  auto impl = new_impl(std::move(shape));
  std::fill(impl->values.begin(), impl->values.end(), value);
  impl->is_leaf_param = leaf_param;
  return wrap(impl);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool leaf_param) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_data: " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->seq = ++g_seq_counter;
  impl->is_leaf_param = leaf_param;
  return wrap(impl);
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool leaf_param) {
  auto impl = new_impl(std::move(shape));
  for (auto& v : impl->values) v = rng.normal() * stddev;
  impl->is_leaf_param = leaf_param;
  return wrap(impl);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool leaf_param) {
  auto impl = new_impl(std::move(shape));
  for (auto& v : impl->values) v = rng.uniform(lo, hi);
  impl->is_leaf_param = leaf_param;
  return wrap(impl);
}

int64_t Tensor::size(int64_t axis) const {
  if (axis < 0) axis += dim();
  if (axis < 0 || axis >= dim()) throw ShapeError("size: axis out of range");
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->values[0];
}

const std::vector<double>& Tensor::grad() const {
  const_cast<TensorImpl*>(impl_.get())->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->values.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;
  impl->seq = ++g_seq_counter;
  return wrap(impl);
}

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward: result must be scalar");
  // Post-order DFS over parent edges; reversed order runs every node after
  // all of its consumers.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next].get();
      ++next;
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; }, "div");
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; }, "mul_scalar");
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---- unary ----

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double out) { return out; }, "exp");
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double out) { return 0.5 / (out == 0.0 ? 1e-300 : out); }, "sqrt");
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Tensor pow_scalar(const Tensor& a, double e) {
  return unary_op(
      a, [e](double x) { return std::pow(x, e); },
      [e](double x, double out) { return x == 0.0 ? 0.0 : e * out / x; }, "pow");
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double out) { return out * (1.0 - out); }, "sigmoid");
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double out) { return 1.0 - out * out; },
      "tanh");
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; }, "relu");
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(
      a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; }, "leaky_relu");
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      },
      "gelu");
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s + x * s * (1.0 - s);
      },
      "silu");
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, [](double x) { return stable_softplus(x); },
      [](double x, double) { return stable_sigmoid(x); }, "softplus");
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  check_same_defined(a, "sum");
  auto ia = a.impl();
  auto out = new_impl(Shape{});
  double acc = 0.0;
  for (double v : ia->values) acc += v;
  out->values[0] = acc;
  return make_node(out, {ia}, [ia](TensorImpl& self) {
    ia->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : ia->grad) gv += g;
  });
}

namespace {

std::vector<int64_t> normalize_axes(const std::vector<int64_t>& axes, int64_t rank) {
  std::vector<int64_t> r;
  for (int64_t ax : axes) {
    if (ax < 0) ax += rank;
    if (ax < 0 || ax >= rank) throw ShapeError("reduction axis out of range");
    r.push_back(ax);
  }
  std::sort(r.begin(), r.end());
  r.erase(std::unique(r.begin(), r.end()), r.end());
  return r;
}

}  // namespace

Tensor sum(const Tensor& a, const std::vector<int64_t>& axes, bool keepdim) {
  check_same_defined(a, "sum");
  auto ia = a.impl();
  const int64_t rank = a.dim();
  const auto ax = normalize_axes(axes, rank);
  std::vector<bool> reduced(rank, false);
  for (int64_t d : ax) reduced[d] = true;

  Shape out_shape;
  for (int64_t d = 0; d < rank; ++d) {
    if (!reduced[d]) {
      out_shape.push_back(ia->shape[d]);
    } else if (keepdim) {
      out_shape.push_back(1);
    }
  }
  auto out = new_impl(out_shape);

  // Strides into the output for each input axis (0 on reduced ones).
  std::vector<int64_t> out_stride_for_axis(rank, 0);
  {
    Shape kept(rank, 1);
    for (int64_t d = 0; d < rank; ++d) kept[d] = reduced[d] ? 1 : ia->shape[d];
    auto ks = contiguous_strides(kept);
    for (int64_t d = 0; d < rank; ++d) out_stride_for_axis[d] = reduced[d] ? 0 : ks[d];
  }

  auto map_offsets = [rank, ia, out_stride_for_axis](auto&& fn) {
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t out_off = 0;
    const int64_t n = static_cast<int64_t>(ia->values.size());
    for (int64_t i = 0; i < n; ++i) {
      fn(i, out_off);
      for (int64_t d = rank - 1; d >= 0; --d) {
        ++idx[d];
        out_off += out_stride_for_axis[d];
        if (idx[d] < ia->shape[d]) break;
        out_off -= out_stride_for_axis[d] * ia->shape[d];
        idx[d] = 0;
      }
    }
  };

  auto& ov = out->values;
  map_offsets([&](int64_t i, int64_t out_off) { ov[out_off] += ia->values[i]; });

  return make_node(out, {ia}, [ia, map_offsets](TensorImpl& self) mutable {
    ia->ensure_grad();
    map_offsets([&](int64_t i, int64_t out_off) { ia->grad[i] += self.grad[out_off]; });
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, const std::vector<int64_t>& axes, bool keepdim) {
  const auto ax = normalize_axes(axes, a.dim());
  int64_t count = 1;
  for (int64_t d : ax) count *= a.shape()[d];
  return mul_scalar(sum(a, axes, keepdim), 1.0 / static_cast<double>(count));
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
  check_same_defined(a, "reshape");
  // One -1 axis is inferred.
  int64_t infer = -1, prod = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int64_t>(i);
    } else {
      prod *= shape[i];
    }
  }
  if (infer >= 0) {
    if (prod == 0 || a.numel() % prod != 0) throw ShapeError("reshape: cannot infer axis");
    shape[infer] = a.numel() / prod;
  }
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto ia = a.impl();
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->values = ia->values;
  out->seq = ++g_seq_counter;
  return make_node(out, {ia}, [ia](TensorImpl& self) {
    ia->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int64_t>& perm) {
  check_same_defined(a, "permute");
  const int64_t rank = a.dim();
  if (static_cast<int64_t>(perm.size()) != rank) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (int64_t d = 0; d < rank; ++d) {
    if (perm[d] < 0 || perm[d] >= rank || seen[perm[d]]) throw ShapeError("permute: bad axes");
    seen[perm[d]] = true;
    out_shape[d] = a.shape()[perm[d]];
  }
  auto ia = a.impl();
  auto out = new_impl(out_shape);
  const auto in_strides = contiguous_strides(ia->shape);
  std::vector<int64_t> strides(rank);
  for (int64_t d = 0; d < rank; ++d) strides[d] = in_strides[perm[d]];

  auto walk = [rank, out_shape, strides](auto&& fn) {
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t in_off = 0;
    const int64_t n = shape_numel(out_shape);
    for (int64_t i = 0; i < n; ++i) {
      fn(i, in_off);
      for (int64_t d = rank - 1; d >= 0; --d) {
        ++idx[d];
        in_off += strides[d];
        if (idx[d] < out_shape[d]) break;
        in_off -= strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  };

  auto& ov = out->values;
  walk([&](int64_t i, int64_t in_off) { ov[i] = ia->values[in_off]; });

  return make_node(out, {ia}, [ia, walk](TensorImpl& self) mutable {
    ia->ensure_grad();
    walk([&](int64_t i, int64_t in_off) { ia->grad[in_off] += self.grad[i]; });
  });
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int64_t rank = parts[0].dim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.dim() != rank) throw ShapeError("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[d] != out_shape[d]) throw ShapeError("concat: shape mismatch");
    }
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  auto out = new_impl(out_shape);

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= out_shape[d];

  std::vector<Impl> impls;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    sizes.push_back(p.shape()[axis]);
  }
  auto& ov = out->values;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t written = 0;
    for (size_t pi = 0; pi < impls.size(); ++pi) {
      const int64_t chunk = sizes[pi] * inner;
      std::memcpy(ov.data() + (o * total + written) * inner,
                  impls[pi]->values.data() + o * chunk, sizeof(double) * chunk);
      written += sizes[pi];
    }
  }

  return make_node(out, impls, [impls, sizes, outer, inner, total](TensorImpl& self) {
    for (auto& im : impls) im->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      int64_t written = 0;
      for (size_t pi = 0; pi < impls.size(); ++pi) {
        const int64_t chunk = sizes[pi] * inner;
        const double* src = self.grad.data() + (o * total + written) * inner;
        double* dst = impls[pi]->grad.data() + o * chunk;
        for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        written += sizes[pi];
      }
    }
  });
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length) {
  check_same_defined(a, "slice");
  const int64_t rank = a.dim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
  if (start < 0 || length <= 0 || start + length > a.shape()[axis]) {
    throw ShapeError("slice: range out of bounds");
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  auto ia = a.impl();
  auto out = new_impl(out_shape);

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= a.shape()[d];
  const int64_t in_axis = a.shape()[axis];

  auto& ov = out->values;
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + o * length * inner,
                ia->values.data() + (o * in_axis + start) * inner, sizeof(double) * length * inner);
  }

  return make_node(out, {ia}, [ia, outer, inner, in_axis, start, length](TensorImpl& self) {
    ia->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = self.grad.data() + o * length * inner;
      double* dst = ia->grad.data() + (o * in_axis + start) * inner;
      for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  });
}

// ---- softmax family ----

Tensor softmax_lastdim(const Tensor& a) {
  check_same_defined(a, "softmax");
  if (a.dim() < 1) throw ShapeError("softmax: needs rank >= 1");
  auto ia = a.impl();
  auto out = new_impl(ia->shape);
  const int64_t k = ia->shape.back();
  const int64_t rows = a.numel() / k;
  auto& ov = out->values;
  const auto& av = ia->values;
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * k;
    double* y = ov.data() + r * k;
    double m = x[0];
    for (int64_t i = 1; i < k; ++i) m = std::max(m, x[i]);
    double z = 0;
    for (int64_t i = 0; i < k; ++i) {
      y[i] = std::exp(x[i] - m);
      z += y[i];
    }
    for (int64_t i = 0; i < k; ++i) y[i] /= z;
  }
  return make_node(out, {ia}, [ia, rows, k](TensorImpl& self) {
    ia->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * k;
      const double* g = self.grad.data() + r * k;
      double* dx = ia->grad.data() + r * k;
      double dot = 0;
      for (int64_t i = 0; i < k; ++i) dot += y[i] * g[i];
      for (int64_t i = 0; i < k; ++i) dx[i] += y[i] * (g[i] - dot);
    }
  });
}

Tensor logsumexp_lastdim(const Tensor& a) {
  check_same_defined(a, "logsumexp");
  if (a.dim() < 1) throw ShapeError("logsumexp: needs rank >= 1");
  auto ia = a.impl();
  const int64_t k = ia->shape.back();
  const int64_t rows = a.numel() / k;
  Shape out_shape(ia->shape.begin(), ia->shape.end() - 1);
  auto out = new_impl(out_shape);
  auto& ov = out->values;
  const auto& av = ia->values;
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * k;
    double m = x[0];
    for (int64_t i = 1; i < k; ++i) m = std::max(m, x[i]);
    double z = 0;
    for (int64_t i = 0; i < k; ++i) z += std::exp(x[i] - m);
    ov[r] = m + std::log(z);
  }
  return make_node(out, {ia}, [ia, rows, k](TensorImpl& self) {
    ia->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* x = ia->values.data() + r * k;
      const double lse = self.values[r];
      const double g = self.grad[r];
      double* dx = ia->grad.data() + r * k;
      for (int64_t i = 0; i < k; ++i) dx[i] += g * std::exp(x[i] - lse);
    }
  });
}

Tensor softmax_axis(const Tensor& a, int64_t axis) {
  const int64_t rank = a.dim();
  if (axis < 0) axis += rank;
  if (axis == rank - 1) return softmax_lastdim(a);
  std::vector<int64_t> perm(rank);
  for (int64_t d = 0; d < rank; ++d) perm[d] = d;
  std::swap(perm[axis], perm[rank - 1]);
  return permute(softmax_lastdim(permute(a, perm)), perm);
}

// ---- GEMM kernels ----

void gemm_accumulate(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace {

// C(M,N) += A(M,K) * B(N,K)^T
void gemm_nt(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C(M,N) += A(K,M)^T * B(K,N)
void gemm_tn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c) {
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_single(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
                   const double* b, double* c) {
  if (!ta && !tb) {
    gemm_accumulate(m, n, k, a, b, c);
  } else if (!ta && tb) {
    gemm_nt(m, n, k, a, b, c);
  } else if (ta && !tb) {
    gemm_tn(m, n, k, a, b, c);
  } else {
    throw ShapeError("matmul: double transpose not supported");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_same_defined(a, "matmul");
  check_same_defined(b, "matmul");
  if (a.dim() != 2 || b.dim() != 2) throw ShapeError("matmul: rank-2 tensors required");
  const int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const int64_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const int64_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb) {
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto ia = a.impl();
  auto ib = b.impl();
  auto out = new_impl({m, n});
  matmul_single(trans_a, trans_b, m, n, ka, ia->values.data(), ib->values.data(),
                out->values.data());

  return make_node(out, {ia, ib}, [ia, ib, trans_a, trans_b, m, n, ka](TensorImpl& self) {
    ia->ensure_grad();
    ib->ensure_grad();
    const double* dy = self.grad.data();
    const double* av = ia->values.data();
    const double* bv = ib->values.data();
    // dA
    if (!trans_a && !trans_b) {
      gemm_nt(m, ka, n, dy, bv, ia->grad.data());
    } else if (!trans_a && trans_b) {
      gemm_accumulate(m, ka, n, dy, bv, ia->grad.data());
    } else {  // trans_a && !trans_b
      gemm_nt(ka, m, n, bv, dy, ia->grad.data());
    }
    // dB
    if (!trans_b && !trans_a) {
      gemm_tn(ka, n, m, av, dy, ib->grad.data());
    } else if (!trans_b && trans_a) {
      gemm_accumulate(ka, n, m, av, dy, ib->grad.data());
    } else {  // trans_b && !trans_a
      gemm_tn(n, ka, m, dy, av, ib->grad.data());
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_same_defined(a, "bmm");
  check_same_defined(b, "bmm");
  if (a.dim() != 3 || b.dim() != 3) throw ShapeError("bmm: rank-3 tensors required");
  if (a.shape()[0] != b.shape()[0]) throw ShapeError("bmm: batch mismatch");
  const int64_t batch = a.shape()[0];
  const int64_t m = trans_a ? a.shape()[2] : a.shape()[1];
  const int64_t ka = trans_a ? a.shape()[1] : a.shape()[2];
  const int64_t kb = trans_b ? b.shape()[2] : b.shape()[1];
  const int64_t n = trans_b ? b.shape()[1] : b.shape()[2];
  if (ka != kb) throw ShapeError("bmm: inner dims mismatch");
  auto ia = a.impl();
  auto ib = b.impl();
  auto out = new_impl({batch, m, n});
  const int64_t sa = m * ka, sb = ka * n, so = m * n;
  const int64_t sa_real = a.shape()[1] * a.shape()[2];
  const int64_t sb_real = b.shape()[1] * b.shape()[2];
  for (int64_t bi = 0; bi < batch; ++bi) {
    matmul_single(trans_a, trans_b, m, n, ka, ia->values.data() + bi * sa_real,
                  ib->values.data() + bi * sb_real, out->values.data() + bi * so);
  }
  (void)sa;
  (void)sb;

  return make_node(out, {ia, ib},
                   [ia, ib, trans_a, trans_b, batch, m, n, ka, sa_real, sb_real, so](TensorImpl& self) {
    ia->ensure_grad();
    ib->ensure_grad();
    for (int64_t bi = 0; bi < batch; ++bi) {
      const double* dy = self.grad.data() + bi * so;
      const double* av = ia->values.data() + bi * sa_real;
      const double* bv = ib->values.data() + bi * sb_real;
      double* da = ia->grad.data() + bi * sa_real;
      double* db = ib->grad.data() + bi * sb_real;
      if (!trans_a && !trans_b) {
        gemm_nt(m, ka, n, dy, bv, da);
        gemm_tn(ka, n, m, av, dy, db);
      } else if (!trans_a && trans_b) {
        gemm_accumulate(m, ka, n, dy, bv, da);
        gemm_tn(n, ka, m, dy, av, db);
      } else {  // trans_a && !trans_b
        gemm_nt(ka, m, n, bv, dy, da);
        gemm_accumulate(ka, n, m, av, dy, db);
      }
    }
  });
}

// ---- spatial ops ----

namespace {

struct Conv3dDims {
  int64_t batch, cin, d, h, w;
  int64_t cout, kd, kh, kw;
  int64_t od, oh, ow;
  int64_t stride, pad;
  int64_t cols;   // kernel volume * cin
  int64_t space;  // od*oh*ow
};

Conv3dDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
  if (x.dim() != 5 || w.dim() != 5) throw ShapeError("conv3d: (N,C,D,H,W) and (O,C,kd,kh,kw) required");
  Conv3dDims c{};
  c.batch = x.shape()[0];
  c.cin = x.shape()[1];
  c.d = x.shape()[2];
  c.h = x.shape()[3];
  c.w = x.shape()[4];
  c.cout = w.shape()[0];
  if (w.shape()[1] != c.cin) throw ShapeError("conv3d: channel mismatch");
  c.kd = w.shape()[2];
  c.kh = w.shape()[3];
  c.kw = w.shape()[4];
  c.stride = stride;
  c.pad = pad;
  c.od = (c.d + 2 * pad - c.kd) / stride + 1;
  c.oh = (c.h + 2 * pad - c.kh) / stride + 1;
  c.ow = (c.w + 2 * pad - c.kw) / stride + 1;
  if (c.od <= 0 || c.oh <= 0 || c.ow <= 0) throw ShapeError("conv3d: output would be empty");
  c.cols = c.cin * c.kd * c.kh * c.kw;
  c.space = c.od * c.oh * c.ow;
  return c;
}

// col(cols, space) from one batch item.
void im2col(const Conv3dDims& c, const double* x, double* col) {
  int64_t row = 0;
  for (int64_t ci = 0; ci < c.cin; ++ci) {
    const double* xc = x + ci * c.d * c.h * c.w;
    for (int64_t dz = 0; dz < c.kd; ++dz) {
      for (int64_t dy = 0; dy < c.kh; ++dy) {
        for (int64_t dx = 0; dx < c.kw; ++dx, ++row) {
          double* dst = col + row * c.space;
          int64_t s = 0;
          for (int64_t od = 0; od < c.od; ++od) {
            const int64_t iz = od * c.stride + dz - c.pad;
            const bool z_ok = iz >= 0 && iz < c.d;
            for (int64_t oh = 0; oh < c.oh; ++oh) {
              const int64_t iy = oh * c.stride + dy - c.pad;
              const bool y_ok = iy >= 0 && iy < c.h;
              if (!z_ok || !y_ok) {
                for (int64_t ow = 0; ow < c.ow; ++ow) dst[s++] = 0.0;
                continue;
              }
              const double* src = xc + (iz * c.h + iy) * c.w;
              for (int64_t ow = 0; ow < c.ow; ++ow) {
                const int64_t ix = ow * c.stride + dx - c.pad;
                dst[s++] = (ix >= 0 && ix < c.w) ? src[ix] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-add of col-layout gradients back into the input gradient.
void col2im_add(const Conv3dDims& c, const double* col, double* dx) {
  int64_t row = 0;
  for (int64_t ci = 0; ci < c.cin; ++ci) {
    double* xc = dx + ci * c.d * c.h * c.w;
    for (int64_t dz = 0; dz < c.kd; ++dz) {
      for (int64_t dy = 0; dy < c.kh; ++dy) {
        for (int64_t dx2 = 0; dx2 < c.kw; ++dx2, ++row) {
          const double* src = col + row * c.space;
          int64_t s = 0;
          for (int64_t od = 0; od < c.od; ++od) {
            const int64_t iz = od * c.stride + dz - c.pad;
            const bool z_ok = iz >= 0 && iz < c.d;
            for (int64_t oh = 0; oh < c.oh; ++oh) {
              const int64_t iy = oh * c.stride + dy - c.pad;
              if (!z_ok || iy < 0 || iy >= c.h) {
                s += c.ow;
                continue;
              }
              double* dst = xc + (iz * c.h + iy) * c.w;
              for (int64_t ow = 0; ow < c.ow; ++ow, ++s) {
                const int64_t ix = ow * c.stride + dx2 - c.pad;
                if (ix >= 0 && ix < c.w) dst[ix] += src[s];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad) {
  check_same_defined(x, "conv3d");
  check_same_defined(w, "conv3d");
  const Conv3dDims c = conv_dims(x, w, stride, pad);
  if (b.defined() && (b.dim() != 1 || b.shape()[0] != c.cout)) {
    throw ShapeError("conv3d: bias must be (cout)");
  }
  auto ix = x.impl();
  auto iw = w.impl();
  auto out = new_impl({c.batch, c.cout, c.od, c.oh, c.ow});

  std::vector<double> col(static_cast<size_t>(c.cols * c.space));
  const int64_t in_item = c.cin * c.d * c.h * c.w;
  const int64_t out_item = c.cout * c.space;
  for (int64_t n = 0; n < c.batch; ++n) {
    im2col(c, ix->values.data() + n * in_item, col.data());
    gemm_accumulate(c.cout, c.space, c.cols, iw->values.data(), col.data(),
                    out->values.data() + n * out_item);
  }
  if (b.defined()) {
    auto ibias = b.impl();
    for (int64_t n = 0; n < c.batch; ++n) {
      for (int64_t co = 0; co < c.cout; ++co) {
        double* dst = out->values.data() + n * out_item + co * c.space;
        const double bv = ibias->values[co];
        for (int64_t s = 0; s < c.space; ++s) dst[s] += bv;
      }
    }
  }

  std::vector<Impl> parents{ix, iw};
  Impl ibias = b.defined() ? b.impl() : nullptr;
  if (ibias) parents.push_back(ibias);

  return make_node(out, parents, [ix, iw, ibias, c, in_item, out_item](TensorImpl& self) {
    ix->ensure_grad();
    iw->ensure_grad();
    if (ibias) ibias->ensure_grad();
    std::vector<double> col(static_cast<size_t>(c.cols * c.space));
    std::vector<double> dcol(static_cast<size_t>(c.cols * c.space));
    for (int64_t n = 0; n < c.batch; ++n) {
      const double* dy = self.grad.data() + n * out_item;
      // dW += dY * col^T   (recomputes the forward col buffer)
      im2col(c, ix->values.data() + n * in_item, col.data());
      gemm_nt(c.cout, c.cols, c.space, dy, col.data(), iw->grad.data());
      // dX via col2im(W^T * dY)
      std::fill(dcol.begin(), dcol.end(), 0.0);
      gemm_tn(c.cols, c.space, c.cout, iw->values.data(), dy, dcol.data());
      col2im_add(c, dcol.data(), ix->grad.data() + n * in_item);
      if (ibias) {
        for (int64_t co = 0; co < c.cout; ++co) {
          const double* row = dy + co * c.space;
          double acc = 0;
          for (int64_t s = 0; s < c.space; ++s) acc += row[s];
          ibias->grad[co] += acc;
        }
      }
    }
  });
}

namespace {

void check_rank5(const Tensor& x, const char* op) {
  if (x.dim() != 5) throw ShapeError(std::string(op) + ": (N,C,D,H,W) tensor required");
}

}  // namespace

Tensor pad3d(const Tensor& x, const std::array<int64_t, 3>& lo, const std::array<int64_t, 3>& hi) {
  check_rank5(x, "pad3d");
  auto ix = x.impl();
  const auto& s = ix->shape;
  Shape out_shape{s[0], s[1], s[2] + lo[0] + hi[0], s[3] + lo[1] + hi[1], s[4] + lo[2] + hi[2]};
  auto out = new_impl(out_shape);
  const int64_t nc = s[0] * s[1];
  const int64_t D = s[2], H = s[3], W = s[4];
  const int64_t OD = out_shape[2], OH = out_shape[3], OW = out_shape[4];
  auto& ov = out->values;
  for (int64_t q = 0; q < nc; ++q) {
    for (int64_t z = 0; z < D; ++z) {
      for (int64_t y = 0; y < H; ++y) {
        const double* src = ix->values.data() + ((q * D + z) * H + y) * W;
        double* dst = ov.data() + ((q * OD + z + lo[0]) * OH + y + lo[1]) * OW + lo[2];
        std::memcpy(dst, src, sizeof(double) * W);
      }
    }
  }
  return make_node(out, {ix}, [ix, nc, D, H, W, OD, OH, OW, lo](TensorImpl& self) {
    ix->ensure_grad();
    for (int64_t q = 0; q < nc; ++q) {
      for (int64_t z = 0; z < D; ++z) {
        for (int64_t y = 0; y < H; ++y) {
          const double* src = self.grad.data() + ((q * OD + z + lo[0]) * OH + y + lo[1]) * OW + lo[2];
          double* dst = ix->grad.data() + ((q * D + z) * H + y) * W;
          for (int64_t i = 0; i < W; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

Tensor crop3d(const Tensor& x, const std::array<int64_t, 3>& offset, const std::array<int64_t, 3>& size) {
  check_rank5(x, "crop3d");
  auto ix = x.impl();
  const auto& s = ix->shape;
  for (int i = 0; i < 3; ++i) {
    if (offset[i] < 0 || size[i] <= 0 || offset[i] + size[i] > s[2 + i]) {
      throw ShapeError("crop3d: window out of bounds");
    }
  }
  Shape out_shape{s[0], s[1], size[0], size[1], size[2]};
  auto out = new_impl(out_shape);
  const int64_t nc = s[0] * s[1];
  const int64_t D = s[2], H = s[3], W = s[4];
  auto& ov = out->values;
  for (int64_t q = 0; q < nc; ++q) {
    for (int64_t z = 0; z < size[0]; ++z) {
      for (int64_t y = 0; y < size[1]; ++y) {
        const double* src =
            ix->values.data() + ((q * D + z + offset[0]) * H + y + offset[1]) * W + offset[2];
        double* dst = ov.data() + ((q * size[0] + z) * size[1] + y) * size[2];
        std::memcpy(dst, src, sizeof(double) * size[2]);
      }
    }
  }
  return make_node(out, {ix}, [ix, nc, D, H, W, offset, size](TensorImpl& self) {
    ix->ensure_grad();
    for (int64_t q = 0; q < nc; ++q) {
      for (int64_t z = 0; z < size[0]; ++z) {
        for (int64_t y = 0; y < size[1]; ++y) {
          const double* src = self.grad.data() + ((q * size[0] + z) * size[1] + y) * size[2];
          double* dst =
              ix->grad.data() + ((q * D + z + offset[0]) * H + y + offset[1]) * W + offset[2];
          for (int64_t i = 0; i < size[2]; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

Tensor roll3d(const Tensor& x, const std::array<int64_t, 3>& shift) {
  check_rank5(x, "roll3d");
  auto ix = x.impl();
  const auto& s = ix->shape;
  const int64_t nc = s[0] * s[1];
  const int64_t D = s[2], H = s[3], W = s[4];
  auto mod = [](int64_t v, int64_t n) { return ((v % n) + n) % n; };
  const int64_t sd = mod(shift[0], D), sh = mod(shift[1], H), sw = mod(shift[2], W);
  auto out = new_impl(s);
  auto& ov = out->values;
  for (int64_t q = 0; q < nc; ++q) {
    for (int64_t z = 0; z < D; ++z) {
      const int64_t oz = (z + sd) % D;
      for (int64_t y = 0; y < H; ++y) {
        const int64_t oy = (y + sh) % H;
        const double* src = ix->values.data() + ((q * D + z) * H + y) * W;
        double* dst = ov.data() + ((q * D + oz) * H + oy) * W;
        for (int64_t xw = 0; xw < W; ++xw) dst[(xw + sw) % W] = src[xw];
      }
    }
  }
  return make_node(out, {ix}, [ix, nc, D, H, W, sd, sh, sw](TensorImpl& self) {
    ix->ensure_grad();
    for (int64_t q = 0; q < nc; ++q) {
      for (int64_t z = 0; z < D; ++z) {
        const int64_t oz = (z + sd) % D;
        for (int64_t y = 0; y < H; ++y) {
          const int64_t oy = (y + sh) % H;
          const double* src = self.grad.data() + ((q * D + oz) * H + oy) * W;
          double* dst = ix->grad.data() + ((q * D + z) * H + y) * W;
          for (int64_t xw = 0; xw < W; ++xw) dst[xw] += src[(xw + sw) % W];
        }
      }
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  check_rank5(x, "upsample_nearest2x");
  auto ix = x.impl();
  const auto& s = ix->shape;
  const int64_t nc = s[0] * s[1], D = s[2], H = s[3], W = s[4];
  Shape out_shape{s[0], s[1], 2 * D, 2 * H, 2 * W};
  auto out = new_impl(out_shape);
  auto& ov = out->values;
  for (int64_t q = 0; q < nc; ++q) {
    for (int64_t z = 0; z < 2 * D; ++z) {
      for (int64_t y = 0; y < 2 * H; ++y) {
        const double* src = ix->values.data() + ((q * D + z / 2) * H + y / 2) * W;
        double* dst = ov.data() + ((q * 2 * D + z) * 2 * H + y) * 2 * W;
        for (int64_t xw = 0; xw < 2 * W; ++xw) dst[xw] = src[xw / 2];
      }
    }
  }
  return make_node(out, {ix}, [ix, nc, D, H, W](TensorImpl& self) {
    ix->ensure_grad();
    for (int64_t q = 0; q < nc; ++q) {
      for (int64_t z = 0; z < 2 * D; ++z) {
        for (int64_t y = 0; y < 2 * H; ++y) {
          const double* src = self.grad.data() + ((q * 2 * D + z) * 2 * H + y) * 2 * W;
          double* dst = ix->grad.data() + ((q * D + z / 2) * H + y / 2) * W;
          for (int64_t xw = 0; xw < 2 * W; ++xw) dst[xw / 2] += src[xw];
        }
      }
    }
  });
}

Tensor avg_pool3d_2x(const Tensor& x) {
  check_rank5(x, "avg_pool3d_2x");
  auto ix = x.impl();
  const auto& s = ix->shape;
  const int64_t nc = s[0] * s[1], D = s[2], H = s[3], W = s[4];
  const int64_t OD = D / 2, OH = H / 2, OW = W / 2;
  if (OD == 0 || OH == 0 || OW == 0) throw ShapeError("avg_pool3d_2x: input too small");
  auto out = new_impl({s[0], s[1], OD, OH, OW});
  auto& ov = out->values;
  for (int64_t q = 0; q < nc; ++q) {
    const double* xq = ix->values.data() + q * D * H * W;
    double* oq = ov.data() + q * OD * OH * OW;
    for (int64_t z = 0; z < OD; ++z) {
      for (int64_t y = 0; y < OH; ++y) {
        for (int64_t xw = 0; xw < OW; ++xw) {
          double acc = 0;
          for (int64_t dz = 0; dz < 2; ++dz)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx)
                acc += xq[((2 * z + dz) * H + 2 * y + dy) * W + 2 * xw + dx];
          oq[(z * OH + y) * OW + xw] = acc * 0.125;
        }
      }
    }
  }
  return make_node(out, {ix}, [ix, nc, D, H, W, OD, OH, OW](TensorImpl& self) {
    ix->ensure_grad();
    for (int64_t q = 0; q < nc; ++q) {
      const double* gq = self.grad.data() + q * OD * OH * OW;
      double* dq = ix->grad.data() + q * D * H * W;
      for (int64_t z = 0; z < OD; ++z) {
        for (int64_t y = 0; y < OH; ++y) {
          for (int64_t xw = 0; xw < OW; ++xw) {
            const double g = gq[(z * OH + y) * OW + xw] * 0.125;
            for (int64_t dz = 0; dz < 2; ++dz)
              for (int64_t dy = 0; dy < 2; ++dy)
                for (int64_t dx = 0; dx < 2; ++dx)
                  dq[((2 * z + dz) * H + 2 * y + dy) * W + 2 * xw + dx] += g;
          }
        }
      }
    }
  });
}

std::vector<double> finite_difference_gradient(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace pretune
