#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pretune/common.hpp"
#include "pretune/rng.hpp"

namespace pretune {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily during backward
  bool is_leaf_param = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;  // reads this->grad, adds into parents
  uint64_t seq = 0;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense double-precision tensor with reverse-mode autodiff. Values are
// contiguous row-major. Graphs are built eagerly while grad mode is on and
// freed when the result handle goes out of scope.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool leaf_param = false);
  static Tensor full(Shape shape, double value, bool leaf_param = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool leaf_param = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool leaf_param = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool leaf_param = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }
  int64_t size(int64_t axis) const;

  const std::vector<double>& values() const { return impl_->values; }
  std::vector<double>& mutable_values() { return impl_->values; }
  double item() const;

  bool is_leaf_param() const { return impl_->is_leaf_param; }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Reverse-mode from a scalar result.
  void backward();

  Tensor detach() const;  // deep copy outside the graph

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Grad mode is on by default; evaluation paths disable it with this guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---- unary ----
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double e);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int64_t>& axes, bool keepdim);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<int64_t>& axes, bool keepdim);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int64_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length);

// ---- softmax family (last axis) ----
Tensor softmax_lastdim(const Tensor& a);
Tensor logsumexp_lastdim(const Tensor& a);  // removes the last axis
Tensor softmax_axis(const Tensor& a, int64_t axis);

// ---- linear algebra ----
// 2-D matmul with optional transposes: (M,K)x(K,N) -> (M,N).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// Batched 3-D matmul: (B,M,K)x(B,K,N) -> (B,M,N).
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// ---- spatial ops on (N,C,D,H,W) ----
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad);
Tensor pad3d(const Tensor& x, const std::array<int64_t, 3>& lo, const std::array<int64_t, 3>& hi);
Tensor crop3d(const Tensor& x, const std::array<int64_t, 3>& offset, const std::array<int64_t, 3>& size);
Tensor roll3d(const Tensor& x, const std::array<int64_t, 3>& shift);
Tensor upsample_nearest2x(const Tensor& x);
Tensor avg_pool3d_2x(const Tensor& x);  // kernel 2, stride 2, floor

// Raw GEMM on buffers (used by backward passes and LoRA merging):
// C(M,N) += A(M,K) * B(K,N), row-major.
void gemm_accumulate(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c);

// Finite-difference gradient of f at x (central differences). Test utility,
// but lives here so both C++ and python layers can reach it.
std::vector<double> finite_difference_gradient(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> x, double eps = 1e-5);

}  // namespace pretune
