#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <vector>

#include "csnet/common.hpp"
#include "csnet/rng.hpp"

namespace csnet {

using Array = Eigen::ArrayXd;

namespace detail {

struct Node {
  Shape shape;
  Array data;
  Array grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents. Receives itself so the
  // closure does not have to own a reference cycle.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() == 0) grad = Array::Zero(data.size());
  }
};

bool grad_enabled();

}  // namespace detail

// RAII guard disabling graph construction (inference / benchmarking).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense double-precision tensor with reverse-mode autodiff. Copies share
// storage; the autodiff graph hangs off the shared node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_array(Shape shape, Array values, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int i) const { return impl_->shape[size_t(i)]; }
  int ndim() const { return int(impl_->shape.size()); }
  int64_t numel() const { return impl_->data.size(); }

  Array& data() { return impl_->data; }
  const Array& data() const { return impl_->data; }
  double* ptr() { return impl_->data.data(); }
  const double* ptr() const { return impl_->data.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) {
    impl_->requires_grad = v;
    impl_->is_leaf = true;
  }

  bool has_grad() const { return impl_ && impl_->grad.size() > 0; }
  Array& grad();
  const Array& grad() const;
  void zero_grad() {
    if (impl_ && impl_->grad.size() > 0) impl_->grad.setZero();
  }

  double item() const;
  bool all_finite() const { return impl_->data.isFinite().all(); }

  // Runs reverse-mode accumulation from this scalar. Interior buffers are
  // released as the sweep passes them.
  void backward();

  Tensor detach() const;
  Tensor clone() const;

  std::shared_ptr<detail::Node> node() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.impl_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> impl_;
};

// Creates a non-leaf result node wired to its parents (when grad is enabled
// and some parent requires it).
Tensor make_result(Shape shape, Array data, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn);

struct Conv2dOpts {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

// x: [N,Cin,H,W], w: [Cout,Cin/g,k,k], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOpts& opts);

// Per-channel scale/shift statistics for batch normalization.
// gamma/beta are learnable; running stats are plain buffers.
struct BatchNormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  Array running_mean;
  Array running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormParams make(int channels, double gamma_init = 0.5);
  int channels() const { return int(gamma.numel()); }
  void validate() const;
};

Tensor batch_norm(const Tensor& x, BatchNormParams& params, bool training);

// y = x for x >= 0, slope_c * x otherwise; slope: [C].
Tensor prelu(const Tensor& x, const Tensor& slope);

Tensor avg_pool2(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, int factor);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(const std::vector<Tensor>& ts);
Tensor mul_scalar(const Tensor& a, double s);
Tensor concat_channels(const std::vector<Tensor>& ts);
Tensor sum_all(const Tensor& x);  // scalar

// Mean binary cross-entropy on logits, numerically stable.
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);

}  // namespace csnet
