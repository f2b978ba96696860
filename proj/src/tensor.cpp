#include "csnet/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace csnet {

namespace {

thread_local bool g_grad_enabled = true;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

int64_t conv_out_dim(int64_t in, int k, int stride, int pad, int dil) {
  return (in + 2 * pad - int64_t(dil) * (k - 1) - 1) / stride + 1;
}

}  // namespace

OpCount& op_count() {
  static OpCount c;
  return c;
}

namespace detail {
bool grad_enabled() { return g_grad_enabled; }
}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_array(std::move(shape), Array(), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  Tensor t = from_array(std::move(shape), Array::Constant(n, value), requires_grad);
  return t;
}

Tensor Tensor::from_array(Shape shape, Array values, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  int64_t n = shape_numel(shape);
  if (values.size() == 0) values = Array::Zero(n);
  check_config(values.size() == n, "tensor data length " + std::to_string(values.size()) +
                                       " does not match shape " + shape_str(shape));
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  return wrap(std::move(node));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  int64_t n = shape_numel(shape);
  Array a(n);
  for (int64_t i = 0; i < n; ++i) a[i] = rng.normal(0.0, stddev);
  return from_array(std::move(shape), std::move(a), requires_grad);
}

Array& Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

const Array& Tensor::grad() const {
  impl_->ensure_grad();
  return impl_->grad;
}

double Tensor::item() const {
  check_config(numel() == 1, "item() requires a scalar tensor");
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = impl_->shape;
  node->data = impl_->data;
  node->requires_grad = false;
  return wrap(std::move(node));
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = impl_->shape;
  node->data = impl_->data;
  node->requires_grad = impl_->requires_grad;
  return wrap(std::move(node));
}

void Tensor::backward() {
  check_config(numel() == 1, "backward() requires a scalar loss");
  if (!impl_->requires_grad) return;

  // Topological order over grad-requiring ancestors, consumers first.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    std::shared_ptr<detail::Node> node;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      auto& p = f.node->parents[f.next_parent++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward_fn) {
      n.ensure_grad();
      n.backward_fn(n);
    }
    if (!n.is_leaf) {
      n.grad.resize(0);
      n.backward_fn = nullptr;
      n.parents.clear();
      // Interior activations no longer referenced anywhere can go now.
      if (it->use_count() == 1) n.data.resize(0);
    }
  }
}

Tensor make_result(Shape shape, Array data, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) needs = true;
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (auto& p : parents)
      if (p.defined()) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  int64_t N, Cin, H, W, Cout, Ho, Wo;
  int k, stride, pad, dil, groups;
  int64_t cpg, copg;  // channels per group, in/out
};

ConvDims conv_check(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOpts& o) {
  check_config(x.ndim() == 4, "conv2d input must be [N,C,H,W], got " + shape_str(x.shape()));
  check_config(w.ndim() == 4, "conv2d weight must be [Cout,Cin/g,k,k]");
  check_config(o.stride >= 1 && o.dilation >= 1, "conv2d stride and dilation must be >= 1");
  check_config(o.padding >= 0, "conv2d padding must be >= 0");
  ConvDims d;
  d.N = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.k = int(w.dim(2));
  d.stride = o.stride;
  d.pad = o.padding;
  d.dil = o.dilation;
  d.groups = o.groups;
  check_config(d.k >= 1 && w.dim(3) == d.k, "conv2d kernel must be square, k >= 1");
  check_config(d.groups >= 1 && d.Cin % d.groups == 0 && d.Cout % d.groups == 0,
               "conv2d channels must divide groups: Cin=" + std::to_string(d.Cin) + " Cout=" +
                   std::to_string(d.Cout) + " g=" + std::to_string(d.groups));
  d.cpg = d.Cin / d.groups;
  d.copg = d.Cout / d.groups;
  check_config(w.dim(1) == d.cpg, "conv2d weight in-channels mismatch: expected " +
                                      std::to_string(d.cpg) + ", got " + std::to_string(w.dim(1)));
  if (bias.defined()) check_config(bias.numel() == d.Cout, "conv2d bias length mismatch");
  d.Ho = conv_out_dim(d.H, d.k, d.stride, d.pad, d.dil);
  d.Wo = conv_out_dim(d.W, d.k, d.stride, d.pad, d.dil);
  check_config(d.Ho >= 1 && d.Wo >= 1, "conv2d output would be empty for input " +
                                           shape_str(x.shape()));
  return d;
}

// Gathers one (sample, group) into columns: [cpg*k*k, Ho*Wo].
void im2col(const double* x, const ConvDims& d, int64_t n, int g, double* col) {
  const int64_t HW = d.H * d.W;
  const int64_t out_hw = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.cpg; ++c) {
    const double* xc = x + ((n * d.Cin + g * d.cpg + c) * HW);
    for (int kh = 0; kh < d.k; ++kh) {
      for (int kw = 0; kw < d.k; ++kw) {
        double* row = col + ((c * d.k + kh) * d.k + kw) * out_hw;
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          int64_t ih = oh * d.stride - d.pad + int64_t(kh) * d.dil;
          double* r = row + oh * d.Wo;
          if (ih < 0 || ih >= d.H) {
            std::fill(r, r + d.Wo, 0.0);
            continue;
          }
          const double* xr = xc + ih * d.W;
          if (d.stride == 1) {
            int64_t iw0 = -d.pad + int64_t(kw) * d.dil;
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min<int64_t>(d.Wo, d.W - iw0);
            if (lo > 0) std::fill(r, r + std::min(lo, d.Wo), 0.0);
            if (hi < d.Wo) std::fill(r + std::max<int64_t>(hi, 0), r + d.Wo, 0.0);
            for (int64_t ow = lo; ow < hi; ++ow) r[ow] = xr[iw0 + ow];
          } else {
            for (int64_t ow = 0; ow < d.Wo; ++ow) {
              int64_t iw = ow * d.stride - d.pad + int64_t(kw) * d.dil;
              r[ow] = (iw >= 0 && iw < d.W) ? xr[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Scatters column-gradients back into dx for one (sample, group).
void col2im_add(const double* col, const ConvDims& d, int64_t n, int g, double* dx) {
  const int64_t HW = d.H * d.W;
  const int64_t out_hw = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.cpg; ++c) {
    double* xc = dx + ((n * d.Cin + g * d.cpg + c) * HW);
    for (int kh = 0; kh < d.k; ++kh) {
      for (int kw = 0; kw < d.k; ++kw) {
        const double* row = col + ((c * d.k + kh) * d.k + kw) * out_hw;
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          int64_t ih = oh * d.stride - d.pad + int64_t(kh) * d.dil;
          if (ih < 0 || ih >= d.H) continue;
          const double* r = row + oh * d.Wo;
          double* xr = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.Wo; ++ow) {
            int64_t iw = ow * d.stride - d.pad + int64_t(kw) * d.dil;
            if (iw >= 0 && iw < d.W) xr[iw] += r[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvDims& d) {
  return d.k == 1 && d.stride == 1 && d.pad == 0 && d.dil == 1;
}

bool is_depthwise_s1(const ConvDims& d) {
  return d.groups == d.Cin && d.Cout == d.Cin && d.stride == 1;
}

thread_local std::vector<double> g_col_scratch;

double* col_scratch(int64_t n) {
  if (int64_t(g_col_scratch.size()) < n) g_col_scratch.resize(size_t(n));
  return g_col_scratch.data();
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOpts& opts) {
  ConvDims d = conv_check(x, w, bias, opts);
  const int64_t out_hw = d.Ho * d.Wo;
  const int64_t HW = d.H * d.W;
  Array out = Array::Zero(d.N * d.Cout * out_hw);
  const double* xp = x.ptr();
  const double* wp = w.ptr();

  if (is_pointwise(d)) {
    for (int64_t n = 0; n < d.N; ++n) {
      for (int g = 0; g < d.groups; ++g) {
        MapCM W(wp + g * d.copg * d.cpg, d.copg, d.cpg);
        MapCM X(xp + (n * d.Cin + g * d.cpg) * HW, d.cpg, HW);
        MapM O(out.data() + (n * d.Cout + g * d.copg) * out_hw, d.copg, out_hw);
        O.noalias() = W * X;
      }
    }
  } else if (is_depthwise_s1(d)) {
    for (int64_t n = 0; n < d.N; ++n) {
      for (int64_t c = 0; c < d.Cin; ++c) {
        const double* xc = xp + (n * d.Cin + c) * HW;
        double* oc = out.data() + (n * d.Cout + c) * out_hw;
        for (int kh = 0; kh < d.k; ++kh) {
          for (int kw = 0; kw < d.k; ++kw) {
            double wv = wp[(c * d.k + kh) * d.k + kw];
            int64_t iw0 = -d.pad + int64_t(kw) * d.dil;
            int64_t lo = std::max<int64_t>(0, -iw0);
            int64_t hi = std::min<int64_t>(d.Wo, d.W - iw0);
            if (lo >= hi) continue;
            for (int64_t oh = 0; oh < d.Ho; ++oh) {
              int64_t ih = oh - d.pad + int64_t(kh) * d.dil;
              if (ih < 0 || ih >= d.H) continue;
              const double* xr = xc + ih * d.W + iw0;
              double* orow = oc + oh * d.Wo;
              for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xr[ow];
            }
          }
        }
      }
    }
  } else {
    const int64_t col_rows = d.cpg * d.k * d.k;
    double* col = col_scratch(col_rows * out_hw);
    for (int64_t n = 0; n < d.N; ++n) {
      for (int g = 0; g < d.groups; ++g) {
        im2col(xp, d, n, g, col);
        MapCM W(wp + g * d.copg * col_rows, d.copg, col_rows);
        MapCM C(col, col_rows, out_hw);
        MapM O(out.data() + (n * d.Cout + g * d.copg) * out_hw, d.copg, out_hw);
        O.noalias() = W * C;
      }
    }
  }

  if (bias.defined()) {
    const double* bp = bias.ptr();
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t c = 0; c < d.Cout; ++c) {
        double* oc = out.data() + (n * d.Cout + c) * out_hw;
        double bv = bp[c];
        for (int64_t i = 0; i < out_hw; ++i) oc[i] += bv;
      }
  }

  if (op_count().enabled)
    op_count().macs += d.N * d.Cout * out_hw * d.cpg * d.k * d.k;

  if (!out.isFinite().all())
    throw numeric_error("conv2d produced non-finite values");

  Shape out_shape{d.N, d.Cout, d.Ho, d.Wo};
  return make_result(
      std::move(out_shape), std::move(out), {x, w, bias},
      [d, x, w, bias, HW, out_hw](detail::Node& self) {
        const double* gp = self.grad.data();
        const double* xp = x.ptr();
        const double* wp = w.ptr();
        const bool need_dx = x.requires_grad();
        const bool need_dw = w.requires_grad();
        double* dxp = nullptr;
        double* dwp = nullptr;
        if (need_dx) {
          x.node()->ensure_grad();
          dxp = x.node()->grad.data();
        }
        if (need_dw) {
          w.node()->ensure_grad();
          dwp = w.node()->grad.data();
        }
        if (is_pointwise(d)) {
          for (int64_t n = 0; n < d.N; ++n) {
            for (int g = 0; g < d.groups; ++g) {
              MapCM G(gp + (n * d.Cout + g * d.copg) * out_hw, d.copg, out_hw);
              if (need_dw) {
                MapCM X(xp + (n * d.Cin + g * d.cpg) * HW, d.cpg, HW);
                MapM DW(dwp + g * d.copg * d.cpg, d.copg, d.cpg);
                DW.noalias() += G * X.transpose();
              }
              if (need_dx) {
                MapCM W(wp + g * d.copg * d.cpg, d.copg, d.cpg);
                MapM DX(dxp + (n * d.Cin + g * d.cpg) * HW, d.cpg, HW);
                DX.noalias() += W.transpose() * G;
              }
            }
          }
        } else if (is_depthwise_s1(d)) {
          for (int64_t n = 0; n < d.N; ++n) {
            for (int64_t c = 0; c < d.Cin; ++c) {
              const double* xc = xp + (n * d.Cin + c) * HW;
              const double* gc = gp + (n * d.Cout + c) * out_hw;
              double* dxc = need_dx ? dxp + (n * d.Cin + c) * HW : nullptr;
              for (int kh = 0; kh < d.k; ++kh) {
                for (int kw = 0; kw < d.k; ++kw) {
                  int64_t widx = (c * d.k + kh) * d.k + kw;
                  double wv = wp[widx];
                  double dw_acc = 0.0;
                  int64_t iw0 = -d.pad + int64_t(kw) * d.dil;
                  int64_t lo = std::max<int64_t>(0, -iw0);
                  int64_t hi = std::min<int64_t>(d.Wo, d.W - iw0);
                  if (lo >= hi) continue;
                  for (int64_t oh = 0; oh < d.Ho; ++oh) {
                    int64_t ih = oh - d.pad + int64_t(kh) * d.dil;
                    if (ih < 0 || ih >= d.H) continue;
                    const double* grow = gc + oh * d.Wo;
                    const double* xr = xc + ih * d.W + iw0;
                    if (need_dx) {
                      double* dxr = dxc + ih * d.W + iw0;
                      for (int64_t ow = lo; ow < hi; ++ow) dxr[ow] += wv * grow[ow];
                    }
                    if (need_dw)
                      for (int64_t ow = lo; ow < hi; ++ow) dw_acc += grow[ow] * xr[ow];
                  }
                  if (need_dw) dwp[widx] += dw_acc;
                }
              }
            }
          }
        } else {
          const int64_t col_rows = d.cpg * d.k * d.k;
          double* col = col_scratch(col_rows * out_hw);
          std::vector<double> dcol(need_dx ? size_t(col_rows * out_hw) : 0);
          for (int64_t n = 0; n < d.N; ++n) {
            for (int g = 0; g < d.groups; ++g) {
              MapCM G(gp + (n * d.Cout + g * d.copg) * out_hw, d.copg, out_hw);
              if (need_dw) {
                im2col(xp, d, n, g, col);
                MapCM C(col, col_rows, out_hw);
                MapM DW(dwp + g * d.copg * col_rows, d.copg, col_rows);
                DW.noalias() += G * C.transpose();
              }
              if (need_dx) {
                MapCM W(wp + g * d.copg * col_rows, d.copg, col_rows);
                MapM DC(dcol.data(), col_rows, out_hw);
                DC.noalias() = W.transpose() * G;
                col2im_add(dcol.data(), d, n, g, dxp);
              }
            }
          }
        }
        if (bias.defined() && bias.requires_grad()) {
          bias.node()->ensure_grad();
          double* dbp = bias.node()->grad.data();
          for (int64_t n = 0; n < d.N; ++n)
            for (int64_t c = 0; c < d.Cout; ++c) {
              const double* gc = gp + (n * d.Cout + c) * out_hw;
              double acc = 0.0;
              for (int64_t i = 0; i < out_hw; ++i) acc += gc[i];
              dbp[c] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// batch_norm

BatchNormParams BatchNormParams::make(int channels, double gamma_init) {
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, gamma_init, true);
  p.beta = Tensor::zeros({channels}, true);
  p.running_mean = Array::Zero(channels);
  p.running_var = Array::Ones(channels);
  return p;
}

void BatchNormParams::validate() const {
  int c = channels();
  check_config(beta.numel() == c && running_mean.size() == c && running_var.size() == c,
               "batch_norm parameter lengths disagree");
  check_config(eps > 0, "batch_norm eps must be > 0");
  check_config(momentum > 0 && momentum <= 1, "batch_norm momentum must be in (0,1]");
  check_config((running_var >= 0).all(), "batch_norm running_var must be >= 0");
}

Tensor batch_norm(const Tensor& x, BatchNormParams& params, bool training) {
  check_config(x.ndim() == 4, "batch_norm input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_config(C == params.channels(),
               "batch_norm channel mismatch: input " + std::to_string(C) + " vs params " +
                   std::to_string(params.channels()));
  check_config(N >= 1 && H * W >= 1, "batch_norm requires a non-empty batch");
  params.validate();

  const int64_t HW = H * W;
  const int64_t M = N * HW;
  const double* xp = x.ptr();
  const double* gp = params.gamma.ptr();
  const double* bp = params.beta.ptr();
  Array out(x.numel());
  Array inv_std(C);
  std::shared_ptr<Array> xhat;

  if (training) {
    xhat = std::make_shared<Array>(x.numel());
    for (int64_t c = 0; c < C; ++c) {
      double sum = 0, sumsq = 0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xp + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          sum += p[i];
          sumsq += p[i] * p[i];
        }
      }
      double mean = sum / double(M);
      double var = std::max(0.0, sumsq / double(M) - mean * mean);  // biased
      inv_std[c] = 1.0 / std::sqrt(var + params.eps);
      params.running_mean[c] =
          (1 - params.momentum) * params.running_mean[c] + params.momentum * mean;
      params.running_var[c] =
          (1 - params.momentum) * params.running_var[c] + params.momentum * var;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xp + (n * C + c) * HW;
        double* xh = xhat->data() + (n * C + c) * HW;
        double* o = out.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          xh[i] = (p[i] - mean) * inv_std[c];
          o[i] = xh[i] * gp[c] + bp[c];
        }
      }
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      inv_std[c] = 1.0 / std::sqrt(params.running_var[c] + params.eps);
      double mean = params.running_mean[c];
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xp + (n * C + c) * HW;
        double* o = out.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) o[i] = (p[i] - mean) * inv_std[c] * gp[c] + bp[c];
      }
    }
  }

  if (op_count().enabled) op_count().elem_ops += x.numel();

  Tensor gamma = params.gamma, beta = params.beta;
  Array run_mean = params.running_mean;  // copies for the inference backward
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, N, C, HW, M, inv_std, xhat, run_mean, training](detail::Node& self) {
        const double* dy = self.grad.data();
        const double* gp = gamma.ptr();
        if (training) {
          const double* xh = xhat->data();
          for (int64_t c = 0; c < C; ++c) {
            double sum_dy = 0, sum_dy_xh = 0;
            for (int64_t n = 0; n < N; ++n) {
              const double* g = dy + (n * C + c) * HW;
              const double* h = xh + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sum_dy += g[i];
                sum_dy_xh += g[i] * h[i];
              }
            }
            if (gamma.requires_grad()) {
              gamma.node()->ensure_grad();
              gamma.node()->grad[c] += sum_dy_xh;
            }
            if (beta.requires_grad()) {
              beta.node()->ensure_grad();
              beta.node()->grad[c] += sum_dy;
            }
            if (x.requires_grad()) {
              x.node()->ensure_grad();
              double* dx = x.node()->grad.data();
              double a = gp[c] * inv_std[c];
              double mdy = sum_dy / double(M), mdyxh = sum_dy_xh / double(M);
              for (int64_t n = 0; n < N; ++n) {
                const double* g = dy + (n * C + c) * HW;
                const double* h = xh + (n * C + c) * HW;
                double* d = dx + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) d[i] += a * (g[i] - mdy - h[i] * mdyxh);
              }
            }
          }
        } else {
          const double* xp = x.ptr();
          for (int64_t c = 0; c < C; ++c) {
            double sum_dy = 0, sum_dy_xh = 0;
            for (int64_t n = 0; n < N; ++n) {
              const double* g = dy + (n * C + c) * HW;
              const double* p = xp + (n * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                sum_dy += g[i];
                sum_dy_xh += g[i] * (p[i] - run_mean[c]) * inv_std[c];
              }
            }
            if (gamma.requires_grad()) {
              gamma.node()->ensure_grad();
              gamma.node()->grad[c] += sum_dy_xh;
            }
            if (beta.requires_grad()) {
              beta.node()->ensure_grad();
              beta.node()->grad[c] += sum_dy;
            }
            if (x.requires_grad()) {
              x.node()->ensure_grad();
              double* dx = x.node()->grad.data();
              double a = gp[c] * inv_std[c];
              for (int64_t n = 0; n < N; ++n) {
                const double* g = dy + (n * C + c) * HW;
                double* d = dx + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) d[i] += a * g[i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise / resampling ops

Tensor prelu(const Tensor& x, const Tensor& slope) {
  check_config(x.ndim() == 4, "prelu input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  check_config(slope.numel() == C, "prelu slope length must equal channel count");
  Array out(x.numel());
  const double* xp = x.ptr();
  const double* sp = slope.ptr();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = xp + (n * C + c) * HW;
      double* o = out.data() + (n * C + c) * HW;
      double s = sp[c];
      for (int64_t i = 0; i < HW; ++i) o[i] = p[i] >= 0 ? p[i] : s * p[i];
    }
  if (op_count().enabled) op_count().elem_ops += x.numel();
  return make_result(
      x.shape(), std::move(out), {x, slope}, [x, slope, N, C, HW](detail::Node& self) {
        const double* dy = self.grad.data();
        const double* xp = x.ptr();
        const double* sp = slope.ptr();
        double* dx = nullptr;
        double* ds = nullptr;
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          dx = x.node()->grad.data();
        }
        if (slope.requires_grad()) {
          slope.node()->ensure_grad();
          ds = slope.node()->grad.data();
        }
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const double* p = xp + (n * C + c) * HW;
            const double* g = dy + (n * C + c) * HW;
            double s = sp[c];
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) {
              if (p[i] >= 0) {
                if (dx) dx[(n * C + c) * HW + i] += g[i];
              } else {
                if (dx) dx[(n * C + c) * HW + i] += s * g[i];
                acc += g[i] * p[i];
              }
            }
            if (ds) ds[c] += acc;
          }
      });
}

Tensor avg_pool2(const Tensor& x) {
  check_config(x.ndim() == 4, "avg_pool2 input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_config(H % 2 == 0 && W % 2 == 0,
               "avg_pool2 requires even spatial size, got " + shape_str(x.shape()));
  const int64_t Ho = H / 2, Wo = W / 2;
  Array out(N * C * Ho * Wo);
  const double* xp = x.ptr();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = xp + nc * H * W;
    double* o = out.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const double* r0 = p + (2 * oh) * W + 2 * ow;
        const double* r1 = r0 + W;
        o[oh * Wo + ow] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  if (op_count().enabled) op_count().elem_ops += N * C * Ho * Wo;
  return make_result(
      {N, C, Ho, Wo}, std::move(out), {x}, [x, N, C, H, W, Ho, Wo](detail::Node& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        double* dx = x.node()->grad.data();
        const double* g = self.grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          double* d = dx + nc * H * W;
          const double* gc = g + nc * Ho * Wo;
          for (int64_t oh = 0; oh < Ho; ++oh)
            for (int64_t ow = 0; ow < Wo; ++ow) {
              double v = 0.25 * gc[oh * Wo + ow];
              double* r0 = d + (2 * oh) * W + 2 * ow;
              double* r1 = r0 + W;
              r0[0] += v;
              r0[1] += v;
              r1[0] += v;
              r1[1] += v;
            }
        }
      });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  check_config(x.ndim() == 4, "upsample_nearest input must be [N,C,H,W]");
  check_config(factor >= 1, "upsample factor must be >= 1");
  if (factor == 1) return x;
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H * factor, Wo = W * factor;
  Array out(N * C * Ho * Wo);
  const double* xp = x.ptr();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = xp + nc * H * W;
    double* o = out.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      const double* pr = p + (oh / factor) * W;
      double* orow = o + oh * Wo;
      for (int64_t ow = 0; ow < Wo; ++ow) orow[ow] = pr[ow / factor];
    }
  }
  if (op_count().enabled) op_count().elem_ops += N * C * Ho * Wo;
  return make_result(
      {N, C, Ho, Wo}, std::move(out), {x}, [x, N, C, H, W, factor, Ho, Wo](detail::Node& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        double* dx = x.node()->grad.data();
        const double* g = self.grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          double* d = dx + nc * H * W;
          const double* gc = g + nc * Ho * Wo;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            double* dr = d + (oh / factor) * W;
            const double* grow = gc + oh * Wo;
            for (int64_t ow = 0; ow < Wo; ++ow) dr[ow / factor] += grow[ow];
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  check_config(x.ndim() == 4, "global_avg_pool input must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  check_config(HW >= 1, "global_avg_pool requires non-empty maps");
  Array out(N * C);
  const double* xp = x.ptr();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = xp + nc * HW;
    double acc = 0.0;
    for (int64_t i = 0; i < HW; ++i) acc += p[i];
    out[nc] = acc / double(HW);
  }
  if (op_count().enabled) op_count().elem_ops += N * C;
  return make_result({N, C}, std::move(out), {x}, [x, N, C, HW](detail::Node& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* dx = x.node()->grad.data();
    const double* g = self.grad.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double v = g[nc] / double(HW);
      double* d = dx + nc * HW;
      for (int64_t i = 0; i < HW; ++i) d[i] += v;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  Array out(x.numel());
  const double* xp = x.ptr();
  for (int64_t i = 0; i < x.numel(); ++i) {
    double z = xp[i];
    out[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return make_result(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    double* dx = x.node()->grad.data();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    for (int64_t i = 0; i < self.data.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return add_n({a, b}); }

Tensor add_n(const std::vector<Tensor>& ts) {
  check_config(!ts.empty(), "add_n requires at least one tensor");
  for (const auto& t : ts)
    check_config(t.shape() == ts[0].shape(), "add_n shape mismatch: " + shape_str(t.shape()) +
                                                 " vs " + shape_str(ts[0].shape()));
  if (ts.size() == 1) return ts[0];
  Array out = ts[0].data();
  for (size_t i = 1; i < ts.size(); ++i) out += ts[i].data();
  std::vector<Tensor> parents(ts.begin(), ts.end());
  return make_result(ts[0].shape(), std::move(out), parents, [ts](detail::Node& self) {
    for (const auto& t : ts) {
      if (!t.requires_grad()) continue;
      t.node()->ensure_grad();
      t.node()->grad += self.grad;
    }
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  Array out = a.data() * s;
  return make_result(a.shape(), std::move(out), {a}, [a, s](detail::Node& self) {
    if (!a.requires_grad()) return;
    a.node()->ensure_grad();
    a.node()->grad += self.grad * s;
  });
}

Tensor concat_channels(const std::vector<Tensor>& ts) {
  check_config(!ts.empty(), "concat_channels requires at least one tensor");
  if (ts.size() == 1) return ts[0];
  const int64_t N = ts[0].dim(0), H = ts[0].dim(2), W = ts[0].dim(3);
  int64_t C = 0;
  for (const auto& t : ts) {
    check_config(t.ndim() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
                 "concat_channels requires matching N,H,W");
    C += t.dim(1);
  }
  const int64_t HW = H * W;
  Array out(N * C * HW);
  for (int64_t n = 0; n < N; ++n) {
    int64_t coff = 0;
    for (const auto& t : ts) {
      int64_t tc = t.dim(1);
      std::copy(t.ptr() + n * tc * HW, t.ptr() + (n + 1) * tc * HW,
                out.data() + (n * C + coff) * HW);
      coff += tc;
    }
  }
  return make_result({N, C, H, W}, std::move(out), std::vector<Tensor>(ts.begin(), ts.end()),
                     [ts, N, C, HW](detail::Node& self) {
                       const double* g = self.grad.data();
                       for (int64_t n = 0; n < N; ++n) {
                         int64_t coff = 0;
                         for (const auto& t : ts) {
                           int64_t tc = t.dim(1);
                           if (t.requires_grad()) {
                             t.node()->ensure_grad();
                             double* d = t.node()->grad.data() + n * tc * HW;
                             const double* gs = g + (n * C + coff) * HW;
                             for (int64_t i = 0; i < tc * HW; ++i) d[i] += gs[i];
                           }
                           coff += tc;
                         }
                       }
                     });
}

Tensor sum_all(const Tensor& x) {
  Array out(1);
  out[0] = x.data().sum();
  return make_result({1}, std::move(out), {x}, [x](detail::Node& self) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    x.node()->grad += self.grad[0];
  });
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  check_config(logits.shape() == targets.shape(), "bce shapes must match");
  const int64_t n = logits.numel();
  const double* z = logits.ptr();
  const double* t = targets.ptr();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double zi = z[i];
    acc += std::max(zi, 0.0) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Array out(1);
  out[0] = acc / double(n);
  if (!std::isfinite(out[0])) throw numeric_error("bce loss is non-finite");
  return make_result({1}, std::move(out), {logits, targets}, [logits, targets, n](detail::Node& self) {
    if (!logits.requires_grad()) return;
    logits.node()->ensure_grad();
    double* d = logits.node()->grad.data();
    const double* z = logits.ptr();
    const double* t = targets.ptr();
    double g = self.grad[0] / double(n);
    for (int64_t i = 0; i < n; ++i) {
      double zi = z[i];
      double s = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
      d[i] += g * (s - t[i]);
    }
  });
}

}  // namespace csnet
