#pragma once

#include <cmath>
#include <vector>

#include "csnet/tensor.hpp"

namespace csnet::testing {

inline Tensor rand_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool rg = false) {
  return Tensor::randn(std::move(shape), rng, stddev, rg);
}

// Direct convolution oracle: plain quadruple loops, no shared machinery
// with the conv2d implementation.
inline Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                            int pad, int dil, int groups) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), k = w.dim(2);
  const int64_t cpg = Cin / groups, copg = Cout / groups;
  const int64_t Ho = (H + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int64_t Wo = (W + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  Tensor out = Tensor::zeros({N, Cout, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      int64_t g = co / copg;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bias.defined() ? bias.data()[co] : 0.0;
          for (int64_t ci = 0; ci < cpg; ++ci)
            for (int64_t kh = 0; kh < k; ++kh)
              for (int64_t kw = 0; kw < k; ++kw) {
                int64_t ih = oh * stride - pad + kh * dil;
                int64_t iw = ow * stride - pad + kw * dil;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.data()[((n * Cin + g * cpg + ci) * H + ih) * W + iw] *
                       w.data()[((co * cpg + ci) * k + kh) * k + kw];
              }
          out.data()[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
    }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  return (a.data() - b.data()).abs().maxCoeff();
}

}  // namespace csnet::testing
