#pragma once

#include <functional>

#include "csnet/tensor.hpp"

namespace csnet {

// Compares reverse-mode gradients against central finite differences.
//
// `forward` must rebuild the computation from the current contents of the
// tensors in `wrt` and return a scalar; it is re-evaluated many times, so it
// must be deterministic given those contents. Checks every coordinate when a
// tensor has at most `max_coords` elements, otherwise a seeded random sample.
// Returns the max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor()>& forward, std::vector<Tensor> wrt,
                         double step = 1e-5, int64_t max_coords = 1 << 30,
                         uint64_t sample_seed = 1234) {
  check_config(step >= 1e-7 && step <= 1e-3, "grad_check step must be in [1e-7, 1e-3]");
  for (auto& t : wrt) t.zero_grad();
  Tensor y = forward();
  check_config(y.numel() == 1, "grad_check target must be scalar");
  y.backward();

  std::vector<Array> analytic;
  analytic.reserve(wrt.size());
  for (auto& t : wrt) {
    if (!t.grad().isFinite().all()) throw numeric_error("grad_check: non-finite gradient");
    analytic.push_back(t.grad());
  }

  Rng rng(sample_seed);
  double worst = 0.0;
  for (size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor& t = wrt[ti];
    const int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      coords.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
    } else {
      for (int64_t i = 0; i < max_coords; ++i) coords.push_back(rng.below(n));
    }
    for (int64_t idx : coords) {
      const double orig = t.data()[idx];
      t.data()[idx] = orig + step;
      double fp = forward().item();
      t.data()[idx] = orig - step;
      double fm = forward().item();
      t.data()[idx] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[ti][idx];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace csnet
