#include "csnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

namespace csnet {

namespace {

constexpr int kThresholds = 256;

std::vector<double> threshold_values() {
  std::vector<double> t(kThresholds);
  for (int k = 0; k < kThresholds; ++k) t[size_t(k)] = double(k) / 255.0;
  return t;
}

// Order-independent mean: accumulate in sorted order.
double sorted_mean(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double acc = 0;
  for (double x : v) acc += x;
  return acc / double(v.size());
}

}  // namespace

double mae_value(const Tensor& pred, const Tensor& mask) {
  check_config(pred.shape() == mask.shape(), "mae: shapes must match");
  const int64_t n = pred.numel();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(pred.data()[i] - mask.data()[i]);
  return acc / double(n);
}

MetricsReport compute_metrics(const std::vector<EvalPair>& pairs, FAggregation agg) {
  check_config(!pairs.empty(), "compute_metrics: empty dataset");
  const std::vector<double> thr = threshold_values();

  // per-image precision/recall per threshold
  std::vector<std::vector<double>> precs(kThresholds), recs(kThresholds);
  std::vector<double> maes;
  int skipped = 0;
  for (const auto& pair : pairs) {
    check_config(pair.pred.shape() == pair.mask.shape(), "pred/mask shape mismatch");
    const int64_t n = pair.pred.numel();
    const double* p = pair.pred.ptr();
    const double* m = pair.mask.ptr();

    maes.push_back(mae_value(pair.pred, pair.mask));

    int64_t fg = 0;
    for (int64_t i = 0; i < n; ++i) fg += m[i] != 0.0 ? 1 : 0;
    if (fg == 0) {
      ++skipped;  // recall undefined
      continue;
    }

    // histogram over "number of thresholds passed" using the exact
    // comparisons pred > t_k
    std::vector<int64_t> pos_hist(kThresholds + 1, 0), tp_hist(kThresholds + 1, 0);
    for (int64_t i = 0; i < n; ++i) {
      check_config(p[i] >= 0.0 && p[i] <= 1.0, "predictions must lie in [0,1]");
      int b = int(std::lower_bound(thr.begin(), thr.end(), p[i]) - thr.begin());
      if (b < kThresholds && p[i] > thr[size_t(b)]) ++b;  // exact strict comparison
      pos_hist[size_t(b)] += 1;
      if (m[i] != 0.0) tp_hist[size_t(b)] += 1;
    }
    int64_t pred_pos = 0, tp = 0;
    for (int k = kThresholds - 1; k >= 0; --k) {
      pred_pos += pos_hist[size_t(k + 1)];
      tp += tp_hist[size_t(k + 1)];
      double prec = pred_pos > 0 ? double(tp) / double(pred_pos) : 0.0;
      double rec = double(tp) / double(fg);
      precs[size_t(k)].push_back(prec);
      recs[size_t(k)].push_back(rec);
    }
  }

  MetricsReport rep;
  rep.skipped_images = skipped;
  rep.mae = sorted_mean(maes);
  rep.precision.resize(kThresholds);
  rep.recall.resize(kThresholds);
  rep.f.resize(kThresholds);
  for (int k = 0; k < kThresholds; ++k) {
    double mp = sorted_mean(precs[size_t(k)]);
    double mr = sorted_mean(recs[size_t(k)]);
    rep.precision[size_t(k)] = mp;
    rep.recall[size_t(k)] = mr;
    if (agg == FAggregation::mean_pr) {
      double denom = MetricsReport::beta2 * mp + mr;
      rep.f[size_t(k)] = denom > 0 ? (1.0 + MetricsReport::beta2) * mp * mr / denom : 0.0;
    } else {
      std::vector<double> fs;
      for (size_t i = 0; i < precs[size_t(k)].size(); ++i) {
        double den = MetricsReport::beta2 * precs[size_t(k)][i] + recs[size_t(k)][i];
        fs.push_back(den > 0 ? (1.0 + MetricsReport::beta2) * precs[size_t(k)][i] *
                                   recs[size_t(k)][i] / den
                             : 0.0);
      }
      rep.f[size_t(k)] = sorted_mean(fs);
    }
    rep.max_f_beta = std::max(rep.max_f_beta, rep.f[size_t(k)]);
  }
  return rep;
}

nlohmann::json metrics_to_json(const MetricsReport& r) {
  return nlohmann::json{{"f_beta_max", r.max_f_beta},
                        {"mae", r.mae},
                        {"skipped_images", r.skipped_images},
                        {"curve",
                         {{"precision", r.precision}, {"recall", r.recall}, {"f", r.f}}}};
}

MetricsReport evaluate_model(CSNetParams& params, const std::vector<SaliencySample>& data,
                             bool quiet) {
  check_config(!data.empty(), "evaluate_model: empty dataset");
  NoGradGuard ng;
  const int stride = ModelArch::total_stride;
  std::vector<EvalPair> pairs;
  pairs.reserve(data.size());
  for (const auto& s : data) {
    const int64_t H = s.image.dim(1), W = s.image.dim(2);
    int64_t rh = std::max<int64_t>(stride, (H + stride / 2) / stride * stride);
    int64_t rw = std::max<int64_t>(stride, (W + stride / 2) / stride * stride);
    Tensor input;
    if (rh != H || rw != W) {
      if (!quiet)
        std::fprintf(stderr, "note: resizing %lldx%lld -> %lldx%lld for the forward pass\n",
                     (long long)H, (long long)W, (long long)rh, (long long)rw);
      std::vector<double> chw(s.image.ptr(), s.image.ptr() + s.image.numel());
      auto r = resize_bilinear(chw, 3, H, W, rh, rw);
      Array a(3 * rh * rw);
      std::copy(r.begin(), r.end(), a.data());
      input = Tensor::from_array({1, 3, rh, rw}, std::move(a));
    } else {
      Array a = s.image.data();
      input = Tensor::from_array({1, 3, H, W}, std::move(a));
    }
    SaliencyOutput out = csnet_forward(params, input, /*training=*/false);
    Tensor prob = probability_map(out.logits);
    Array pm;
    if (rh != H || rw != W) {
      std::vector<double> chw(prob.ptr(), prob.ptr() + prob.numel());
      auto r = resize_bilinear(chw, 1, rh, rw, H, W);
      pm = Array(H * W);
      std::copy(r.begin(), r.end(), pm.data());
      for (int64_t i = 0; i < H * W; ++i) pm[i] = std::clamp(pm[i], 0.0, 1.0);
    } else {
      pm = prob.data();
    }
    EvalPair pair;
    pair.pred = Tensor::from_array({1, H, W}, std::move(pm));
    Array m = s.mask.data();
    pair.mask = Tensor::from_array({1, H, W}, std::move(m));
    pairs.push_back(std::move(pair));
  }
  return compute_metrics(pairs);
}

}  // namespace csnet
