#include "csnet/optim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace csnet {

void TrainConfig::validate() const {
  check_config(batch_size >= 1, "batch_size must be >= 1");
  check_config(epochs >= 1, "epochs must be >= 1");
  check_config(lr > 0, "lr must be > 0");
  int prev = 0;
  for (int d : lr_drop_epochs) {
    check_config(d > prev && d < epochs, "lr_drop_epochs must be strictly increasing and < epochs");
    prev = d;
  }
  check_config(finetune_epochs >= 0, "finetune_epochs must be >= 0");
}

double TrainConfig::lr_at_epoch(int epoch_1based) const {
  double v = lr;
  for (int d : lr_drop_epochs)
    if (epoch_1based >= d) v /= 10.0;
  return v;
}

double TrainConfig::final_lr() const { return lr_at_epoch(epochs); }

Array channel_metric(const Tensor& features, bool absolute) {
  check_config(features.ndim() == 4, "channel_metric expects [N,C,H,W]");
  const int64_t N = features.dim(0), C = features.dim(1), HW = features.dim(2) * features.dim(3);
  Array s = Array::Zero(C);
  const double* p = features.ptr();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* m = p + (n * C + c) * HW;
      double acc = 0;
      for (int64_t i = 0; i < HW; ++i) acc += m[i];
      double gap = acc / double(HW);
      s[c] += absolute ? std::abs(gap) : gap;
    }
  return s / double(N);
}

void standard_decay_step(Array& w, const Array& grad, double lr, double lambda) {
  check_config(w.size() == grad.size(), "decay step: shape mismatch");
  w -= lr * grad + (lr * lambda) * w;
}

void dynamic_decay_step(Array& w, const Array& grad, double lr, double lambda_d, const Array& S) {
  check_config(w.size() == grad.size(), "decay step: shape mismatch");
  check_config(S.size() == w.size(), "dynamic decay: S length must equal channel count");
  w -= lr * grad + (lr * lambda_d) * (S * w);
}

Adam::Adam(std::vector<NamedParam> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  state_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    state_[i].m = Array::Zero(params_[i].tensor.numel());
    state_[i].v = Array::Zero(params_[i].tensor.numel());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step(double lr, const DecayPolicy& policy,
                const std::map<std::string, Array>& metric) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    NamedParam& np = params_[i];
    Array& w = np.tensor.data();
    const Array& g = np.tensor.grad();  // zero-initialized if untouched
    State& st = state_[i];
    st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
    st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.square();
    w -= lr * (st.m / bc1) / ((st.v / bc2).sqrt() + cfg_.eps);

    // decay term, additive after the adaptive step; the multiplicative
    // factor is clamped to [0,1] so an oversized decay zeroes a weight
    // instead of flipping its sign
    if (np.dynamic_gamma && policy.dynamic_enabled) {
      auto it = metric.find(np.bn_key);
      check_config(it != metric.end(), "missing channel metric for " + np.bn_key);
      check_config(it->second.size() == w.size(), "metric length mismatch for " + np.bn_key);
      double k = policy.lambda_dyn * (policy.scale_dyn_by_lr ? lr : 1.0);
      w *= (1.0 - (k * it->second).min(1.0)).max(0.0);
    } else if (np.dynamic_gamma) {
      double k = policy.lambda_gamma_std * (policy.scale_gamma_std_by_lr ? lr : 1.0);
      w *= std::max(0.0, 1.0 - k);
    } else {
      double k = policy.lambda_std * (policy.scale_std_by_lr ? lr : 1.0);
      w *= std::max(0.0, 1.0 - k);
    }
  }
}

std::vector<double> dynamic_gammas(CSNetParams& params) {
  std::vector<double> out;
  for (BnAct* a : all_bn_layers(params)) {
    if (!a->dynamic_target) continue;
    for (int64_t i = 0; i < a->bn.gamma.numel(); ++i)
      out.push_back(std::abs(a->bn.gamma.data()[i]));
  }
  return out;
}

double gamma_below_fraction(CSNetParams& params, double tau) {
  auto g = dynamic_gammas(params);
  if (g.empty()) return 0.0;
  int64_t below = 0;
  for (double v : g) below += v < tau ? 1 : 0;
  return double(below) / double(g.size());
}

namespace {

namespace fs = std::filesystem;

void write_gamma_hist(const std::string& dir, int epoch, const std::vector<double>& gammas) {
  std::vector<double> edges;
  for (int e = -24; e <= 2; e += 2) edges.push_back(double(e));
  std::vector<int64_t> counts(edges.size() + 1, 0);
  for (double g : gammas) {
    double lg = g > 0 ? std::log10(g) : -1e9;
    size_t b = 0;
    while (b < edges.size() && lg >= edges[b]) ++b;
    counts[b] += 1;
  }
  int64_t below = 0;
  for (double g : gammas) below += g < 1e-6 ? 1 : 0;
  nlohmann::json j = {{"epoch", epoch},
                      {"log10_edges", edges},
                      {"counts", counts},
                      {"total", gammas.size()},
                      {"below_1e-6_fraction", gammas.empty() ? 0.0 : double(below) / double(gammas.size())}};
  char name[64];
  std::snprintf(name, sizeof name, "epoch_%04d.json", epoch);
  std::ofstream f(fs::path(dir) / name);
  f << j.dump(2) << "\n";
}

}  // namespace

TrainResult train(CSNetParams& params, const std::vector<SaliencySample>& data,
                  const TrainConfig& cfg, const DecayPolicy& policy, const TrainOptions& opts) {
  cfg.validate();
  check_config(!data.empty(), "train: dataset is empty");
  for (const auto& s : data) validate_sample(s);
  const int64_t H = data[0].image.dim(1), W = data[0].image.dim(2);
  for (const auto& s : data)
    check_config(s.image.dim(1) == H && s.image.dim(2) == W,
                 "train: all samples must share one size");

  Adam adam(named_params(params));
  const int64_t n = int64_t(data.size());

  std::ofstream csv;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    fs::create_directories(fs::path(opts.out_dir) / "gamma_hist");
    csv.open(fs::path(opts.out_dir) / "train_log.csv");
    csv << "epoch,loss,mae,lr,gamma_below_1e-6_fraction,mean_channel_std\n";
  }

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng shuffle_rng(split_seed(cfg.seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    double loss_acc = 0, mae_acc = 0;
    int64_t seen = 0;
    double mean_channel_std = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t bs = std::min<int64_t>(cfg.batch_size, n - start);
      Array imgs(bs * 3 * H * W), masks(bs * H * W);
      for (int64_t b = 0; b < bs; ++b) {
        int64_t idx = order[size_t(start + b)];
        SaliencySample s = cfg.augment
                               ? augment(data[size_t(idx)],
                                         split_seed(cfg.seed, "aug", int64_t(epoch) * n + idx))
                               : data[size_t(idx)];
        std::copy(s.image.ptr(), s.image.ptr() + 3 * H * W, imgs.data() + b * 3 * H * W);
        std::copy(s.mask.ptr(), s.mask.ptr() + H * W, masks.data() + b * H * W);
      }
      Tensor images = Tensor::from_array({bs, 3, H, W}, std::move(imgs));
      Tensor targets = Tensor::from_array({bs, 1, H, W}, std::move(masks));

      ForwardStats stats;
      stats.want_metric = policy.dynamic_enabled;
      stats.metric_abs = policy.metric_abs;
      stats.metric_source = policy.metric_source;
      const bool last_batch = start + bs >= n;
      stats.want_channel_std = last_batch;

      SaliencyOutput out = csnet_forward(params, images, /*training=*/true, &stats);
      Tensor loss = bce_with_logits_mean(out.logits, targets);
      const double loss_v = loss.item();
      if (!std::isfinite(loss_v))
        throw numeric_error("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch));
      {
        Tensor prob = probability_map(out.logits);
        mae_acc += (prob.data() - targets.data()).abs().sum() / double(H * W);
      }
      loss_acc += loss_v * double(bs);
      seen += bs;

      adam.zero_grad();
      loss.backward();
      adam.step(lr, policy, stats.metric);

      if (last_batch && !stats.channel_std.empty()) {
        double acc = 0;
        int64_t cnt = 0;
        for (const auto& [k, sd] : stats.channel_std) {
          acc += sd.sum();
          cnt += sd.size();
        }
        mean_channel_std = cnt > 0 ? acc / double(cnt) : 0.0;
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_acc / double(seen);
    log.mae = mae_acc / double(seen);
    log.lr = lr;
    log.gamma_below_1e6_fraction = gamma_below_fraction(params, 1e-6);
    log.mean_channel_std = mean_channel_std;
    result.log.push_back(log);
    result.final_loss = log.loss;

    if (csv.is_open()) {
      char line[256];
      std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.3g,%.6f,%.17g\n", log.epoch, log.loss,
                    log.mae, log.lr, log.gamma_below_1e6_fraction, log.mean_channel_std);
      csv << line;
      csv.flush();
      write_gamma_hist((fs::path(opts.out_dir) / "gamma_hist").string(), epoch,
                       dynamic_gammas(params));
    }
    if (opts.verbose)
      std::fprintf(stderr, "epoch %3d  loss %.5f  mae %.4f  lr %.2g  g<1e-6 %.3f  chstd %.4g\n",
                   log.epoch, log.loss, log.mae, log.lr, log.gamma_below_1e6_fraction,
                   log.mean_channel_std);
  }
  return result;
}

}  // namespace csnet
