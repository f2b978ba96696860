#pragma once

#include <map>
#include <string>
#include <vector>

#include "csnet/data.hpp"
#include "csnet/model.hpp"

namespace csnet {

// Weight-decay regimes. Dynamic decay replaces the standard term on the
// BN scales that follow gOctConvs: w <- w - step - lambda_d * S(x) * w,
// with S the per-channel batch mean of |GAP| captured in the same forward
// pass. Every parameter is governed by exactly one regime.
struct DecayPolicy {
  double lambda_std = 5e-3;  // all parameters outside the dynamic targets
  bool scale_std_by_lr = true;

  bool dynamic_enabled = true;
  double lambda_dyn = 3.0;
  bool scale_dyn_by_lr = false;  // the update rule carries no lr on the decay term

  // standard decay applied to the target gammas when dynamic is disabled
  double lambda_gamma_std = 5e-3;
  bool scale_gamma_std_by_lr = true;

  bool metric_abs = true;  // batch mean of |GAP|; signed GAP if false
  MetricSource metric_source = MetricSource::bn_input;
};

struct TrainConfig {
  int batch_size = 24;
  int epochs = 300;
  double lr = 1e-4;
  std::vector<int> lr_drop_epochs{200, 250};  // divide lr by 10 at these epochs
  uint64_t seed = 7;
  int finetune_epochs = 20;
  bool augment = true;

  void validate() const;
  double lr_at_epoch(int epoch_1based) const;
  double final_lr() const;
};

// --- primitive update rules (per-array, testable in isolation) -------------

// S_c = (1/N) sum_n |GAP(x_{n,c})|, the spatial mean taken per feature map.
Array channel_metric(const Tensor& features, bool absolute = true);

// w <- w - lr*grad - lr*lambda*w
void standard_decay_step(Array& w, const Array& grad, double lr, double lambda);

// w <- w - lr*grad - lr*lambda_d*(S .* w), S per channel
void dynamic_decay_step(Array& w, const Array& grad, double lr, double lambda_d, const Array& S);

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Adam over the model's named parameters; decay terms are applied
// additively after the adaptive step.
class Adam {
 public:
  explicit Adam(std::vector<NamedParam> params, AdamConfig cfg = {});

  // `metric` maps BN layer keys to their per-channel S for this iteration.
  void step(double lr, const DecayPolicy& policy, const std::map<std::string, Array>& metric);
  void zero_grad();
  int64_t step_count() const { return t_; }

 private:
  struct State {
    Array m, v;
  };
  std::vector<NamedParam> params_;
  std::vector<State> state_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// --- training loop ----------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double loss = 0, mae = 0, lr = 0;
  double gamma_below_1e6_fraction = 0;
  double mean_channel_std = 0;
};

struct TrainOptions {
  std::string out_dir;  // when set, writes train_log.csv and gamma_hist/*.json
  bool verbose = false;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double final_loss = 0;
};

// Training loop: forward, loss, per-channel metric, backward, update with
// the policy's decay regimes. Aborts with a diagnostic on divergence.
TrainResult train(CSNetParams& params, const std::vector<SaliencySample>& data,
                  const TrainConfig& cfg, const DecayPolicy& policy,
                  const TrainOptions& opts = {});

// |gamma| of every dynamic-target BN channel.
std::vector<double> dynamic_gammas(CSNetParams& params);
double gamma_below_fraction(CSNetParams& params, double tau);

}  // namespace csnet
