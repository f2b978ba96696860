#pragma once

#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csnet/data.hpp"
#include "csnet/model.hpp"

namespace csnet {

// Saliency evaluation: max F-measure over 256 thresholds (beta^2 = 0.3,
// dataset-level F from threshold-wise mean precision/recall) and MAE.
struct MetricsReport {
  double max_f_beta = 0.0;
  double mae = 0.0;
  std::vector<double> precision;  // 256 entries, thresholds k/255
  std::vector<double> recall;
  std::vector<double> f;
  int skipped_images = 0;  // all-background masks, excluded from F

  static constexpr double beta2 = 0.3;
};

nlohmann::json metrics_to_json(const MetricsReport& r);

struct EvalPair {
  Tensor pred;  // probabilities in [0,1], same shape as mask
  Tensor mask;  // binary
};

// Dataset-level F defaults to threshold-wise mean precision/recall; the
// per-image-F convention is the recorded alternative.
enum class FAggregation { mean_pr, per_image_f };

MetricsReport compute_metrics(const std::vector<EvalPair>& pairs,
                              FAggregation agg = FAggregation::mean_pr);

double mae_value(const Tensor& pred, const Tensor& mask);

// Runs the model over a dataset (inference mode, one image at a time).
// Inputs whose sizes are not divisible by the model stride are bilinearly
// resized for the forward pass; predictions are resized back to the mask
// resolution. Returns the report; warns to stderr on resizes when `quiet`
// is false.
MetricsReport evaluate_model(CSNetParams& params, const std::vector<SaliencySample>& data,
                             bool quiet = true);

}  // namespace csnet
