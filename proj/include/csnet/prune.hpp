#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csnet/model.hpp"
#include "csnet/optim.hpp"

namespace csnet {

enum class PruneCriterion { bn_gamma, l1_norm, geometric_median };

PruneCriterion criterion_from_string(const std::string& s);
std::string criterion_to_string(PruneCriterion c);

// Per-channel importance of one prunable BN layer (every BN that follows a
// gOctConv). Scores are nonnegative; higher means more important.
struct ChannelImportance {
  std::string layer;  // BN key, e.g. "stage3.block2.bn1.f8"
  int scale_factor = 0;
  Array score;
  PruneCriterion criterion;
};

std::vector<ChannelImportance> score_channels(CSNetParams& model, PruneCriterion criterion);

// Weiszfeld iteration to tolerance 1e-8; points are rows of length dim.
Array geometric_median(const std::vector<Array>& points, double tol = 1e-8);

// keep mask per BN layer
struct PruneMasks {
  std::map<std::string, std::vector<char>> keep;
  std::vector<std::string> forced;  // layers where the keep >= 1 guard fired
};

// Channel kept iff score >= tau. A layer that would lose every channel
// keeps its single best one and is flagged.
PruneMasks select_prunable(const std::vector<ChannelImportance>& scores, double tau);

// Keeps the per-layer top ceil(frac * C) channels (at least one).
PruneMasks select_top_fraction(const std::vector<ChannelImportance>& scores, double keep_frac);

// Bisection on the keep fraction until the rebuilt parameter count lands
// within rel_tol of target_params.
PruneMasks select_for_target_params(CSNetParams& model,
                                    const std::vector<ChannelImportance>& scores,
                                    int64_t target_params, double rel_tol = 0.03);

struct PruneReport {
  struct LayerEntry {
    std::string layer;  // chain unit, e.g. "stage2.block1" / "csf.mid" / "csf.out"
    int scale = 0;
    int kept = 0, removed = 0;
  };
  std::vector<LayerEntry> layers;
  int64_t params_before = 0, params_after = 0;
  int64_t flops_before = 0, flops_after = 0;
  int64_t flops_input = 224;
  std::vector<std::string> forced;

  double prune_rate_params() const {
    return 1.0 - double(params_after) / double(params_before);
  }
  double prune_rate_flops() const { return 1.0 - double(flops_after) / double(flops_before); }
};

nlohmann::json prune_report_to_json(const PruneReport& r);
std::string channels_csv(const PruneReport& r);  // layer,scale,kept,removed

// The architecture the masks would produce (per-channel chains are the AND
// of their BN masks; depthwise channels go with their producers).
ModelArch arch_after_masks(CSNetParams& model, const PruneMasks& masks);

// Structural rewrite. Kernels, BN parameters and running statistics are
// sliced; dead channels with |gamma| <= 1e-4 and a non-negligible constant
// output fold that constant into the consuming BN's running mean (or the
// head bias) when fold_beta is set.
std::pair<CSNetParams, PruneReport> rebuild(CSNetParams& model, const PruneMasks& masks,
                                            bool fold_beta = true, int64_t flops_input = 224);

struct PrunePipelineResult {
  CSNetParams compact;
  PruneReport report;
  TrainResult train_log;
  TrainResult finetune_log;
};

// Full learnable-channels pipeline: train with the policy, score, threshold at tau,
// rebuild, fine-tune for cfg.finetune_epochs at the final lr.
PrunePipelineResult prune_pipeline(CSNetParams& model, const std::vector<SaliencySample>& data,
                                   const TrainConfig& cfg, const DecayPolicy& policy,
                                   PruneCriterion criterion, double tau,
                                   const TrainOptions& opts = {});

}  // namespace csnet
