#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csnet/goctconv.hpp"
#include "csnet/tensor.hpp"

namespace csnet {

// User-facing configuration. Stage depths are fixed at (3, 4, 6, 4); the
// split ratio divides every ILBlock's width between its high and low
// resolution branches.
struct CSNetConfig {
  std::array<int, 4> stage_widths{32, 64, 112, 112};
  double width_multiplier = 1.0;
  std::pair<int, int> split{1, 1};  // C_H : C_L
  int csf_channels = 32;            // per-scale fusion width
  int csf_out_channels = 32;        // width of the fused high-resolution features
  std::vector<int> dilation_rates{1, 2, 4, 8};

  static constexpr std::array<int, 4> stage_depths{3, 4, 6, 4};

  void validate() const;
};

nlohmann::json csnet_config_to_json(const CSNetConfig& c);
CSNetConfig csnet_config_from_json(const nlohmann::json& j);

// Resolved per-block channel allocation. Pruning produces arbitrary
// allocations; a CSNetConfig produces the uniform canonical one.
struct BlockArch {
  int ch_hi = 0;  // channels at the stage's high-resolution factor
  int ch_lo = 0;  // channels one octave below
  int total() const { return ch_hi + ch_lo; }
};

struct StageArch {
  int hi_factor = 2;  // spatial divisor of the high branch vs the input image
  std::vector<BlockArch> blocks;
};

struct CSFArch {
  std::array<int, 3> tap_factor{4, 8, 16};
  std::array<int, 3> mid = {32, 32, 32};  // per-scale fused channels
  int out_channels = 32;
  std::vector<int> dilations{1, 2, 4, 8};
};

struct ModelArch {
  int stem_in = 3;
  int stem_out = 32;
  std::array<StageArch, 4> stages;
  CSFArch csf;

  static constexpr int total_stride = 32;  // deepest branch divisor

  // Merged tap width of stage 2 + i (i in 0..2).
  int tap_channels(int i) const;
  void validate() const;
};

ModelArch make_arch(const CSNetConfig& config);
nlohmann::json arch_to_json(const ModelArch& a);
ModelArch arch_from_json(const nlohmann::json& j);

// --- parameters ------------------------------------------------------------

struct BnAct {
  std::string name;  // BN layer key, e.g. "stage1.block0.bn1.f2"
  BatchNormParams bn;
  Tensor slope;  // PReLU, per channel
  bool dynamic_target = false;
};

struct GOctLayer {
  GOctConvSpec spec;
  GOctConvWeights w;
};

struct BlockParams {
  std::vector<int> factors;  // live scale factors, ascending
  GOctLayer pw;              // 1x1 vanilla OctConv (cross-scale, full)
  GOctLayer dw1, dw2;        // 3x3 depthwise gOctConvs (cross-scale off)
  std::vector<BnAct> act1, act2, act3;  // aligned with factors
};

struct StemParams {
  Tensor w;  // [stem_out, 3, 3, 3], stride 2
  BnAct act;
};

struct CSFParams {
  GOctLayer fuse1;                      // 1x1 cross-stages, cross-scale
  std::vector<int> mid_factors;         // live fused scales
  std::vector<BnAct> act_a;
  std::vector<std::vector<Tensor>> dil_w;  // [scale][rate], depthwise 3x3
  std::vector<BnAct> act_b;
  GOctLayer fuse2;  // 1x1 to the highest tap resolution
  BnAct act_c;
  Tensor head_w;  // [1, out_channels, 1, 1]
  Tensor head_b;  // [1]
};

struct CSNetParams {
  ModelArch arch;
  StemParams stem;
  std::array<std::vector<BlockParams>, 4> stages;
  CSFParams csf;
};

CSNetParams init_csnet(const ModelArch& arch, uint64_t seed);

// --- forward ---------------------------------------------------------------

// Where the GAP metric of a BN scale reads its features: the BN output
// y = gamma*xhat+beta, the raw conv output entering the BN, or the
// normalized xhat that gamma gates (scale-free across layers).
enum class MetricSource { bn_output, bn_input, bn_normalized };

// Per-iteration activity captured during the forward pass: the GAP
// metric per dynamic-target BN, and per-channel output spread for the
// stability log.
struct ForwardStats {
  bool want_metric = false;
  bool metric_abs = true;  // batch mean of |GAP| vs signed GAP
  MetricSource metric_source = MetricSource::bn_input;
  bool want_channel_std = false;
  std::map<std::string, Array> metric;
  std::map<std::string, Array> channel_std;
};

struct SaliencyOutput {
  Tensor logits;  // [N,1,H,W] at the input resolution
};

MultiScaleFeature ilblock_forward(BlockParams& block, const MultiScaleFeature& x, bool training,
                                  ForwardStats* stats = nullptr);

// Full model. Input H, W must be divisible by ModelArch::total_stride.
// When `taps_out` is given it receives the three CSF taps (factor, tensor).
SaliencyOutput csnet_forward(CSNetParams& params, const Tensor& image, bool training,
                             ForwardStats* stats = nullptr,
                             std::vector<std::pair<int, Tensor>>* taps_out = nullptr);

Tensor probability_map(const Tensor& logits);

// --- enumeration -----------------------------------------------------------

enum class ParamKind { conv_weight, bn_gamma, bn_beta, prelu_slope, bias };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamKind kind;
  bool dynamic_gamma = false;  // BN scale under dynamic weight decay
  std::string bn_key;          // owning BN layer for bn_gamma/bn_beta
};

std::vector<NamedParam> named_params(CSNetParams& p);
std::vector<std::pair<std::string, Array*>> named_buffers(CSNetParams& p);

// Every BnAct in the model with its layer key, extractor blocks first.
std::vector<BnAct*> all_bn_layers(CSNetParams& p);

int64_t count_params_actual(const CSNetParams& p);

}  // namespace csnet
