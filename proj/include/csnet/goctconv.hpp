#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csnet/tensor.hpp"

namespace csnet {

// One resolution branch: spatial divisor relative to the operator's
// reference resolution (power of two), and its channel budget. Zero
// channels means the branch is absent.
struct ScaleSpec {
  int scale_factor = 1;
  int channels = 0;
};

// Generalized octave convolution over arbitrary scale sets. The two-scale
// full instance is the vanilla OctConv; the per-scale depthwise instance
// with cross-scale paths turned off is the cheap in-block form.
struct GOctConvSpec {
  std::vector<ScaleSpec> in_scales;
  std::vector<ScaleSpec> out_scales;
  int kernel = 1;
  int dilation = 1;
  enum class Groups { full, depthwise };
  Groups groups_mode = Groups::full;
  bool cross_scale = true;

  void validate() const;
  int total_in_channels() const;
  int total_out_channels() const;
};

nlohmann::json goctconv_spec_to_json(const GOctConvSpec& spec);
GOctConvSpec goctconv_spec_from_json(const nlohmann::json& j);

// Ordered feature maps at distinct power-of-two scales sharing one
// reference resolution; entry at factor f has spatial size (H/f, W/f).
struct MultiScaleFeature {
  std::vector<std::pair<int, Tensor>> entries;  // ascending by scale factor

  void validate() const;
  const Tensor* at(int factor) const;
  Tensor& get(int factor);
  int64_t batch() const { return entries.at(0).second.dim(0); }
  int64_t ref_h() const { return entries.at(0).second.dim(2) * entries.at(0).first; }
  int64_t ref_w() const { return entries.at(0).second.dim(3) * entries.at(0).first; }
};

// Per-path kernels, keyed by (in scale factor, out scale factor). The
// canonical checkpoint name of a path kernel is "w[r->s]".
struct GOctConvWeights {
  std::map<std::pair<int, int>, Tensor> w;

  Tensor* find(int r, int s);
  const Tensor* find(int r, int s) const;
};

std::string path_key(int r, int s);  // "w[r->s]"

// Sum over input scales of conv(resample(x_r -> s), w[r->s]); pooling
// chains downward, nearest-neighbour upsampling after convolving upward.
MultiScaleFeature goctconv_forward(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                   const GOctConvWeights& weights);

// Two-scale full instance (factors 1x and 2x relative to the input's
// reference resolution).
MultiScaleFeature vanilla_octconv(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                  const GOctConvWeights& weights);

// Per-scale depthwise instance; cross_scale must be off.
MultiScaleFeature depthwise_goctconv(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                     const GOctConvWeights& weights);

// He-style initialization of every required path kernel; fan-in counts all
// input scales feeding an output scale.
GOctConvWeights init_goctconv_weights(const GOctConvSpec& spec, Rng& rng);

// Enumerates the active (r, s) paths of a spec in deterministic order.
std::vector<std::pair<ScaleSpec, ScaleSpec>> goctconv_paths(const GOctConvSpec& spec);

}  // namespace csnet
