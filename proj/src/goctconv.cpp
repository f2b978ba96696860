#include "csnet/goctconv.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace csnet {

namespace {

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

void check_scales(const std::vector<ScaleSpec>& scales, const char* what) {
  check_config(!scales.empty(), std::string(what) + " scale list is empty");
  int prev = 0;
  int live = 0;
  for (const auto& s : scales) {
    check_config(is_pow2(s.scale_factor),
                 std::string(what) + " scale_factor must be a power of two >= 1");
    check_config(s.scale_factor > prev, std::string(what) + " scale_factors must be strictly increasing");
    check_config(s.channels >= 0, std::string(what) + " channels must be >= 0");
    prev = s.scale_factor;
    if (s.channels > 0) ++live;
  }
  check_config(live >= 1, std::string(what) + " needs at least one scale with channels > 0");
}

}  // namespace

void GOctConvSpec::validate() const {
  check_scales(in_scales, "in");
  check_scales(out_scales, "out");
  check_config(kernel >= 1 && dilation >= 1, "kernel and dilation must be >= 1");
  check_config(kernel % 2 == 1, "same-padding requires an odd kernel");
  if (!cross_scale) {
    check_config(in_scales.size() == out_scales.size(),
                 "cross_scale=false requires identical in/out scale lists");
    for (size_t i = 0; i < in_scales.size(); ++i) {
      check_config(in_scales[i].scale_factor == out_scales[i].scale_factor,
                   "cross_scale=false requires identical in/out scale factors");
      if (groups_mode == Groups::depthwise)
        check_config(in_scales[i].channels == out_scales[i].channels,
                     "depthwise requires equal in/out channels per scale");
    }
  }
  if (groups_mode == Groups::depthwise)
    check_config(!cross_scale, "depthwise gOctConv requires cross_scale=false");
}

int GOctConvSpec::total_in_channels() const {
  int c = 0;
  for (const auto& s : in_scales) c += s.channels;
  return c;
}

int GOctConvSpec::total_out_channels() const {
  int c = 0;
  for (const auto& s : out_scales) c += s.channels;
  return c;
}

nlohmann::json goctconv_spec_to_json(const GOctConvSpec& spec) {
  nlohmann::json j;
  auto scales = [](const std::vector<ScaleSpec>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : v) a.push_back({{"scale_factor", s.scale_factor}, {"channels", s.channels}});
    return a;
  };
  j["in_scales"] = scales(spec.in_scales);
  j["out_scales"] = scales(spec.out_scales);
  j["kernel"] = spec.kernel;
  j["dilation"] = spec.dilation;
  j["groups_mode"] = spec.groups_mode == GOctConvSpec::Groups::full ? "full" : "depthwise";
  j["cross_scale"] = spec.cross_scale;
  return j;
}

GOctConvSpec goctconv_spec_from_json(const nlohmann::json& j) {
  GOctConvSpec spec;
  auto scales = [](const nlohmann::json& a) {
    std::vector<ScaleSpec> v;
    for (const auto& e : a) v.push_back({e.at("scale_factor").get<int>(), e.at("channels").get<int>()});
    return v;
  };
  spec.in_scales = scales(j.at("in_scales"));
  spec.out_scales = scales(j.at("out_scales"));
  spec.kernel = j.at("kernel").get<int>();
  spec.dilation = j.at("dilation").get<int>();
  std::string gm = j.at("groups_mode").get<std::string>();
  check_config(gm == "full" || gm == "depthwise", "unknown groups_mode: " + gm);
  spec.groups_mode = gm == "full" ? GOctConvSpec::Groups::full : GOctConvSpec::Groups::depthwise;
  spec.cross_scale = j.at("cross_scale").get<bool>();
  spec.validate();
  return spec;
}

void MultiScaleFeature::validate() const {
  check_config(!entries.empty(), "MultiScaleFeature is empty");
  int prev = 0;
  int64_t n = -1, rh = -1, rw = -1;
  for (const auto& [f, t] : entries) {
    check_config(is_pow2(f), "scale factor must be a power of two");
    check_config(f > prev, "scale factors must be strictly increasing and unique");
    check_config(t.defined() && t.ndim() == 4, "entries must be [N,C,H,W] tensors");
    prev = f;
    if (n < 0) {
      n = t.dim(0);
      rh = t.dim(2) * f;
      rw = t.dim(3) * f;
    } else {
      check_config(t.dim(0) == n, "entries must share the batch size");
      check_config(t.dim(2) * f == rh && t.dim(3) * f == rw,
                   "entry at factor " + std::to_string(f) + " does not match the reference resolution");
    }
  }
}

const Tensor* MultiScaleFeature::at(int factor) const {
  for (const auto& [f, t] : entries)
    if (f == factor) return &t;
  return nullptr;
}

Tensor& MultiScaleFeature::get(int factor) {
  for (auto& [f, t] : entries)
    if (f == factor) return t;
  throw config_error("no entry at scale factor " + std::to_string(factor));
}

Tensor* GOctConvWeights::find(int r, int s) {
  auto it = w.find({r, s});
  return it == w.end() ? nullptr : &it->second;
}

const Tensor* GOctConvWeights::find(int r, int s) const {
  auto it = w.find({r, s});
  return it == w.end() ? nullptr : &it->second;
}

std::string path_key(int r, int s) {
  return "w[" + std::to_string(r) + "->" + std::to_string(s) + "]";
}

std::vector<std::pair<ScaleSpec, ScaleSpec>> goctconv_paths(const GOctConvSpec& spec) {
  std::vector<std::pair<ScaleSpec, ScaleSpec>> paths;
  for (const auto& out : spec.out_scales) {
    if (out.channels == 0) continue;
    for (const auto& in : spec.in_scales) {
      if (in.channels == 0) continue;
      if (!spec.cross_scale && in.scale_factor != out.scale_factor) continue;
      paths.push_back({in, out});
    }
  }
  return paths;
}

namespace {

Tensor pool_chain(Tensor t, int times) {
  for (int i = 0; i < times; ++i) t = avg_pool2(t);
  return t;
}

int log2_int(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  return l;
}

}  // namespace

MultiScaleFeature goctconv_forward(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                   const GOctConvWeights& weights) {
  spec.validate();
  inputs.validate();

  // Inputs must carry exactly the spec's live in-scales.
  size_t want = 0;
  for (const auto& s : spec.in_scales)
    if (s.channels > 0) ++want;
  check_config(inputs.entries.size() == want,
               "input has " + std::to_string(inputs.entries.size()) + " scales, spec expects " +
                   std::to_string(want));
  for (const auto& s : spec.in_scales) {
    if (s.channels == 0) continue;
    const Tensor* t = inputs.at(s.scale_factor);
    check_config(t != nullptr, "missing input at scale factor " + std::to_string(s.scale_factor));
    check_config(t->dim(1) == s.channels,
                 "input at scale " + std::to_string(s.scale_factor) + " has " +
                     std::to_string(t->dim(1)) + " channels, spec expects " +
                     std::to_string(s.channels));
  }

  const int pad = spec.dilation * (spec.kernel - 1) / 2;
  MultiScaleFeature out;
  for (const auto& os : spec.out_scales) {
    if (os.channels == 0) continue;
    std::vector<Tensor> terms;
    for (const auto& is : spec.in_scales) {
      if (is.channels == 0) continue;
      if (!spec.cross_scale && is.scale_factor != os.scale_factor) continue;
      const Tensor* kern = weights.find(is.scale_factor, os.scale_factor);
      check_config(kern != nullptr, "missing kernel " + path_key(is.scale_factor, os.scale_factor));
      Conv2dOpts opts;
      opts.padding = pad;
      opts.dilation = spec.dilation;
      opts.groups = spec.groups_mode == GOctConvSpec::Groups::depthwise ? is.channels : 1;
      Tensor x = *inputs.at(is.scale_factor);
      if (os.scale_factor > is.scale_factor) {
        // high -> low: reduce resolution first, convolve at the target scale
        x = pool_chain(x, log2_int(os.scale_factor / is.scale_factor));
        terms.push_back(conv2d(x, *kern, Tensor(), opts));
      } else if (os.scale_factor < is.scale_factor) {
        // low -> high: convolve at the source scale, then upsample
        Tensor y = conv2d(x, *kern, Tensor(), opts);
        terms.push_back(upsample_nearest(y, is.scale_factor / os.scale_factor));
      } else {
        terms.push_back(conv2d(x, *kern, Tensor(), opts));
      }
    }
    check_config(!terms.empty(), "output scale " + std::to_string(os.scale_factor) +
                                     " receives no paths; check cross_scale and channels");
    out.entries.push_back({os.scale_factor, add_n(terms)});
  }
  out.validate();
  return out;
}

MultiScaleFeature vanilla_octconv(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                  const GOctConvWeights& weights) {
  check_config(spec.in_scales.size() <= 2 && spec.out_scales.size() <= 2,
               "vanilla OctConv has at most two scales");
  check_config(spec.cross_scale && spec.groups_mode == GOctConvSpec::Groups::full,
               "vanilla OctConv is the full cross-scale instance");
  return goctconv_forward(inputs, spec, weights);
}

MultiScaleFeature depthwise_goctconv(const MultiScaleFeature& inputs, const GOctConvSpec& spec,
                                     const GOctConvWeights& weights) {
  check_config(spec.groups_mode == GOctConvSpec::Groups::depthwise && !spec.cross_scale,
               "depthwise gOctConv requires depthwise groups and cross_scale=false");
  return goctconv_forward(inputs, spec, weights);
}

GOctConvWeights init_goctconv_weights(const GOctConvSpec& spec, Rng& rng) {
  spec.validate();
  GOctConvWeights ws;
  const bool dw = spec.groups_mode == GOctConvSpec::Groups::depthwise;
  for (const auto& [in, out] : goctconv_paths(spec)) {
    int fan_in = dw ? spec.kernel * spec.kernel
                    : spec.total_in_channels() * spec.kernel * spec.kernel;
    double stddev = std::sqrt(2.0 / double(fan_in));
    Shape shape = dw ? Shape{out.channels, 1, spec.kernel, spec.kernel}
                     : Shape{out.channels, in.channels, spec.kernel, spec.kernel};
    ws.w[{in.scale_factor, out.scale_factor}] = Tensor::randn(shape, rng, stddev, true);
  }
  return ws;
}

}  // namespace csnet
