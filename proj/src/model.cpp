#include "csnet/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace csnet {

namespace {

int round_mult4(double v) {
  int r = int(std::lround(v / 4.0)) * 4;
  return std::max(4, r);
}

std::vector<ScaleSpec> live_scales(std::initializer_list<ScaleSpec> scales) {
  std::vector<ScaleSpec> out;
  for (const auto& s : scales)
    if (s.channels > 0) out.push_back(s);
  return out;
}

}  // namespace

void CSNetConfig::validate() const {
  for (int i = 0; i < 3; ++i)
    check_config(stage_widths[i] <= stage_widths[i + 1], "stage widths must be nondecreasing");
  check_config(stage_widths[2] == stage_widths[3], "the last two stages must share one width");
  for (int w : stage_widths) check_config(w >= 4, "stage widths must be >= 4");
  check_config(width_multiplier >= 1.0, "width_multiplier must be >= 1");
  check_config(split.first >= 0 && split.second >= 0 && split.first + split.second > 0,
               "split ratio must be nonnegative and not 0/0");
  check_config(csf_channels >= 4 && csf_out_channels >= 4, "csf widths must be >= 4");
  check_config(!dilation_rates.empty(), "dilation_rates must not be empty");
  for (int d : dilation_rates) check_config(d >= 1, "dilation rates must be >= 1");
}

nlohmann::json csnet_config_to_json(const CSNetConfig& c) {
  return nlohmann::json{{"stage_widths", c.stage_widths},
                        {"stage_depths", CSNetConfig::stage_depths},
                        {"width_multiplier", c.width_multiplier},
                        {"split", {c.split.first, c.split.second}},
                        {"csf_channels", c.csf_channels},
                        {"csf_out_channels", c.csf_out_channels},
                        {"dilation_rates", c.dilation_rates}};
}

CSNetConfig csnet_config_from_json(const nlohmann::json& j) {
  CSNetConfig c;
  if (j.contains("stage_widths")) {
    auto w = j.at("stage_widths");
    check_config(w.size() == 4, "stage_widths must have 4 entries");
    for (int i = 0; i < 4; ++i) c.stage_widths[i] = w[i].get<int>();
  }
  if (j.contains("stage_depths")) {
    auto d = j.at("stage_depths").get<std::vector<int>>();
    check_config(d == std::vector<int>(CSNetConfig::stage_depths.begin(),
                                       CSNetConfig::stage_depths.end()),
                 "stage_depths are fixed at (3,4,6,4)");
  }
  if (j.contains("width_multiplier")) c.width_multiplier = j.at("width_multiplier").get<double>();
  if (j.contains("split")) {
    auto s = j.at("split");
    check_config(s.size() == 2, "split must be a pair");
    c.split = {s[0].get<int>(), s[1].get<int>()};
  }
  if (j.contains("csf_channels")) c.csf_channels = j.at("csf_channels").get<int>();
  if (j.contains("csf_out_channels")) c.csf_out_channels = j.at("csf_out_channels").get<int>();
  if (j.contains("dilation_rates")) c.dilation_rates = j.at("dilation_rates").get<std::vector<int>>();
  c.validate();
  return c;
}

int ModelArch::tap_channels(int i) const {
  const StageArch& s = stages[size_t(i + 1)];
  return s.blocks.back().total();
}

void ModelArch::validate() const {
  check_config(stem_out >= 1, "stem_out must be >= 1");
  for (int i = 0; i < 4; ++i) {
    check_config(stages[size_t(i)].hi_factor == 2 << i, "stage ladder must be 2,4,8,16");
    check_config(!stages[size_t(i)].blocks.empty(), "every stage needs blocks");
    for (const auto& b : stages[size_t(i)].blocks)
      check_config(b.ch_hi >= 0 && b.ch_lo >= 0 && b.total() >= 1,
                   "each block needs at least one channel");
  }
  int live_mids = 0;
  for (int m : csf.mid) {
    check_config(m >= 0, "csf mids must be >= 0");
    live_mids += m > 0 ? 1 : 0;
  }
  check_config(live_mids >= 1, "csf needs at least one live scale");
  check_config(csf.out_channels >= 1, "csf out_channels must be >= 1");
  check_config(!csf.dilations.empty(), "csf needs dilation rates");
}

ModelArch make_arch(const CSNetConfig& config) {
  config.validate();
  ModelArch a;
  a.stem_in = 3;
  const auto [sh, sl] = config.split;
  const int denom = sh + sl;
  for (int i = 0; i < 4; ++i) {
    int width = round_mult4(config.stage_widths[size_t(i)] * config.width_multiplier);
    check_config(width * sh % denom == 0,
                 "width " + std::to_string(width) + " is not divisible by split " +
                     std::to_string(sh) + "/" + std::to_string(sl));
    BlockArch b;
    b.ch_hi = width * sh / denom;
    b.ch_lo = width - b.ch_hi;
    a.stages[size_t(i)].hi_factor = 2 << i;
    a.stages[size_t(i)].blocks.assign(size_t(CSNetConfig::stage_depths[size_t(i)]), b);
  }
  a.stem_out = a.stages[0].blocks[0].total();
  int mid = round_mult4(config.csf_channels * config.width_multiplier);
  a.csf.mid = {mid, mid, mid};
  a.csf.out_channels = round_mult4(config.csf_out_channels * config.width_multiplier);
  a.csf.dilations = config.dilation_rates;
  a.validate();
  return a;
}

nlohmann::json arch_to_json(const ModelArch& a) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : a.stages) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : s.blocks) blocks.push_back({b.ch_hi, b.ch_lo});
    stages.push_back({{"hi_factor", s.hi_factor}, {"blocks", blocks}});
  }
  return nlohmann::json{{"stem_out", a.stem_out},
                        {"stages", stages},
                        {"csf",
                         {{"mid", a.csf.mid},
                          {"out_channels", a.csf.out_channels},
                          {"dilations", a.csf.dilations}}}};
}

ModelArch arch_from_json(const nlohmann::json& j) {
  ModelArch a;
  a.stem_out = j.at("stem_out").get<int>();
  auto stages = j.at("stages");
  check_config(stages.size() == 4, "arch must have 4 stages");
  for (int i = 0; i < 4; ++i) {
    a.stages[size_t(i)].hi_factor = stages[size_t(i)].at("hi_factor").get<int>();
    a.stages[size_t(i)].blocks.clear();
    for (const auto& b : stages[size_t(i)].at("blocks"))
      a.stages[size_t(i)].blocks.push_back({b[0].get<int>(), b[1].get<int>()});
  }
  auto c = j.at("csf");
  auto mid = c.at("mid").get<std::vector<int>>();
  check_config(mid.size() == 3, "csf mid must have 3 entries");
  std::copy(mid.begin(), mid.end(), a.csf.mid.begin());
  a.csf.out_channels = c.at("out_channels").get<int>();
  a.csf.dilations = c.at("dilations").get<std::vector<int>>();
  a.validate();
  return a;
}

// --- initialization ---------------------------------------------------------

namespace {

Tensor named_randn(const std::string& name, Shape shape, double stddev, uint64_t seed) {
  Rng rng(split_seed(seed, name));
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

BnAct make_bn_act(const std::string& name, int channels, bool dynamic) {
  BnAct a;
  a.name = name;
  a.bn = BatchNormParams::make(channels, 0.5);
  a.slope = Tensor::full({channels}, 0.25, true);
  a.dynamic_target = dynamic;
  return a;
}

GOctLayer make_pointwise(const std::string& name, const std::vector<ScaleSpec>& in,
                         const std::vector<ScaleSpec>& out, uint64_t seed) {
  GOctLayer l;
  l.spec.in_scales = in;
  l.spec.out_scales = out;
  l.spec.kernel = 1;
  l.spec.cross_scale = true;
  l.spec.groups_mode = GOctConvSpec::Groups::full;
  l.spec.validate();
  int fan_in = l.spec.total_in_channels();
  for (const auto& [i, o] : goctconv_paths(l.spec))
    l.w.w[{i.scale_factor, o.scale_factor}] =
        named_randn(name + "." + path_key(i.scale_factor, o.scale_factor),
                    {o.channels, i.channels, 1, 1}, std::sqrt(2.0 / fan_in), seed);
  return l;
}

GOctLayer make_depthwise(const std::string& name, const std::vector<ScaleSpec>& scales,
                         uint64_t seed) {
  GOctLayer l;
  l.spec.in_scales = scales;
  l.spec.out_scales = scales;
  l.spec.kernel = 3;
  l.spec.cross_scale = false;
  l.spec.groups_mode = GOctConvSpec::Groups::depthwise;
  l.spec.validate();
  for (const auto& [i, o] : goctconv_paths(l.spec))
    l.w.w[{i.scale_factor, o.scale_factor}] =
        named_randn(name + "." + path_key(i.scale_factor, o.scale_factor),
                    {o.channels, 1, 3, 3}, std::sqrt(2.0 / 9.0), seed);
  return l;
}

std::vector<ScaleSpec> block_scales(const BlockArch& b, int hi_factor) {
  return live_scales({{hi_factor, b.ch_hi}, {hi_factor * 2, b.ch_lo}});
}

}  // namespace

CSNetParams init_csnet(const ModelArch& arch, uint64_t seed) {
  arch.validate();
  CSNetParams p;
  p.arch = arch;

  p.stem.w = named_randn("stem.w", {arch.stem_out, arch.stem_in, 3, 3},
                         std::sqrt(2.0 / (arch.stem_in * 9.0)), seed);
  p.stem.act = make_bn_act("stem.bn", arch.stem_out, /*dynamic=*/false);

  std::vector<ScaleSpec> producer = {{2, arch.stem_out}};
  for (int s = 0; s < 4; ++s) {
    const StageArch& st = arch.stages[size_t(s)];
    for (size_t bi = 0; bi < st.blocks.size(); ++bi) {
      const BlockArch& ba = st.blocks[bi];
      std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(bi);
      BlockParams bp;
      std::vector<ScaleSpec> scales = block_scales(ba, st.hi_factor);
      for (const auto& sc : scales) bp.factors.push_back(sc.scale_factor);
      bp.pw = make_pointwise(prefix + ".pw", producer, scales, seed);
      bp.dw1 = make_depthwise(prefix + ".dw1", scales, seed);
      bp.dw2 = make_depthwise(prefix + ".dw2", scales, seed);
      for (const auto& sc : scales) {
        std::string f = ".f" + std::to_string(sc.scale_factor);
        bp.act1.push_back(make_bn_act(prefix + ".bn1" + f, sc.channels, true));
        bp.act2.push_back(make_bn_act(prefix + ".bn2" + f, sc.channels, true));
        bp.act3.push_back(make_bn_act(prefix + ".bn3" + f, sc.channels, true));
      }
      p.stages[size_t(s)].push_back(std::move(bp));
      producer = scales;
    }
    // the next stage sees this stage's output one octave down
    for (auto& sc : producer) sc.scale_factor *= 2;
  }

  // cross-stages fusion head
  std::vector<ScaleSpec> taps;
  for (int i = 0; i < 3; ++i)
    taps.push_back({arch.csf.tap_factor[size_t(i)], arch.tap_channels(i)});
  std::vector<ScaleSpec> mids;
  for (int i = 0; i < 3; ++i)
    if (arch.csf.mid[size_t(i)] > 0)
      mids.push_back({arch.csf.tap_factor[size_t(i)], arch.csf.mid[size_t(i)]});
  p.csf.fuse1 = make_pointwise("csf.fuse1", taps, mids, seed);
  for (const auto& m : mids) {
    std::string f = ".f" + std::to_string(m.scale_factor);
    p.csf.mid_factors.push_back(m.scale_factor);
    p.csf.act_a.push_back(make_bn_act("csf.bn_a" + f, m.channels, true));
    std::vector<Tensor> rates;
    for (int d : arch.csf.dilations)
      rates.push_back(named_randn("csf.dil" + f + ".d" + std::to_string(d) + ".w",
                                  {m.channels, 1, 3, 3}, std::sqrt(2.0 / 9.0), seed));
    p.csf.dil_w.push_back(std::move(rates));
    p.csf.act_b.push_back(make_bn_act("csf.bn_b" + f, m.channels, true));
  }
  p.csf.fuse2 = make_pointwise("csf.fuse2", mids,
                               {{arch.csf.tap_factor[0], arch.csf.out_channels}}, seed);
  p.csf.act_c = make_bn_act("csf.bn_c.f4", arch.csf.out_channels, true);
  p.csf.head_w = named_randn("csf.head.w", {1, arch.csf.out_channels, 1, 1},
                             std::sqrt(2.0 / arch.csf.out_channels), seed);
  p.csf.head_b = Tensor::zeros({1}, true);
  return p;
}

// --- forward ----------------------------------------------------------------

namespace {

void capture_stats(const BnAct& a, const Tensor& x, const Tensor& y, ForwardStats* stats) {
  if (!stats || !a.dynamic_target) return;
  const bool from_out = stats->metric_source == MetricSource::bn_output;
  const Tensor& src = from_out ? y : x;
  const int64_t N = src.dim(0), C = src.dim(1), HW = src.dim(2) * src.dim(3);
  if (stats->want_metric) {
    Array s = Array::Zero(C);
    const double* p = src.ptr();
    for (int64_t c = 0; c < C; ++c) {
      // per-sample GAPs of this channel
      double gsum = 0;
      Array gaps(N);
      for (int64_t n = 0; n < N; ++n) {
        const double* m = p + (n * C + c) * HW;
        double acc = 0;
        for (int64_t i = 0; i < HW; ++i) acc += m[i];
        gaps[n] = acc / double(HW);
        gsum += gaps[n];
      }
      if (stats->metric_source == MetricSource::bn_normalized) {
        // GAP of xhat: center per-sample GAPs by the batch mean and divide
        // by the channel's batch standard deviation
        double mean = gsum / double(N);
        double sumsq = 0;
        for (int64_t n = 0; n < N; ++n) {
          const double* m = p + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) sumsq += m[i] * m[i];
        }
        double var = std::max(0.0, sumsq / double(N * HW) - mean * mean);
        double inv = 1.0 / std::sqrt(var + a.bn.eps);
        double acc = 0;
        for (int64_t n = 0; n < N; ++n) {
          double gap = (gaps[n] - mean) * inv;
          acc += stats->metric_abs ? std::abs(gap) : gap;
        }
        s[c] = acc / double(N);
      } else {
        double acc = 0;
        for (int64_t n = 0; n < N; ++n) acc += stats->metric_abs ? std::abs(gaps[n]) : gaps[n];
        s[c] = acc / double(N);
      }
    }
    stats->metric[a.name] = std::move(s);
  }
  if (stats->want_channel_std) {
    Array sd = Array::Zero(C);
    const double* p = y.ptr();
    const int64_t M = N * HW;
    for (int64_t c = 0; c < C; ++c) {
      double sum = 0, sumsq = 0;
      for (int64_t n = 0; n < N; ++n) {
        const double* m = p + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          sum += m[i];
          sumsq += m[i] * m[i];
        }
      }
      double mean = sum / double(M);
      sd[c] = std::sqrt(std::max(0.0, sumsq / double(M) - mean * mean));
    }
    stats->channel_std[a.name] = std::move(sd);
  }
}

Tensor bn_act(BnAct& a, const Tensor& x, bool training, ForwardStats* stats) {
  Tensor y = batch_norm(x, a.bn, training);
  capture_stats(a, x, y, stats);
  return prelu(y, a.slope);
}

MultiScaleFeature msf_pool2(const MultiScaleFeature& msf) {
  MultiScaleFeature out;
  for (const auto& [f, t] : msf.entries) out.entries.push_back({f * 2, avg_pool2(t)});
  return out;
}

Tensor merge_tap(const MultiScaleFeature& msf, int hi_factor) {
  std::vector<Tensor> parts;
  for (const auto& [f, t] : msf.entries) {
    if (f == hi_factor)
      parts.push_back(t);
    else
      parts.push_back(upsample_nearest(t, f / hi_factor));
  }
  return concat_channels(parts);
}

}  // namespace

MultiScaleFeature ilblock_forward(BlockParams& block, const MultiScaleFeature& x, bool training,
                                  ForwardStats* stats) {
  MultiScaleFeature t = goctconv_forward(x, block.pw.spec, block.pw.w);
  for (size_t i = 0; i < t.entries.size(); ++i)
    t.entries[i].second = bn_act(block.act1[i], t.entries[i].second, training, stats);
  t = goctconv_forward(t, block.dw1.spec, block.dw1.w);
  for (size_t i = 0; i < t.entries.size(); ++i)
    t.entries[i].second = bn_act(block.act2[i], t.entries[i].second, training, stats);
  t = goctconv_forward(t, block.dw2.spec, block.dw2.w);
  for (size_t i = 0; i < t.entries.size(); ++i)
    t.entries[i].second = bn_act(block.act3[i], t.entries[i].second, training, stats);
  return t;
}

SaliencyOutput csnet_forward(CSNetParams& params, const Tensor& image, bool training,
                             ForwardStats* stats, std::vector<std::pair<int, Tensor>>* taps_out) {
  check_config(image.ndim() == 4 && image.dim(1) == params.arch.stem_in,
               "csnet expects [N,3,H,W] input, got " + shape_str(image.shape()));
  const int64_t H = image.dim(2), W = image.dim(3);
  check_config(H % ModelArch::total_stride == 0 && W % ModelArch::total_stride == 0 && H > 0,
               "input spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                   " must be divisible by " + std::to_string(ModelArch::total_stride));

  Conv2dOpts stem_opts;
  stem_opts.stride = 2;
  stem_opts.padding = 1;
  Tensor x = conv2d(image, params.stem.w, {}, stem_opts);
  x = bn_act(params.stem.act, x, training, stats);

  MultiScaleFeature msf;
  msf.entries = {{2, x}};
  std::vector<std::pair<int, Tensor>> taps;
  for (int s = 0; s < 4; ++s) {
    if (s > 0) msf = msf_pool2(msf);
    for (auto& block : params.stages[size_t(s)]) msf = ilblock_forward(block, msf, training, stats);
    if (s >= 1)
      taps.push_back({params.arch.stages[size_t(s)].hi_factor,
                      merge_tap(msf, params.arch.stages[size_t(s)].hi_factor)});
  }
  if (taps_out) *taps_out = taps;

  MultiScaleFeature tin;
  for (auto& [f, t] : taps) tin.entries.push_back({f, t});
  MultiScaleFeature mid = goctconv_forward(tin, params.csf.fuse1.spec, params.csf.fuse1.w);
  for (size_t i = 0; i < mid.entries.size(); ++i) {
    Tensor m = bn_act(params.csf.act_a[i], mid.entries[i].second, training, stats);
    // granular multi-scale context: parallel dilated depthwise convs, summed
    std::vector<Tensor> branches;
    for (size_t r = 0; r < params.csf.dil_w[i].size(); ++r) {
      int d = params.arch.csf.dilations[r];
      Conv2dOpts o;
      o.padding = d;
      o.dilation = d;
      o.groups = int(m.dim(1));
      branches.push_back(conv2d(m, params.csf.dil_w[i][r], {}, o));
    }
    mid.entries[i].second = bn_act(params.csf.act_b[i], add_n(branches), training, stats);
  }
  MultiScaleFeature fused = goctconv_forward(mid, params.csf.fuse2.spec, params.csf.fuse2.w);
  Tensor y = bn_act(params.csf.act_c, fused.entries[0].second, training, stats);
  Tensor logits = conv2d(y, params.csf.head_w, params.csf.head_b, {});
  logits = upsample_nearest(logits, params.arch.csf.tap_factor[0]);

  SaliencyOutput out;
  out.logits = logits;
  return out;
}

Tensor probability_map(const Tensor& logits) {
  NoGradGuard g;
  return sigmoid(logits.detach());
}

// --- enumeration ------------------------------------------------------------

namespace {

void emit_bn_act(const BnAct& a, std::vector<NamedParam>& out) {
  std::string prelu_name = a.name;
  size_t pos = prelu_name.find(".bn");
  if (pos != std::string::npos) prelu_name.replace(pos + 1, 2, "prelu");
  out.push_back({a.name + ".gamma", a.bn.gamma, ParamKind::bn_gamma, a.dynamic_target, a.name});
  out.push_back({a.name + ".beta", a.bn.beta, ParamKind::bn_beta, false, a.name});
  out.push_back({prelu_name, a.slope, ParamKind::prelu_slope, false, ""});
}

void emit_goct(const std::string& prefix, const GOctLayer& l, std::vector<NamedParam>& out) {
  for (const auto& [key, t] : l.w.w)
    out.push_back({prefix + "." + path_key(key.first, key.second), t, ParamKind::conv_weight,
                   false, ""});
}

template <typename Fn>
void for_each_bn_act(CSNetParams& p, Fn&& fn) {
  fn(p.stem.act);
  for (auto& stage : p.stages)
    for (auto& b : stage) {
      for (auto& a : b.act1) fn(a);
      for (auto& a : b.act2) fn(a);
      for (auto& a : b.act3) fn(a);
    }
  for (auto& a : p.csf.act_a) fn(a);
  for (auto& a : p.csf.act_b) fn(a);
  fn(p.csf.act_c);
}

}  // namespace

std::vector<NamedParam> named_params(CSNetParams& p) {
  std::vector<NamedParam> out;
  out.push_back({"stem.w", p.stem.w, ParamKind::conv_weight, false, ""});
  emit_bn_act(p.stem.act, out);
  for (int s = 0; s < 4; ++s) {
    for (size_t bi = 0; bi < p.stages[size_t(s)].size(); ++bi) {
      BlockParams& b = p.stages[size_t(s)][bi];
      std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(bi);
      emit_goct(prefix + ".pw", b.pw, out);
      for (auto& a : b.act1) emit_bn_act(a, out);
      emit_goct(prefix + ".dw1", b.dw1, out);
      for (auto& a : b.act2) emit_bn_act(a, out);
      emit_goct(prefix + ".dw2", b.dw2, out);
      for (auto& a : b.act3) emit_bn_act(a, out);
    }
  }
  emit_goct("csf.fuse1", p.csf.fuse1, out);
  for (size_t i = 0; i < p.csf.mid_factors.size(); ++i) {
    std::string f = ".f" + std::to_string(p.csf.mid_factors[i]);
    emit_bn_act(p.csf.act_a[i], out);
    for (size_t r = 0; r < p.csf.dil_w[i].size(); ++r)
      out.push_back({"csf.dil" + f + ".d" + std::to_string(p.arch.csf.dilations[r]) + ".w",
                     p.csf.dil_w[i][r], ParamKind::conv_weight, false, ""});
    emit_bn_act(p.csf.act_b[i], out);
  }
  emit_goct("csf.fuse2", p.csf.fuse2, out);
  emit_bn_act(p.csf.act_c, out);
  out.push_back({"csf.head.w", p.csf.head_w, ParamKind::conv_weight, false, ""});
  out.push_back({"csf.head.b", p.csf.head_b, ParamKind::bias, false, ""});
  return out;
}

std::vector<std::pair<std::string, Array*>> named_buffers(CSNetParams& p) {
  std::vector<std::pair<std::string, Array*>> out;
  for_each_bn_act(p, [&](BnAct& a) {
    out.push_back({a.name + ".mean", &a.bn.running_mean});
    out.push_back({a.name + ".var", &a.bn.running_var});
  });
  return out;
}

std::vector<BnAct*> all_bn_layers(CSNetParams& p) {
  std::vector<BnAct*> out;
  for_each_bn_act(p, [&](BnAct& a) { out.push_back(&a); });
  return out;
}

int64_t count_params_actual(const CSNetParams& p) {
  int64_t n = 0;
  for (const auto& np : named_params(const_cast<CSNetParams&>(p))) n += np.tensor.numel();
  return n;
}

}  // namespace csnet
