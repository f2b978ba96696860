#include "csnet/complexity.hpp"

#include <cinttypes>
#include <cstdio>

#include <nlohmann/json.hpp>

namespace csnet {

namespace {

struct Acc {
  int64_t params = 0, macs = 0, elem = 0;
};

// Cost of one gOctConv at the forward pass's exact path resolutions:
// pooling chains before downward convs, convolution at the source scale
// before upward resampling.
void goct_cost(const GOctLayer& l, int64_t H, int64_t W, Acc& a) {
  const bool dw = l.spec.groups_mode == GOctConvSpec::Groups::depthwise;
  const int k = l.spec.kernel;
  for (const auto& [in, out] : goctconv_paths(l.spec)) {
    if (out.scale_factor > in.scale_factor) {
      for (int f = in.scale_factor * 2; f <= out.scale_factor; f *= 2)
        a.elem += int64_t(in.channels) * (H / f) * (W / f);
      int64_t res = (H / out.scale_factor) * (W / out.scale_factor);
      a.macs += int64_t(out.channels) * res * (dw ? 1 : in.channels) * k * k;
    } else if (out.scale_factor < in.scale_factor) {
      int64_t res = (H / in.scale_factor) * (W / in.scale_factor);
      a.macs += int64_t(out.channels) * res * (dw ? 1 : in.channels) * k * k;
      a.elem += int64_t(out.channels) * (H / out.scale_factor) * (W / out.scale_factor);
    } else {
      int64_t res = (H / in.scale_factor) * (W / in.scale_factor);
      a.macs += int64_t(out.channels) * res * (dw ? 1 : in.channels) * k * k;
    }
  }
  for (const auto& [key, t] : l.w.w) a.params += t.numel();
}

void bn_act_cost(const BnAct& act, int64_t res, Acc& a) {
  int64_t c = act.bn.channels();
  a.elem += 2 * c * res;  // BN + PReLU, one op per element each
  a.params += act.bn.gamma.numel() + act.bn.beta.numel() + act.slope.numel();
}

}  // namespace

ComplexityReport count_complexity(const ModelArch& arch, int64_t input_h, int64_t input_w,
                                  bool flops_double) {
  check_config(input_h % ModelArch::total_stride == 0 && input_w % ModelArch::total_stride == 0,
               "input size must be divisible by " + std::to_string(ModelArch::total_stride));
  CSNetParams p = init_csnet(arch, 0);
  const int64_t H = input_h, W = input_w;

  ComplexityReport rep;
  rep.input_h = input_h;
  rep.input_w = input_w;
  rep.flops_double = flops_double;

  {
    Acc a;
    a.params += p.stem.w.numel();
    a.macs += int64_t(arch.stem_out) * (H / 2) * (W / 2) * arch.stem_in * 9;
    bn_act_cost(p.stem.act, (H / 2) * (W / 2), a);
    rep.items.push_back({"stem", a.params, a.macs, a.elem});
  }

  for (int s = 0; s < 4; ++s) {
    Acc a;
    if (s > 0) {
      // between-stage downsampling of the previous stage's live branches
      const BlockArch& prev = arch.stages[size_t(s - 1)].blocks.back();
      int f = arch.stages[size_t(s)].hi_factor;
      if (prev.ch_hi > 0) a.elem += int64_t(prev.ch_hi) * (H / f) * (W / f);
      if (prev.ch_lo > 0) a.elem += int64_t(prev.ch_lo) * (H / (2 * f)) * (W / (2 * f));
    }
    for (const auto& b : p.stages[size_t(s)]) {
      goct_cost(b.pw, H, W, a);
      goct_cost(b.dw1, H, W, a);
      goct_cost(b.dw2, H, W, a);
      for (size_t i = 0; i < b.factors.size(); ++i) {
        int64_t res = (H / b.factors[i]) * (W / b.factors[i]);
        bn_act_cost(b.act1[i], res, a);
        bn_act_cost(b.act2[i], res, a);
        bn_act_cost(b.act3[i], res, a);
      }
    }
    rep.items.push_back({"stage" + std::to_string(s + 1), a.params, a.macs, a.elem});
  }

  {
    Acc a;
    // tap merges: low branches are upsampled to the stage resolution
    for (int i = 0; i < 3; ++i) {
      const BlockArch& last = arch.stages[size_t(i + 1)].blocks.back();
      int f = arch.csf.tap_factor[size_t(i)];
      if (last.ch_lo > 0 && last.ch_hi + last.ch_lo > last.ch_hi)
        a.elem += int64_t(last.ch_lo) * (H / f) * (W / f);
    }
    goct_cost(p.csf.fuse1, H, W, a);
    for (size_t i = 0; i < p.csf.mid_factors.size(); ++i) {
      int f = p.csf.mid_factors[i];
      int64_t res = (H / f) * (W / f);
      int64_t c = arch.csf.mid[size_t(std::find(arch.csf.tap_factor.begin(),
                                                arch.csf.tap_factor.end(), f) -
                                      arch.csf.tap_factor.begin())];
      bn_act_cost(p.csf.act_a[i], res, a);
      for (const auto& t : p.csf.dil_w[i]) {
        a.macs += c * res * 9;  // depthwise 3x3, any dilation
        a.params += t.numel();
      }
      bn_act_cost(p.csf.act_b[i], res, a);
    }
    goct_cost(p.csf.fuse2, H, W, a);
    int64_t head_res = (H / arch.csf.tap_factor[0]) * (W / arch.csf.tap_factor[0]);
    bn_act_cost(p.csf.act_c, head_res, a);
    a.macs += head_res * arch.csf.out_channels;  // 1x1 prediction conv
    a.params += p.csf.head_w.numel() + p.csf.head_b.numel();
    a.elem += H * W;  // final upsample to the input resolution
    rep.items.push_back({"csf", a.params, a.macs, a.elem});
  }
  return rep;
}

int64_t ComplexityReport::params_total() const {
  int64_t v = 0;
  for (const auto& i : items) v += i.params;
  return v;
}

int64_t ComplexityReport::macs_total() const {
  int64_t v = 0;
  for (const auto& i : items) v += i.macs;
  return v;
}

int64_t ComplexityReport::elem_total() const {
  int64_t v = 0;
  for (const auto& i : items) v += i.elem_ops;
  return v;
}

int64_t ComplexityReport::flops_total() const {
  return (flops_double ? 2 : 1) * macs_total() + elem_total();
}

int64_t ComplexityReport::extractor_params() const {
  int64_t v = 0;
  for (const auto& i : items)
    if (i.module != "csf") v += i.params;
  return v;
}

int64_t ComplexityReport::extractor_flops() const {
  int64_t macs = 0, elem = 0;
  for (const auto& i : items)
    if (i.module != "csf") {
      macs += i.macs;
      elem += i.elem_ops;
    }
  return (flops_double ? 2 : 1) * macs + elem;
}

int64_t count_params(const ModelArch& arch) {
  CSNetParams p = init_csnet(arch, 0);
  return count_params_actual(p);
}

int64_t count_flops(const ModelArch& arch, int64_t input_hw, bool flops_double) {
  return count_complexity(arch, input_hw, input_hw, flops_double).flops_total();
}

nlohmann::json complexity_to_json(const ComplexityReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& i : r.items)
    items.push_back({{"module", i.module},
                     {"params", i.params},
                     {"macs", i.macs},
                     {"elem_ops", i.elem_ops}});
  return nlohmann::json{{"input", {r.input_h, r.input_w}},
                        {"flops_convention", r.flops_double ? "2xMACs+elem" : "MACs+elem"},
                        {"items", items},
                        {"params_total", r.params_total()},
                        {"macs_total", r.macs_total()},
                        {"elem_ops_total", r.elem_total()},
                        {"flops_total", r.flops_total()},
                        {"extractor_params", r.extractor_params()},
                        {"extractor_flops", r.extractor_flops()}};
}

namespace {

std::string flops_str(int64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3fG", double(v) / 1e9);
  return buf;
}

std::string params_str(int64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fK", double(v) / 1e3);
  return buf;
}

}  // namespace

std::string complexity_table(const ComplexityReport& r) {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof line, "%-10s %12s %14s %14s\n", "module", "PARM.", "MACs", "elem");
  out += line;
  for (const auto& i : r.items) {
    std::snprintf(line, sizeof line, "%-10s %12" PRId64 " %14" PRId64 " %14" PRId64 "\n",
                  i.module.c_str(), i.params, i.macs, i.elem_ops);
    out += line;
  }
  std::snprintf(line, sizeof line, "%-10s %12" PRId64 " %14" PRId64 " %14" PRId64 "  (FLOPs %s @%" PRId64 ")\n",
                "total", r.params_total(), r.macs_total(), r.elem_total(),
                flops_str(r.flops_total()).c_str(), r.input_h);
  out += line;
  return out;
}

std::vector<SweepRow> sweep(const CSNetConfig& base, const std::string& axis, int64_t input_hw,
                            bool flops_double) {
  std::vector<SweepRow> rows;
  if (axis == "split") {
    for (auto [h, l] : {std::pair{1, 0}, {3, 1}, {5, 5}, {1, 3}, {0, 1}}) {
      CSNetConfig c = base;
      c.split = {h, l};
      rows.push_back({std::to_string(h) + "/" + std::to_string(l),
                      count_complexity(make_arch(c), input_hw, input_hw, flops_double)});
    }
  } else if (axis == "width") {
    for (double k : {1.0, 1.2, 1.5, 1.8, 2.0}) {
      CSNetConfig c = base;
      c.width_multiplier = k;
      char label[16];
      std::snprintf(label, sizeof label, "x%.1f", k);
      rows.push_back({label, count_complexity(make_arch(c), input_hw, input_hw, flops_double)});
    }
  } else if (axis.empty()) {
    // single row
    rows.push_back({"-", count_complexity(make_arch(base), input_hw, input_hw, flops_double)});
  } else {
    throw config_error("unknown sweep axis: " + axis + " (expected 'split' or 'width')");
  }
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows, bool with_extractor) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %-6s %10s %10s\n", "Method", "", "PARM.", "FLOPs");
  out += line;
  if (with_extractor) {
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-12s %-6s %10s %10s\n", "Extractor", r.label.c_str(),
                    params_str(r.report.extractor_params()).c_str(),
                    flops_str(r.report.extractor_flops()).c_str());
      out += line;
    }
  }
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %-6s %10s %10s\n", "CSNet", r.label.c_str(),
                  params_str(r.report.params_total()).c_str(),
                  flops_str(r.report.flops_total()).c_str());
    out += line;
  }
  return out;
}

nlohmann::json sweep_to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = complexity_to_json(r.report);
    j["label"] = r.label;
    arr.push_back(j);
  }
  return arr;
}

}  // namespace csnet
