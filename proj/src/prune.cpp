#include "csnet/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

#include "csnet/complexity.hpp"

namespace csnet {

PruneCriterion criterion_from_string(const std::string& s) {
  if (s == "bn_gamma") return PruneCriterion::bn_gamma;
  if (s == "l1_norm") return PruneCriterion::l1_norm;
  if (s == "geometric_median") return PruneCriterion::geometric_median;
  throw config_error("unknown pruning criterion: " + s);
}

std::string criterion_to_string(PruneCriterion c) {
  switch (c) {
    case PruneCriterion::bn_gamma: return "bn_gamma";
    case PruneCriterion::l1_norm: return "l1_norm";
    case PruneCriterion::geometric_median: return "geometric_median";
  }
  return "?";
}

Array geometric_median(const std::vector<Array>& points, double tol) {
  check_config(!points.empty(), "geometric_median: no points");
  const int64_t dim = points[0].size();
  Array y = Array::Zero(dim);
  for (const auto& p : points) y += p;
  y /= double(points.size());
  for (int iter = 0; iter < 5000; ++iter) {
    Array num = Array::Zero(dim);
    double den = 0;
    for (const auto& p : points) {
      double d = std::sqrt((p - y).square().sum());
      d = std::max(d, 1e-12);
      num += p / d;
      den += 1.0 / d;
    }
    Array y_new = num / den;
    double move = std::sqrt((y_new - y).square().sum());
    y = y_new;
    if (move < tol) break;
  }
  return y;
}

// ---------------------------------------------------------------------------
// scoring

namespace {

// Kernel slices that produce each channel of a BN layer, flattened; the
// unit network-slimming, filter-norm and geometric-median criteria share.
std::vector<Array> producer_slices(const GOctLayer& layer, int out_factor) {
  std::vector<Array> out;
  int channels = 0;
  for (const auto& s : layer.spec.out_scales)
    if (s.scale_factor == out_factor) channels = s.channels;
  check_config(channels > 0, "producer_slices: dead scale");
  for (int c = 0; c < channels; ++c) {
    std::vector<double> vals;
    for (const auto& [key, t] : layer.w.w) {
      if (key.second != out_factor) continue;
      int64_t per_out = t.numel() / t.dim(0);
      for (int64_t i = 0; i < per_out; ++i) vals.push_back(t.data()[c * per_out + i]);
    }
    Array a(int64_t(vals.size()));
    std::copy(vals.begin(), vals.end(), a.data());
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<Array> dilated_slices(const std::vector<Tensor>& rates, int channels) {
  std::vector<Array> out;
  for (int c = 0; c < channels; ++c) {
    Array a(int64_t(rates.size()) * 9);
    int64_t o = 0;
    for (const auto& t : rates)
      for (int64_t i = 0; i < 9; ++i) a[o++] = t.data()[c * 9 + i];
    out.push_back(std::move(a));
  }
  return out;
}

Array score_from_slices(const std::vector<Array>& slices, PruneCriterion crit) {
  Array s(int64_t(slices.size()));
  if (crit == PruneCriterion::l1_norm) {
    for (size_t c = 0; c < slices.size(); ++c) s[int64_t(c)] = slices[c].abs().sum();
  } else {
    Array med = geometric_median(slices);
    for (size_t c = 0; c < slices.size(); ++c)
      s[int64_t(c)] = std::sqrt((slices[c] - med).square().sum());
  }
  return s;
}

struct LayerSlices {
  const BnAct* act;
  int scale_factor;
  std::vector<Array> slices;
};

std::vector<LayerSlices> prunable_layers(CSNetParams& m) {
  std::vector<LayerSlices> out;
  for (int s = 0; s < 4; ++s)
    for (auto& b : m.stages[size_t(s)])
      for (size_t k = 0; k < b.factors.size(); ++k) {
        int f = b.factors[k];
        out.push_back({&b.act1[k], f, producer_slices(b.pw, f)});
        out.push_back({&b.act2[k], f, producer_slices(b.dw1, f)});
        out.push_back({&b.act3[k], f, producer_slices(b.dw2, f)});
      }
  for (size_t i = 0; i < m.csf.mid_factors.size(); ++i) {
    int f = m.csf.mid_factors[i];
    out.push_back({&m.csf.act_a[i], f, producer_slices(m.csf.fuse1, f)});
    out.push_back({&m.csf.act_b[i], f,
                   dilated_slices(m.csf.dil_w[i], m.csf.act_b[i].bn.channels())});
  }
  out.push_back({&m.csf.act_c, m.arch.csf.tap_factor[0],
                 producer_slices(m.csf.fuse2, m.arch.csf.tap_factor[0])});
  return out;
}

}  // namespace

std::vector<ChannelImportance> score_channels(CSNetParams& model, PruneCriterion criterion) {
  std::vector<ChannelImportance> out;
  for (auto& l : prunable_layers(model)) {
    ChannelImportance ci;
    ci.layer = l.act->name;
    ci.scale_factor = l.scale_factor;
    ci.criterion = criterion;
    if (criterion == PruneCriterion::bn_gamma)
      ci.score = l.act->bn.gamma.data().abs();
    else
      ci.score = score_from_slices(l.slices, criterion);
    out.push_back(std::move(ci));
  }
  return out;
}

// ---------------------------------------------------------------------------
// selection

PruneMasks select_prunable(const std::vector<ChannelImportance>& scores, double tau) {
  check_config(tau > 0, "prune threshold tau must be > 0");
  PruneMasks m;
  for (const auto& ci : scores) {
    std::vector<char> keep(size_t(ci.score.size()));
    int64_t kept = 0;
    for (int64_t i = 0; i < ci.score.size(); ++i) {
      keep[size_t(i)] = ci.score[i] >= tau ? 1 : 0;
      kept += keep[size_t(i)];
    }
    if (kept == 0) {
      int64_t best = 0;
      for (int64_t i = 1; i < ci.score.size(); ++i)
        if (ci.score[i] > ci.score[best]) best = i;
      keep[size_t(best)] = 1;
      m.forced.push_back(ci.layer);
    }
    m.keep[ci.layer] = std::move(keep);
  }
  return m;
}

namespace {

// Chain key of a BN layer: the three BNs of an extractor block scale and
// the two CSF mid BNs prune jointly, so size-targeted selection scores
// whole chains by their weakest link.
std::string chain_key(const std::string& bn_layer) {
  auto pos = bn_layer.find(".bn");
  if (pos == std::string::npos) return bn_layer;
  std::string head = bn_layer.substr(0, pos);
  std::string tail = bn_layer.substr(bn_layer.find('.', pos + 1));  // ".fF" or ""
  if (head == "csf") {
    std::string which = bn_layer.substr(pos + 1, bn_layer.find('.', pos + 1) - pos - 1);
    if (which == "bn_c") return "csf.out";
    return "csf.mid" + tail;
  }
  return head + tail;
}

}  // namespace

PruneMasks select_top_fraction(const std::vector<ChannelImportance>& scores, double keep_frac) {
  check_config(keep_frac > 0 && keep_frac <= 1, "keep fraction must be in (0,1]");
  // weakest link across each chain's layers
  std::map<std::string, Array> chain_score;
  for (const auto& ci : scores) {
    std::string key = chain_key(ci.layer);
    auto it = chain_score.find(key);
    if (it == chain_score.end())
      chain_score[key] = ci.score;
    else
      it->second = it->second.min(ci.score);
  }
  std::map<std::string, std::vector<char>> chain_keep;
  for (const auto& [key, score] : chain_score) {
    const int64_t c = score.size();
    int64_t k = std::max<int64_t>(1, int64_t(std::ceil(keep_frac * double(c))));
    std::vector<int64_t> idx(static_cast<size_t>(c));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int64_t a, int64_t b) { return score[a] > score[b]; });
    std::vector<char> keep(size_t(c), 0);
    for (int64_t i = 0; i < k; ++i) keep[size_t(idx[size_t(i)])] = 1;
    chain_keep[key] = std::move(keep);
  }
  PruneMasks m;
  for (const auto& ci : scores) m.keep[ci.layer] = chain_keep.at(chain_key(ci.layer));
  return m;
}

// ---------------------------------------------------------------------------
// chain planning

namespace {

struct ChainKeep {
  std::array<std::vector<std::vector<std::vector<char>>>, 4> block;  // [stage][block][scale]
  std::vector<std::vector<char>> mid;                                // per mid factor
  std::vector<char> out;
  std::vector<std::string> forced;
};

const std::vector<char>* find_mask(const PruneMasks& m, const std::string& key) {
  auto it = m.keep.find(key);
  return it == m.keep.end() ? nullptr : &it->second;
}

std::vector<char> and_masks(int channels, std::initializer_list<const std::vector<char>*> masks) {
  std::vector<char> keep(size_t(channels), 1);
  for (const auto* m : masks) {
    if (!m) continue;
    check_config(int(m->size()) == channels, "mask length mismatch");
    for (int i = 0; i < channels; ++i) keep[size_t(i)] &= (*m)[size_t(i)];
  }
  return keep;
}

int64_t count_kept(const std::vector<char>& v) {
  int64_t n = 0;
  for (char c : v) n += c;
  return n;
}

ChainKeep plan_chains(CSNetParams& m, const PruneMasks& masks) {
  ChainKeep plan;
  for (int s = 0; s < 4; ++s) {
    for (auto& b : m.stages[size_t(s)]) {
      std::vector<std::vector<char>> per_scale;
      int64_t total = 0;
      for (size_t k = 0; k < b.factors.size(); ++k) {
        int ch = b.act1[k].bn.channels();
        auto keep = and_masks(ch, {find_mask(masks, b.act1[k].name),
                                   find_mask(masks, b.act2[k].name),
                                   find_mask(masks, b.act3[k].name)});
        total += count_kept(keep);
        per_scale.push_back(std::move(keep));
      }
      if (total == 0) {
        // the joint chain lost everything; keep the strongest channel
        double best = -1;
        size_t bk = 0;
        int64_t bc = 0;
        for (size_t k = 0; k < b.factors.size(); ++k)
          for (int64_t c = 0; c < b.act1[k].bn.gamma.numel(); ++c) {
            double v = std::min({std::abs(b.act1[k].bn.gamma.data()[c]),
                                 std::abs(b.act2[k].bn.gamma.data()[c]),
                                 std::abs(b.act3[k].bn.gamma.data()[c])});
            if (v > best) {
              best = v;
              bk = k;
              bc = c;
            }
          }
        per_scale[bk][size_t(bc)] = 1;
        plan.forced.push_back(b.act1[bk].name);
      }
      plan.block[size_t(s)].push_back(std::move(per_scale));
    }
  }
  int64_t mid_total = 0;
  for (size_t i = 0; i < m.csf.mid_factors.size(); ++i) {
    int ch = m.csf.act_a[i].bn.channels();
    auto keep = and_masks(ch, {find_mask(masks, m.csf.act_a[i].name),
                               find_mask(masks, m.csf.act_b[i].name)});
    mid_total += count_kept(keep);
    plan.mid.push_back(std::move(keep));
  }
  if (mid_total == 0 && !plan.mid.empty()) {
    double best = -1;
    size_t bi = 0;
    int64_t bc = 0;
    for (size_t i = 0; i < plan.mid.size(); ++i)
      for (int64_t c = 0; c < m.csf.act_a[i].bn.gamma.numel(); ++c) {
        double v = std::min(std::abs(m.csf.act_a[i].bn.gamma.data()[c]),
                            std::abs(m.csf.act_b[i].bn.gamma.data()[c]));
        if (v > best) {
          best = v;
          bi = i;
          bc = c;
        }
      }
    plan.mid[bi][size_t(bc)] = 1;
    plan.forced.push_back(m.csf.act_a[bi].name);
  }
  {
    int ch = m.csf.act_c.bn.channels();
    plan.out = and_masks(ch, {find_mask(masks, m.csf.act_c.name)});
    if (count_kept(plan.out) == 0) {
      int64_t best = 0;
      for (int64_t c = 1; c < m.csf.act_c.bn.gamma.numel(); ++c)
        if (std::abs(m.csf.act_c.bn.gamma.data()[c]) > std::abs(m.csf.act_c.bn.gamma.data()[best]))
          best = c;
      plan.out[size_t(best)] = 1;
      plan.forced.push_back(m.csf.act_c.name);
    }
  }
  return plan;
}

ModelArch planned_arch(const CSNetParams& m, const ChainKeep& plan) {
  ModelArch a = m.arch;
  for (int s = 0; s < 4; ++s) {
    const int hi_f = m.arch.stages[size_t(s)].hi_factor;
    for (size_t b = 0; b < m.stages[size_t(s)].size(); ++b) {
      const BlockParams& bp = m.stages[size_t(s)][b];
      BlockArch& ba = a.stages[size_t(s)].blocks[b];
      ba.ch_hi = 0;
      ba.ch_lo = 0;
      for (size_t k = 0; k < bp.factors.size(); ++k) {
        int kept = int(count_kept(plan.block[size_t(s)][b][k]));
        if (bp.factors[k] == hi_f)
          ba.ch_hi = kept;
        else
          ba.ch_lo = kept;
      }
    }
  }
  a.csf.mid = {0, 0, 0};
  for (size_t i = 0; i < m.csf.mid_factors.size(); ++i) {
    for (int j = 0; j < 3; ++j)
      if (a.csf.tap_factor[size_t(j)] == m.csf.mid_factors[i])
        a.csf.mid[size_t(j)] = int(count_kept(plan.mid[i]));
  }
  a.csf.out_channels = int(count_kept(plan.out));
  a.validate();
  return a;
}

// --- slicing helpers

Array slice_arr(const Array& v, const std::vector<char>& keep) {
  Array out(count_kept(keep));
  int64_t o = 0;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out[o++] = v[int64_t(i)];
  return out;
}

Tensor slice_conv(const Tensor& w, const std::vector<char>& keep_out,
                  const std::vector<char>* keep_in) {
  const int64_t O = w.dim(0), I = w.dim(1), k = w.dim(2);
  const int64_t no = count_kept(keep_out);
  std::vector<int64_t> in_idx;
  if (keep_in) {
    for (size_t i = 0; i < keep_in->size(); ++i)
      if ((*keep_in)[i]) in_idx.push_back(int64_t(i));
  } else {
    for (int64_t i = 0; i < I; ++i) in_idx.push_back(i);
  }
  check_config(!keep_in || int64_t(keep_in->size()) == I, "slice_conv: input mask mismatch");
  Array out(no * int64_t(in_idx.size()) * k * k);
  int64_t o = 0;
  for (int64_t oc = 0; oc < O; ++oc) {
    if (!keep_out[size_t(oc)]) continue;
    for (int64_t ic : in_idx)
      for (int64_t i = 0; i < k * k; ++i) out[o++] = w.data()[(oc * I + ic) * k * k + i];
  }
  return Tensor::from_array({no, int64_t(in_idx.size()), k, k}, std::move(out), true);
}

void slice_bn_act(const BnAct& src, const std::vector<char>& keep, BnAct& dst) {
  dst.bn.gamma = Tensor::from_array({count_kept(keep)}, slice_arr(src.bn.gamma.data(), keep), true);
  dst.bn.beta = Tensor::from_array({count_kept(keep)}, slice_arr(src.bn.beta.data(), keep), true);
  dst.bn.running_mean = slice_arr(src.bn.running_mean, keep);
  dst.bn.running_var = slice_arr(src.bn.running_var, keep);
  dst.bn.eps = src.bn.eps;
  dst.bn.momentum = src.bn.momentum;
  dst.slope = Tensor::from_array({count_kept(keep)}, slice_arr(src.slope.data(), keep), true);
}

std::vector<int64_t> new_indices(const std::vector<char>& keep) {
  std::vector<int64_t> idx(keep.size(), -1);
  int64_t o = 0;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) idx[i] = o++;
  return idx;
}

std::vector<char> all_ones(int n) { return std::vector<char>(size_t(n), 1); }

// index of `factor` in `factors`, or -1 when that scale was pruned away
int find_factor(const std::vector<int>& factors, int factor) {
  for (size_t i = 0; i < factors.size(); ++i)
    if (factors[i] == factor) return int(i);
  return -1;
}

double prelu_scalar(double v, double slope) { return v >= 0 ? v : slope * v; }

double kernel_sum(const Tensor& dw, int64_t c) {
  double acc = 0;
  for (int64_t i = 0; i < 9; ++i) acc += dw.data()[c * 9 + i];
  return acc;
}

double bn_infer_scalar(const BnAct& a, int64_t c, double v) {
  return (v - a.bn.running_mean[c]) / std::sqrt(a.bn.running_var[c] + a.bn.eps) *
             a.bn.gamma.data()[c] +
         a.bn.beta.data()[c];
}

constexpr double kDeadGamma = 1e-4;   // |gamma| below this is a constant channel
constexpr double kFoldMin = 1e-4;     // constants below this are dropped

// Constant a removed extractor chain emits at the block output (inference
// mode), or nullopt when the chain has no dead link to anchor it.
std::optional<double> chain_constant(const BlockParams& b, size_t k, int64_t c) {
  const BnAct* bns[3] = {&b.act1[k], &b.act2[k], &b.act3[k]};
  const GOctLayer* dws[2] = {&b.dw1, &b.dw2};
  int first_dead = -1;
  for (int j = 0; j < 3; ++j)
    if (std::abs(bns[j]->bn.gamma.data()[c]) <= kDeadGamma) {
      first_dead = j;
      break;
    }
  if (first_dead < 0) return std::nullopt;
  double v = bns[first_dead]->bn.beta.data()[c];
  for (int j = first_dead; j < 3; ++j) {
    v = prelu_scalar(v, bns[j]->slope.data()[c]);
    if (j < 2) {
      v *= kernel_sum(*dws[j]->w.find(b.factors[k], b.factors[k]), c);
      v = bn_infer_scalar(*bns[j + 1], c, v);
    }
  }
  return v;
}

}  // namespace

ModelArch arch_after_masks(CSNetParams& model, const PruneMasks& masks) {
  return planned_arch(model, plan_chains(model, masks));
}

PruneMasks select_for_target_params(CSNetParams& model,
                                    const std::vector<ChannelImportance>& scores,
                                    int64_t target_params, double rel_tol) {
  double lo = 0.01, hi = 1.0;
  PruneMasks best = select_top_fraction(scores, 1.0);
  int64_t best_err = std::numeric_limits<int64_t>::max();
  for (int it = 0; it < 48; ++it) {
    double frac = 0.5 * (lo + hi);
    PruneMasks m = select_top_fraction(scores, frac);
    int64_t p = count_params(arch_after_masks(model, m));
    int64_t err = std::abs(p - target_params);
    if (err < best_err) {
      best_err = err;
      best = m;
    }
    if (double(err) <= rel_tol * double(target_params) * 0.5) break;
    if (p > target_params)
      hi = frac;
    else
      lo = frac;
  }
  return best;
}

// ---------------------------------------------------------------------------
// rebuild

std::pair<CSNetParams, PruneReport> rebuild(CSNetParams& model, const PruneMasks& masks,
                                            bool fold_beta, int64_t flops_input) {
  ChainKeep plan = plan_chains(model, masks);
  ModelArch new_arch = planned_arch(model, plan);
  CSNetParams np = init_csnet(new_arch, 0);

  // stem passes through untouched
  np.stem.w = model.stem.w.clone();
  slice_bn_act(model.stem.act, all_ones(model.arch.stem_out), np.stem.act);

  // extractor blocks
  for (int s = 0; s < 4; ++s) {
    for (size_t b = 0; b < model.stages[size_t(s)].size(); ++b) {
      const BlockParams& ob = model.stages[size_t(s)][b];
      BlockParams& nb = np.stages[size_t(s)][b];
      // producer keeps, keyed by this block's input factors
      std::map<int, const std::vector<char>*> in_keep;
      std::vector<char> stem_keep = all_ones(model.arch.stem_out);
      if (s == 0 && b == 0) {
        in_keep[2] = &stem_keep;
      } else if (b == 0) {
        const BlockParams& pb = model.stages[size_t(s - 1)].back();
        for (size_t k = 0; k < pb.factors.size(); ++k)
          in_keep[pb.factors[k] * 2] = &plan.block[size_t(s - 1)].back()[k];
      } else {
        const BlockParams& pb = model.stages[size_t(s)][b - 1];
        for (size_t k = 0; k < pb.factors.size(); ++k)
          in_keep[pb.factors[k]] = &plan.block[size_t(s)][b - 1][k];
      }
      auto out_keep = [&](int factor) -> const std::vector<char>& {
        for (size_t k = 0; k < ob.factors.size(); ++k)
          if (ob.factors[k] == factor) return plan.block[size_t(s)][b][k];
        throw config_error("rebuild: missing factor");
      };
      for (auto& [key, t] : nb.pw.w.w)
        t = slice_conv(*model.stages[size_t(s)][b].pw.w.find(key.first, key.second),
                       out_keep(key.second), in_keep.at(key.first));
      for (auto& [key, t] : nb.dw1.w.w)
        t = slice_conv(*ob.dw1.w.find(key.first, key.second), out_keep(key.first), nullptr);
      for (auto& [key, t] : nb.dw2.w.w)
        t = slice_conv(*ob.dw2.w.find(key.first, key.second), out_keep(key.first), nullptr);
      for (size_t nk = 0; nk < nb.factors.size(); ++nk) {
        const auto& keep = out_keep(nb.factors[nk]);
        size_t ok = 0;
        while (ob.factors[ok] != nb.factors[nk]) ++ok;
        slice_bn_act(ob.act1[ok], keep, nb.act1[nk]);
        slice_bn_act(ob.act2[ok], keep, nb.act2[nk]);
        slice_bn_act(ob.act3[ok], keep, nb.act3[nk]);
      }
    }
  }

  // CSF. Tap keeps are the concat of the producing block's branch keeps.
  std::map<int, std::vector<char>> tap_keep;
  for (int i = 0; i < 3; ++i) {
    const BlockParams& pb = model.stages[size_t(i + 1)].back();
    std::vector<char> keep;
    for (size_t k = 0; k < pb.factors.size(); ++k) {
      const auto& part = plan.block[size_t(i + 1)].back()[k];
      keep.insert(keep.end(), part.begin(), part.end());
    }
    tap_keep[model.arch.csf.tap_factor[size_t(i)]] = std::move(keep);
  }
  auto mid_keep = [&](int factor) -> const std::vector<char>& {
    for (size_t i = 0; i < model.csf.mid_factors.size(); ++i)
      if (model.csf.mid_factors[i] == factor) return plan.mid[i];
    throw config_error("rebuild: missing mid factor");
  };
  for (auto& [key, t] : np.csf.fuse1.w.w)
    t = slice_conv(*model.csf.fuse1.w.find(key.first, key.second), mid_keep(key.second),
                   &tap_keep.at(key.first));
  for (size_t ni = 0; ni < np.csf.mid_factors.size(); ++ni) {
    int f = np.csf.mid_factors[ni];
    size_t oi = 0;
    while (model.csf.mid_factors[oi] != f) ++oi;
    const auto& keep = plan.mid[oi];
    slice_bn_act(model.csf.act_a[oi], keep, np.csf.act_a[ni]);
    for (size_t r = 0; r < np.csf.dil_w[ni].size(); ++r)
      np.csf.dil_w[ni][r] = slice_conv(model.csf.dil_w[oi][r], keep, nullptr);
    slice_bn_act(model.csf.act_b[oi], keep, np.csf.act_b[ni]);
  }
  for (auto& [key, t] : np.csf.fuse2.w.w)
    t = slice_conv(*model.csf.fuse2.w.find(key.first, key.second), plan.out,
                   &mid_keep(key.first));
  slice_bn_act(model.csf.act_c, plan.out, np.csf.act_c);
  np.csf.head_w = slice_conv(model.csf.head_w, all_ones(1), &plan.out);
  np.csf.head_b = model.csf.head_b.clone();

  // Fold the constant output of dead removed channels into the consumers'
  // running means (1x1 consumers make this exact away from dw borders).
  if (fold_beta) {
    for (int s = 0; s < 4; ++s) {
      for (size_t b = 0; b < model.stages[size_t(s)].size(); ++b) {
        const BlockParams& ob = model.stages[size_t(s)][b];
        for (size_t k = 0; k < ob.factors.size(); ++k) {
          const int f = ob.factors[k];
          const auto& keep = plan.block[size_t(s)][b][k];
          for (size_t c = 0; c < keep.size(); ++c) {
            if (keep[c]) continue;
            auto vc = chain_constant(ob, k, int64_t(c));
            if (!vc || std::abs(*vc) <= kFoldMin) continue;
            const double v = *vc;
            const bool last_block = b + 1 == model.stages[size_t(s)].size();
            if (!last_block) {
              const BlockParams& cb = model.stages[size_t(s)][b + 1];
              BlockParams& ncb = np.stages[size_t(s)][b + 1];
              for (size_t g = 0; g < cb.factors.size(); ++g) {
                const Tensor* w = cb.pw.w.find(f, cb.factors[g]);
                int ng = find_factor(ncb.factors, cb.factors[g]);
                if (!w || ng < 0) continue;
                auto nidx = new_indices(plan.block[size_t(s)][b + 1][g]);
                for (int64_t o = 0; o < w->dim(0); ++o) {
                  if (nidx[size_t(o)] < 0) continue;
                  double delta = v * w->data()[o * w->dim(1) + int64_t(c)];
                  ncb.act1[size_t(ng)].bn.running_mean[nidx[size_t(o)]] -= delta;
                }
              }
            } else {
              if (s + 1 < 4) {
                const BlockParams& cb = model.stages[size_t(s + 1)][0];
                BlockParams& ncb = np.stages[size_t(s + 1)][0];
                for (size_t g = 0; g < cb.factors.size(); ++g) {
                  const Tensor* w = cb.pw.w.find(f * 2, cb.factors[g]);
                  int ng = find_factor(ncb.factors, cb.factors[g]);
                  if (!w || ng < 0) continue;
                  auto nidx = new_indices(plan.block[size_t(s + 1)][0][g]);
                  for (int64_t o = 0; o < w->dim(0); ++o) {
                    if (nidx[size_t(o)] < 0) continue;
                    double delta = v * w->data()[o * w->dim(1) + int64_t(c)];
                    ncb.act1[size_t(ng)].bn.running_mean[nidx[size_t(o)]] -= delta;
                  }
                }
              }
              if (s >= 1) {
                // tap consumer: column index within the merged tap
                int tf = model.arch.stages[size_t(s)].hi_factor;
                int64_t col = int64_t(c);
                for (size_t kk = 0; kk < k; ++kk)
                  col += int64_t(plan.block[size_t(s)][b][kk].size());
                for (size_t mi = 0; mi < model.csf.mid_factors.size(); ++mi) {
                  const Tensor* w = model.csf.fuse1.w.find(tf, model.csf.mid_factors[mi]);
                  int nmi = find_factor(np.csf.mid_factors, model.csf.mid_factors[mi]);
                  if (!w || nmi < 0) continue;
                  auto nidx = new_indices(plan.mid[mi]);
                  for (int64_t o = 0; o < w->dim(0); ++o) {
                    if (nidx[size_t(o)] < 0) continue;
                    double delta = v * w->data()[o * w->dim(1) + col];
                    np.csf.act_a[size_t(nmi)].bn.running_mean[nidx[size_t(o)]] -= delta;
                  }
                }
              }
            }
          }
        }
      }
    }
    // CSF mid chains feed fuse2; the fused output feeds the head.
    for (size_t i = 0; i < model.csf.mid_factors.size(); ++i) {
      const auto& keep = plan.mid[i];
      for (size_t c = 0; c < keep.size(); ++c) {
        if (keep[c]) continue;
        double v;
        if (std::abs(model.csf.act_a[i].bn.gamma.data()[int64_t(c)]) <= kDeadGamma) {
          v = model.csf.act_a[i].bn.beta.data()[int64_t(c)];
          v = prelu_scalar(v, model.csf.act_a[i].slope.data()[int64_t(c)]);
          double ks = 0;
          for (const auto& t : model.csf.dil_w[i]) ks += kernel_sum(t, int64_t(c));
          v *= ks;
          v = bn_infer_scalar(model.csf.act_b[i], int64_t(c), v);
        } else if (std::abs(model.csf.act_b[i].bn.gamma.data()[int64_t(c)]) <= kDeadGamma) {
          v = model.csf.act_b[i].bn.beta.data()[int64_t(c)];
        } else {
          continue;
        }
        v = prelu_scalar(v, model.csf.act_b[i].slope.data()[int64_t(c)]);
        if (std::abs(v) <= kFoldMin) continue;
        const Tensor* w = model.csf.fuse2.w.find(model.csf.mid_factors[i],
                                                 model.arch.csf.tap_factor[0]);
        if (!w) continue;
        auto nidx = new_indices(plan.out);
        for (int64_t o = 0; o < w->dim(0); ++o) {
          if (nidx[size_t(o)] < 0) continue;
          double delta = v * w->data()[o * w->dim(1) + int64_t(c)];
          np.csf.act_c.bn.running_mean[nidx[size_t(o)]] -= delta;
        }
      }
    }
    for (size_t c = 0; c < plan.out.size(); ++c) {
      if (plan.out[c]) continue;
      if (std::abs(model.csf.act_c.bn.gamma.data()[int64_t(c)]) > kDeadGamma) continue;
      double v = prelu_scalar(model.csf.act_c.bn.beta.data()[int64_t(c)],
                              model.csf.act_c.slope.data()[int64_t(c)]);
      if (std::abs(v) <= kFoldMin) continue;
      np.csf.head_b.data()[0] += v * model.csf.head_w.data()[int64_t(c)];
    }
  }

  PruneReport rep;
  rep.forced = plan.forced;
  for (int s = 0; s < 4; ++s)
    for (size_t b = 0; b < model.stages[size_t(s)].size(); ++b) {
      const BlockParams& ob = model.stages[size_t(s)][b];
      for (size_t k = 0; k < ob.factors.size(); ++k) {
        int64_t kept = count_kept(plan.block[size_t(s)][b][k]);
        rep.layers.push_back({"stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                              ob.factors[k], int(kept),
                              int(int64_t(plan.block[size_t(s)][b][k].size()) - kept)});
      }
    }
  for (size_t i = 0; i < model.csf.mid_factors.size(); ++i) {
    int64_t kept = count_kept(plan.mid[i]);
    rep.layers.push_back({"csf.mid", model.csf.mid_factors[i], int(kept),
                          int(int64_t(plan.mid[i].size()) - kept)});
  }
  {
    int64_t kept = count_kept(plan.out);
    rep.layers.push_back({"csf.out", model.arch.csf.tap_factor[0], int(kept),
                          int(int64_t(plan.out.size()) - kept)});
  }
  rep.flops_input = flops_input;
  rep.params_before = count_params(model.arch);
  rep.params_after = count_params(new_arch);
  rep.flops_before = count_flops(model.arch, flops_input);
  rep.flops_after = count_flops(new_arch, flops_input);
  return {std::move(np), std::move(rep)};
}

nlohmann::json prune_report_to_json(const PruneReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back(
        {{"layer", l.layer}, {"scale", l.scale}, {"kept", l.kept}, {"removed", l.removed}});
  return nlohmann::json{{"layers", layers},
                        {"params_before", r.params_before},
                        {"params_after", r.params_after},
                        {"flops_before", r.flops_before},
                        {"flops_after", r.flops_after},
                        {"flops_input", r.flops_input},
                        {"prune_rate_params", r.prune_rate_params()},
                        {"prune_rate_flops", r.prune_rate_flops()},
                        {"forced_keep_layers", r.forced}};
}

std::string channels_csv(const PruneReport& r) {
  std::string out = "layer,scale,kept,removed\n";
  for (const auto& l : r.layers)
    out += l.layer + "," + std::to_string(l.scale) + "," + std::to_string(l.kept) + "," +
           std::to_string(l.removed) + "\n";
  return out;
}

PrunePipelineResult prune_pipeline(CSNetParams& model, const std::vector<SaliencySample>& data,
                                   const TrainConfig& cfg, const DecayPolicy& policy,
                                   PruneCriterion criterion, double tau,
                                   const TrainOptions& opts) {
  PrunePipelineResult result;
  result.train_log = train(model, data, cfg, policy, opts);
  auto scores = score_channels(model, criterion);
  PruneMasks masks = select_prunable(scores, tau);
  auto [compact, report] = rebuild(model, masks, /*fold_beta=*/true);
  report.forced.insert(report.forced.end(), masks.forced.begin(), masks.forced.end());
  result.report = std::move(report);
  if (cfg.finetune_epochs > 0) {
    TrainConfig ft = cfg;
    ft.epochs = cfg.finetune_epochs;
    ft.lr = cfg.final_lr();
    ft.lr_drop_epochs.clear();
    TrainOptions fopts = opts;
    if (!fopts.out_dir.empty()) fopts.out_dir += "/finetune";
    result.finetune_log = train(compact, data, ft, policy, fopts);
  }
  result.compact = std::move(compact);
  return result;
}

}  // namespace csnet
