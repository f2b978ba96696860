#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csnet/model.hpp"

namespace csnet {

// Exact cost accounting. MACs follow "output elements x kernel volume x
// input channels / groups" per conv path at that path's actual resolution;
// BN, PReLU, pooling and resampling count 1 op per output element and are
// itemized separately. FLOPs are reported as MACs + elementwise ops by
// default; the 2xMACs convention is a flag.
struct ComplexityReport {
  struct Item {
    std::string module;  // stem, stage1..stage4, csf
    int64_t params = 0;
    int64_t macs = 0;
    int64_t elem_ops = 0;
  };
  std::vector<Item> items;
  int64_t input_h = 224, input_w = 224;
  bool flops_double = false;

  int64_t params_total() const;
  int64_t macs_total() const;
  int64_t elem_total() const;
  int64_t flops_total() const;        // whole model
  int64_t extractor_params() const;   // stem + stages
  int64_t extractor_flops() const;
};

ComplexityReport count_complexity(const ModelArch& arch, int64_t input_h, int64_t input_w,
                                  bool flops_double = false);

int64_t count_params(const ModelArch& arch);
int64_t count_flops(const ModelArch& arch, int64_t input_hw, bool flops_double = false);

nlohmann::json complexity_to_json(const ComplexityReport& r);
std::string complexity_table(const ComplexityReport& r);

struct SweepRow {
  std::string label;
  ComplexityReport report;
};

// axis: "split" walks 1/0, 3/1, 5/5, 1/3, 0/1; "width" walks x1..x2.
std::vector<SweepRow> sweep(const CSNetConfig& base, const std::string& axis, int64_t input_hw,
                            bool flops_double = false);

std::string sweep_table(const std::vector<SweepRow>& rows, bool with_extractor);
nlohmann::json sweep_to_json(const std::vector<SweepRow>& rows);

}  // namespace csnet
