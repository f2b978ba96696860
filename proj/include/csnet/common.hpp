#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace csnet {

// Raised for malformed configurations, shape mismatches, bad CLI input.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a computation produces non-finite values or diverges.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw config_error(msg);
}

// Operation counters used to cross-check the analytical complexity model
// against what the forward pass actually executes.
struct OpCount {
  bool enabled = false;
  int64_t macs = 0;      // conv multiply-accumulates
  int64_t elem_ops = 0;  // BN / activation / pooling / resampling, 1 per output element

  void reset() { macs = 0; elem_ops = 0; }
};

OpCount& op_count();

}  // namespace csnet
