#pragma once

#include <string>

#include "csnet/model.hpp"

namespace csnet {

// Flat binary container of named f64 arrays behind a JSON manifest
// (name -> shape/dtype/offset), little-endian. The manifest also carries
// the resolved architecture so a checkpoint is self-describing.
void save_checkpoint(const std::string& path, CSNetParams& params);
CSNetParams load_checkpoint(const std::string& path);

}  // namespace csnet
