#pragma once

#include <string>
#include <vector>

#include "csnet/tensor.hpp"

namespace csnet {

// One training/evaluation pair: image [3,H,W] in [0,1], mask [1,H,W] in {0,1}.
struct SaliencySample {
  Tensor image;
  Tensor mask;
};

void validate_sample(const SaliencySample& s);

// Decoded raster, CHW, values in [0,1].
struct ImageBuf {
  int64_t channels = 0, height = 0, width = 0;
  std::vector<double> data;
};

// PNG, JPEG, PPM/PGM (binary and ASCII), recognized by magic bytes.
ImageBuf load_image(const std::string& path);
void save_png(const std::string& path, const ImageBuf& img);  // 1 or 3 channels, 8-bit
void save_pgm(const std::string& path, const ImageBuf& gray);

std::vector<double> resize_bilinear(const std::vector<double>& chw, int64_t c, int64_t h,
                                    int64_t w, int64_t nh, int64_t nw);

struct LoadReport {
  std::vector<std::string> skipped;  // stems present on one side only
};

// Pairs image/mask files by filename stem, lexicographic order. Masks are
// binarized at 0.5. Unmatched stems go to the skip report; undecodable
// files are errors.
std::vector<SaliencySample> load_folder(const std::string& images_dir,
                                        const std::string& masks_dir,
                                        LoadReport* report = nullptr);

// Synthetic saliency data: 1-3 anti-aliased shapes (ellipse / rectangle /
// triangle) in a distinct color over a textured background; the mask is the
// shape union. Foreground fraction is kept inside (0.02, 0.6).
std::vector<SaliencySample> synth_dataset(int n, int size, uint64_t seed);

SaliencySample hflip(const SaliencySample& s);

// Random horizontal flip (p=0.5) and random crop to 0.8-1.0 of each
// dimension, resized back; the mask is re-binarized.
SaliencySample augment(const SaliencySample& s, uint64_t seed);

}  // namespace csnet
