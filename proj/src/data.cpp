#include "csnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <jpeglib.h>
#include <png.h>

namespace csnet {

namespace fs = std::filesystem;

void validate_sample(const SaliencySample& s) {
  check_config(s.image.defined() && s.image.ndim() == 3 && s.image.dim(0) == 3,
               "sample image must be [3,H,W]");
  check_config(s.mask.defined() && s.mask.ndim() == 3 && s.mask.dim(0) == 1,
               "sample mask must be [1,H,W]");
  check_config(s.image.dim(1) == s.mask.dim(1) && s.image.dim(2) == s.mask.dim(2),
               "image and mask sizes must match");
  for (int64_t i = 0; i < s.mask.numel(); ++i) {
    double v = s.mask.data()[i];
    check_config(v == 0.0 || v == 1.0, "mask values must be exactly 0 or 1");
  }
}

// ---------------------------------------------------------------------------
// image decoding

namespace {

ImageBuf decode_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw config_error("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw config_error("failed to decode PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int ch = png_get_channels(png, info);
  std::vector<png_byte> row(size_t(w) * size_t(ch));
  ImageBuf img;
  img.channels = ch;
  img.height = h;
  img.width = w;
  img.data.resize(size_t(ch) * h * w);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        img.data[(size_t(c) * h + y) * w + x] = row[size_t(x) * ch + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jmp;
};

void jpeg_err_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegErr*>(cinfo->err)->jmp, 1);
}

ImageBuf decode_jpeg(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw config_error("cannot open image: " + path);
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_err_exit;
  if (setjmp(err.jmp)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    throw config_error("failed to decode JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  jpeg_start_decompress(&cinfo);
  const int ch = cinfo.output_components;
  const int64_t w = cinfo.output_width, h = cinfo.output_height;
  ImageBuf img;
  img.channels = ch;
  img.height = h;
  img.width = w;
  img.data.resize(size_t(ch) * h * w);
  std::vector<JSAMPLE> row(size_t(w) * ch);
  JSAMPROW rp = row.data();
  while (cinfo.output_scanline < cinfo.output_height) {
    int64_t y = cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &rp, 1);
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        img.data[(size_t(c) * h + y) * w + x] = row[size_t(x) * ch + c] / 255.0;
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(fp);
  return img;
}

ImageBuf decode_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot open image: " + path);
  std::string magic;
  f >> magic;
  bool ascii = magic == "P2" || magic == "P3";
  bool gray = magic == "P2" || magic == "P5";
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw config_error("unsupported PNM type in " + path);
  auto next_int = [&]() {
    // skips whitespace and '#' comments
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    int64_t v;
    f >> v;
    return v;
  };
  int64_t w = next_int(), h = next_int(), maxv = next_int();
  check_config(w > 0 && h > 0 && maxv > 0 && maxv < 65536, "bad PNM header in " + path);
  const int ch = gray ? 1 : 3;
  ImageBuf img;
  img.channels = ch;
  img.height = h;
  img.width = w;
  img.data.resize(size_t(ch) * h * w);
  if (ascii) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c) img.data[(size_t(c) * h + y) * w + x] = double(next_int()) / maxv;
  } else {
    f.get();  // single whitespace after header
    const int bytes = maxv > 255 ? 2 : 1;
    std::vector<unsigned char> row(size_t(w) * ch * bytes);
    for (int64_t y = 0; y < h; ++y) {
      f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
      if (!f) throw config_error("truncated PNM data in " + path);
      for (int64_t x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c) {
          size_t o = (size_t(x) * ch + c) * bytes;
          int v = bytes == 2 ? (row[o] << 8 | row[o + 1]) : row[o];
          img.data[(size_t(c) * h + y) * w + x] = double(v) / maxv;
        }
    }
  }
  return img;
}

}  // namespace

ImageBuf load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw config_error("cannot open image: " + path);
  unsigned char magic[8] = {};
  probe.read(reinterpret_cast<char*>(magic), 8);
  probe.close();
  if (magic[0] == 0x89 && magic[1] == 'P') return decode_png(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return decode_jpeg(path);
  if (magic[0] == 'P' && magic[1] >= '2' && magic[1] <= '6') return decode_pnm(path);
  throw config_error("unrecognized image format: " + path);
}

void save_png(const std::string& path, const ImageBuf& img) {
  check_config(img.channels == 1 || img.channels == 3, "save_png expects 1 or 3 channels");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw config_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw numeric_error("failed to encode PNG: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(size_t(img.width) * size_t(img.channels));
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < img.channels; ++c) {
        double v = img.data[(size_t(c) * img.height + y) * img.width + x];
        row[size_t(x) * img.channels + c] = png_byte(std::lround(std::clamp(v, 0.0, 1.0) * 255));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void save_pgm(const std::string& path, const ImageBuf& gray) {
  check_config(gray.channels == 1, "save_pgm expects 1 channel");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot open for writing: " + path);
  f << "P5\n" << gray.width << " " << gray.height << "\n255\n";
  for (int64_t i = 0; i < gray.height * gray.width; ++i)
    f.put(char(std::lround(std::clamp(gray.data[size_t(i)], 0.0, 1.0) * 255)));
}

std::vector<double> resize_bilinear(const std::vector<double>& chw, int64_t c, int64_t h,
                                    int64_t w, int64_t nh, int64_t nw) {
  if (nh == h && nw == w) return chw;
  std::vector<double> out(size_t(c) * nh * nw);
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* src = chw.data() + ch * h * w;
    double* dst = out.data() + ch * nh * nw;
    for (int64_t y = 0; y < nh; ++y) {
      double fy = (double(y) + 0.5) * double(h) / double(nh) - 0.5;
      fy = std::clamp(fy, 0.0, double(h - 1));
      int64_t y0 = int64_t(fy);
      int64_t y1 = std::min(y0 + 1, h - 1);
      double wy = fy - double(y0);
      for (int64_t x = 0; x < nw; ++x) {
        double fx = (double(x) + 0.5) * double(w) / double(nw) - 0.5;
        fx = std::clamp(fx, 0.0, double(w - 1));
        int64_t x0 = int64_t(fx);
        int64_t x1 = std::min(x0 + 1, w - 1);
        double wx = fx - double(x0);
        double top = src[y0 * w + x0] * (1 - wx) + src[y0 * w + x1] * wx;
        double bot = src[y1 * w + x0] * (1 - wx) + src[y1 * w + x1] * wx;
        dst[y * nw + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// folder loading

namespace {

bool is_image_file(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".ppm" || e == ".pgm" || e == ".pnm";
}

std::map<std::string, fs::path> stem_index(const std::string& dir) {
  check_config(fs::is_directory(dir), "not a directory: " + dir);
  std::map<std::string, fs::path> out;  // sorted -> deterministic order
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out[e.path().stem().string()] = e.path();
  return out;
}

Tensor image_to_tensor3(const ImageBuf& img) {
  const int64_t hw = img.height * img.width;
  Array a(3 * hw);
  for (int c = 0; c < 3; ++c) {
    const double* src = img.data.data() + (img.channels == 1 ? 0 : size_t(c) * hw);
    std::copy(src, src + hw, a.data() + c * hw);
  }
  return Tensor::from_array({3, img.height, img.width}, std::move(a));
}

Tensor mask_to_tensor(const ImageBuf& img) {
  const int64_t hw = img.height * img.width;
  Array a(hw);
  for (int64_t i = 0; i < hw; ++i) {
    double v = 0;
    for (int64_t c = 0; c < img.channels; ++c) v += img.data[size_t(c * hw + i)];
    v /= double(img.channels);
    a[i] = v >= 0.5 ? 1.0 : 0.0;
  }
  return Tensor::from_array({1, img.height, img.width}, std::move(a));
}

}  // namespace

std::vector<SaliencySample> load_folder(const std::string& images_dir,
                                        const std::string& masks_dir, LoadReport* report) {
  auto images = stem_index(images_dir);
  auto masks = stem_index(masks_dir);
  std::vector<SaliencySample> out;
  for (const auto& [stem, ipath] : images) {
    auto mit = masks.find(stem);
    if (mit == masks.end()) {
      if (report) report->skipped.push_back(stem + " (no mask)");
      continue;
    }
    SaliencySample s;
    s.image = image_to_tensor3(load_image(ipath.string()));
    s.mask = mask_to_tensor(load_image(mit->second.string()));
    check_config(s.image.dim(1) == s.mask.dim(1) && s.image.dim(2) == s.mask.dim(2),
                 "image/mask size mismatch for stem " + stem);
    out.push_back(std::move(s));
  }
  for (const auto& [stem, mpath] : masks)
    if (!images.count(stem) && report) report->skipped.push_back(stem + " (no image)");
  return out;
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

struct Shape2D {
  enum Kind { ellipse, rect, triangle } kind;
  double cx, cy, a, b, rot;          // ellipse / rect
  double x1, y1, x2, y2, x3, y3;     // triangle

  bool inside(double x, double y) const {
    if (kind == triangle) {
      auto side = [](double ax, double ay, double bx, double by, double px, double py) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      };
      double d1 = side(x1, y1, x2, y2, x, y);
      double d2 = side(x2, y2, x3, y3, x, y);
      double d3 = side(x3, y3, x1, y1, x, y);
      bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos);
    }
    double dx = x - cx, dy = y - cy;
    double u = std::cos(rot) * dx + std::sin(rot) * dy;
    double v = -std::sin(rot) * dx + std::cos(rot) * dy;
    if (kind == ellipse) return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    return std::abs(u) <= a && std::abs(v) <= b;
  }
};

Shape2D random_shape(Rng& rng) {
  Shape2D s;
  int k = int(rng.below(3));
  s.kind = k == 0 ? Shape2D::ellipse : (k == 1 ? Shape2D::rect : Shape2D::triangle);
  if (s.kind == Shape2D::triangle) {
    double area = 0;
    do {
      s.x1 = rng.uniform(0.15, 0.85);
      s.y1 = rng.uniform(0.15, 0.85);
      s.x2 = rng.uniform(0.15, 0.85);
      s.y2 = rng.uniform(0.15, 0.85);
      s.x3 = rng.uniform(0.15, 0.85);
      s.y3 = rng.uniform(0.15, 0.85);
      area = 0.5 * std::abs((s.x2 - s.x1) * (s.y3 - s.y1) - (s.x3 - s.x1) * (s.y2 - s.y1));
    } while (area < 0.03);
  } else {
    s.cx = rng.uniform(0.25, 0.75);
    s.cy = rng.uniform(0.25, 0.75);
    s.a = rng.uniform(0.1, 0.25);
    s.b = rng.uniform(0.1, 0.25);
    s.rot = rng.uniform(0.0, 3.14159265);
  }
  return s;
}

}  // namespace

std::vector<SaliencySample> synth_dataset(int n, int size, uint64_t seed) {
  check_config(n >= 1, "synth_dataset requires n >= 1");
  check_config(size >= 32, "synth_dataset requires size >= 32");
  std::vector<SaliencySample> out;
  out.reserve(size_t(n));
  const int64_t S = size;
  const int64_t hw = S * S;
  for (int idx = 0; idx < n; ++idx) {
    Rng rng(split_seed(seed, "synth", idx));
    for (int attempt = 0; attempt < 100; ++attempt) {
      double base[3], grad[3];
      for (auto& v : base) v = rng.uniform(0.15, 0.85);
      for (auto& v : grad) v = rng.uniform(-0.25, 0.25);
      double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);

      double fg[3];
      double dist = 0;
      do {
        dist = 0;
        for (int c = 0; c < 3; ++c) {
          fg[c] = rng.uniform(0.0, 1.0);
          dist += (fg[c] - base[c]) * (fg[c] - base[c]);
        }
      } while (std::sqrt(dist) < 0.45);

      int nshapes = 1 + int(rng.below(3));
      std::vector<Shape2D> shapes;
      for (int i = 0; i < nshapes; ++i) shapes.push_back(random_shape(rng));

      Array img(3 * hw), alpha(hw);
      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
          double noise = rng.uniform(-0.05, 0.05);
          double px = (double(x) + 0.5) / double(S), py = (double(y) + 0.5) / double(S);
          // 3x3 supersampled coverage of the shape union
          int hits = 0;
          for (int sy = 0; sy < 3; ++sy)
            for (int sx = 0; sx < 3; ++sx) {
              double qx = (double(x) + (sx + 0.5) / 3.0) / double(S);
              double qy = (double(y) + (sy + 0.5) / 3.0) / double(S);
              for (const auto& sh : shapes)
                if (sh.inside(qx, qy)) {
                  ++hits;
                  break;
                }
            }
          double av = hits / 9.0;
          alpha[y * S + x] = av;
          for (int c = 0; c < 3; ++c) {
            double bg = std::clamp(base[c] + grad[c] * (gx * px + gy * py) + noise, 0.0, 1.0);
            img[c * hw + y * S + x] = bg * (1 - av) + fg[c] * av;
          }
        }

      Array mask(hw);
      int64_t fg_count = 0;
      for (int64_t i = 0; i < hw; ++i) {
        mask[i] = alpha[i] > 0.5 ? 1.0 : 0.0;
        fg_count += int64_t(mask[i]);
      }
      double frac = double(fg_count) / double(hw);
      if (frac <= 0.02 || frac >= 0.6) continue;

      SaliencySample s;
      s.image = Tensor::from_array({3, S, S}, std::move(img));
      s.mask = Tensor::from_array({1, S, S}, std::move(mask));
      out.push_back(std::move(s));
      break;
    }
    check_config(out.size() == size_t(idx + 1), "synth_dataset failed to place shapes");
  }
  return out;
}

SaliencySample hflip(const SaliencySample& s) {
  const int64_t H = s.image.dim(1), W = s.image.dim(2);
  SaliencySample out;
  Array img(3 * H * W), mask(H * W);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        img[(c * H + y) * W + x] = s.image.data()[(c * H + y) * W + (W - 1 - x)];
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) mask[y * W + x] = s.mask.data()[y * W + (W - 1 - x)];
  out.image = Tensor::from_array({3, H, W}, std::move(img));
  out.mask = Tensor::from_array({1, H, W}, std::move(mask));
  return out;
}

SaliencySample augment(const SaliencySample& s, uint64_t seed) {
  Rng rng(seed);
  const int64_t H = s.image.dim(1), W = s.image.dim(2);
  bool flip = rng.coin();
  double uh = rng.uniform(0.8, 1.0), uw = rng.uniform(0.8, 1.0);
  int64_t ch = std::max<int64_t>(1, int64_t(std::lround(double(H) * uh)));
  int64_t cw = std::max<int64_t>(1, int64_t(std::lround(double(W) * uw)));
  int64_t oy = ch < H ? rng.below(H - ch + 1) : 0;
  int64_t ox = cw < W ? rng.below(W - cw + 1) : 0;

  SaliencySample src = flip ? hflip(s) : s;
  if (ch == H && cw == W) return src;

  std::vector<double> icrop(size_t(3 * ch * cw)), mcrop(size_t(ch * cw));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < ch; ++y)
      for (int64_t x = 0; x < cw; ++x)
        icrop[size_t((c * ch + y) * cw + x)] = src.image.data()[(c * H + oy + y) * W + ox + x];
  for (int64_t y = 0; y < ch; ++y)
    for (int64_t x = 0; x < cw; ++x)
      mcrop[size_t(y * cw + x)] = src.mask.data()[(oy + y) * W + ox + x];

  auto ires = resize_bilinear(icrop, 3, ch, cw, H, W);
  auto mres = resize_bilinear(mcrop, 1, ch, cw, H, W);
  Array img(3 * H * W), mask(H * W);
  std::copy(ires.begin(), ires.end(), img.data());
  for (int64_t i = 0; i < H * W; ++i) mask[i] = mres[size_t(i)] >= 0.5 ? 1.0 : 0.0;

  SaliencySample out;
  out.image = Tensor::from_array({3, H, W}, std::move(img));
  out.mask = Tensor::from_array({1, H, W}, std::move(mask));
  return out;
}

}  // namespace csnet
