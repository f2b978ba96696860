#include "csnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace csnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; byte swapping is not implemented");

namespace {

constexpr char kMagic[8] = {'C', 'S', 'N', 'E', 'T', 'C', 'K', '1'};

struct Entry {
  std::string name;
  Shape shape;
  const double* ptr;
  int64_t numel;
};

std::vector<Entry> gather(CSNetParams& p) {
  std::vector<Entry> out;
  for (auto& np : named_params(p))
    out.push_back({np.name, np.tensor.shape(), np.tensor.ptr(), np.tensor.numel()});
  for (auto& [name, buf] : named_buffers(p))
    out.push_back({name, {int64_t(buf->size())}, buf->data(), buf->size()});
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, CSNetParams& params) {
  auto entries = gather(params);
  nlohmann::json tensors = nlohmann::json::object();
  int64_t offset = 0;
  for (const auto& e : entries) {
    tensors[e.name] = {{"shape", e.shape}, {"dtype", "f64"}, {"offset", offset}};
    offset += e.numel * int64_t(sizeof(double));
  }
  nlohmann::json manifest = {{"format", "csnet-ckpt-1"},
                             {"arch", arch_to_json(params.arch)},
                             {"tensors", tensors}};
  std::string mstr = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 8);
  uint64_t mlen = mstr.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& e : entries)
    f.write(reinterpret_cast<const char*>(e.ptr), std::streamsize(e.numel * sizeof(double)));
  if (!f) throw numeric_error("checkpoint write failed: " + path);
}

CSNetParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw config_error("not a csnet checkpoint: " + path);
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), std::streamsize(mlen));
  if (!f) throw config_error("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(mstr);
  check_config(manifest.at("format") == "csnet-ckpt-1", "unsupported checkpoint format");

  CSNetParams params = init_csnet(arch_from_json(manifest.at("arch")), /*seed=*/0);
  auto tensors = manifest.at("tensors");
  const std::streampos blob_start = f.tellg();
  auto read_into = [&](const std::string& name, double* dst, int64_t numel) {
    check_config(tensors.contains(name), "checkpoint is missing tensor: " + name);
    const auto& meta = tensors.at(name);
    Shape shape = meta.at("shape").get<Shape>();
    check_config(shape_numel(shape) == numel,
                 "checkpoint tensor " + name + " has shape " + shape_str(shape));
    check_config(meta.at("dtype") == "f64", "checkpoint tensor " + name + " must be f64");
    f.seekg(blob_start + std::streampos(meta.at("offset").get<int64_t>()));
    f.read(reinterpret_cast<char*>(dst), std::streamsize(numel * sizeof(double)));
    if (!f) throw config_error("truncated checkpoint data for " + name);
  };
  for (auto& np : named_params(params)) read_into(np.name, np.tensor.ptr(), np.tensor.numel());
  for (auto& [name, buf] : named_buffers(params)) read_into(name, buf->data(), buf->size());
  return params;
}

}  // namespace csnet
