#include "tak/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "tak/errors.hpp"

namespace tak {

Var ParamRegistry::add(const std::string& name, Tensor init) {
  for (const auto& [n, v] : entries_)
    if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
  Var v = make_leaf(std::move(init), true);
  entries_.emplace_back(name, v);
  return v;
}

Var ParamRegistry::find(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  return nullptr;
}

int64_t ParamRegistry::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : entries_) n += v->value.numel();
  return n;
}

void ParamRegistry::zero_grad() const {
  for (const auto& [name, v] : entries_) v->zero_grad();
}

Tensor kaiming_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.normal(0.0, std_dev);
  return t;
}

Conv3dLayer make_conv3d(ParamRegistry& reg, const std::string& name, int cin, int cout, int k,
                        int stride, int pad, Rng& rng) {
  Conv3dLayer l;
  l.w = reg.add(name + "/w", kaiming_normal({cout, cin, k, k, k}, cin * k * k * k, rng));
  l.b = reg.add(name + "/b", Tensor::zeros({cout}));
  l.stride = stride;
  l.pad = pad;
  return l;
}

ConvTranspose3dLayer make_conv_transpose3d(ParamRegistry& reg, const std::string& name, int cin,
                                           int cout, Rng& rng) {
  ConvTranspose3dLayer l;
  l.w = reg.add(name + "/w", kaiming_normal({cin, cout, 2, 2, 2}, cin * 8, rng));
  l.b = reg.add(name + "/b", Tensor::zeros({cout}));
  return l;
}

InstanceNormLayer make_instance_norm(ParamRegistry& reg, const std::string& name, int channels) {
  InstanceNormLayer l;
  l.gamma = reg.add(name + "/gamma", Tensor::full({channels}, 1.0));
  l.beta = reg.add(name + "/beta", Tensor::zeros({channels}));
  return l;
}

LinearLayer make_linear(ParamRegistry& reg, const std::string& name, int din, int dout, Rng& rng) {
  LinearLayer l;
  l.w = reg.add(name + "/w", kaiming_normal({dout, din}, din, rng));
  l.b = reg.add(name + "/b", Tensor::zeros({dout}));
  return l;
}

namespace {

constexpr char kMagic[4] = {'T', 'A', 'K', 'C'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw FormatError("archive truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_archive(const std::string& path, const std::string& meta_json,
                  const std::vector<std::pair<std::string, const Tensor*>>& arrays) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(kMagic, 4);
  write_u32(f, kVersion);
  write_u32(f, static_cast<uint32_t>(meta_json.size()));
  f.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  write_u32(f, static_cast<uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    write_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<uint32_t>(t->shape.size()));
    for (int d : t->shape) write_u32(f, static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(t->data.data()),
            static_cast<std::streamsize>(sizeof(double) * t->data.size()));
  }
  if (!f) throw FormatError("write failed for '" + path + "'");
}

Archive load_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a parameter archive");
  const uint32_t version = read_u32(f);
  if (version != kVersion)
    throw FormatError("unsupported archive version " + std::to_string(version));
  Archive a;
  const uint32_t meta_len = read_u32(f);
  a.meta_json.resize(meta_len);
  f.read(a.meta_json.data(), meta_len);
  const uint32_t n_arrays = read_u32(f);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    const uint32_t name_len = read_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const uint32_t ndim = read_u32(f);
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(read_u32(f));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(sizeof(double) * t.data.size()));
    if (!f) throw FormatError("archive truncated in array '" + name + "'");
    a.arrays.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace tak
