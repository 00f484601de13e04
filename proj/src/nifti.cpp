#include "tak/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "tak/errors.hpp"

namespace tak {

namespace {

// NIfTI-1 datatype codes.
constexpr int16_t kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64;
constexpr size_t kHeaderLen = 348;
constexpr size_t kDataOffset = 352;  // header + 4-byte extension flag

template <typename T>
void put(std::vector<unsigned char>& buf, size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof v);
}

template <typename T>
T get(const std::vector<unsigned char>& buf, size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof v);
  return v;
}

std::vector<unsigned char> make_header(const std::array<int, 3>& dims, const Spacing& sp,
                                       int16_t datatype, int16_t bitpix) {
  std::vector<unsigned char> h(kDataOffset, 0);
  put<int32_t>(h, 0, 348);
  put<int16_t>(h, 40, 3);                               // dim[0]: rank
  put<int16_t>(h, 42, static_cast<int16_t>(dims[2]));   // nx = W
  put<int16_t>(h, 44, static_cast<int16_t>(dims[1]));   // ny = H
  put<int16_t>(h, 46, static_cast<int16_t>(dims[0]));   // nz = D
  for (int i = 4; i < 8; ++i) put<int16_t>(h, 40 + 2 * static_cast<size_t>(i), 1);
  put<int16_t>(h, 70, datatype);
  put<int16_t>(h, 72, bitpix);
  put<float>(h, 76, 1.0f);                              // pixdim[0]
  put<float>(h, 80, static_cast<float>(sp[2]));         // pixdim[1] = x spacing
  put<float>(h, 84, static_cast<float>(sp[1]));         // pixdim[2] = y
  put<float>(h, 88, static_cast<float>(sp[0]));         // pixdim[3] = z
  put<float>(h, 108, static_cast<float>(kDataOffset));  // vox_offset
  put<float>(h, 112, 1.0f);                             // scl_slope
  std::memcpy(h.data() + 344, "n+1\0", 4);
  return h;
}

bool is_gz(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

void write_file(const std::string& path, const std::vector<unsigned char>& header,
                const void* data, size_t data_len) {
  if (is_gz(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot write " + path);
    bool ok = gzwrite(f, header.data(), static_cast<unsigned>(header.size())) ==
              static_cast<int>(header.size());
    size_t written = 0;
    const unsigned char* p = static_cast<const unsigned char*>(data);
    while (ok && written < data_len) {
      const unsigned chunk = static_cast<unsigned>(std::min<size_t>(data_len - written, 1u << 24));
      ok = gzwrite(f, p + written, chunk) == static_cast<int>(chunk);
      written += chunk;
    }
    if (gzclose(f) != Z_OK || !ok) throw DataError("short write to " + path);
  } else {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot write " + path);
    bool ok = std::fwrite(header.data(), 1, header.size(), f) == header.size() &&
              std::fwrite(data, 1, data_len, f) == data_len;
    ok = std::fclose(f) == 0 && ok;
    if (!ok) throw DataError("short write to " + path);
  }
}

// gzread reads plain files transparently, so one reader serves both.
std::vector<unsigned char> read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path);
  std::vector<unsigned char> out;
  unsigned char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof chunk)) > 0)
    out.insert(out.end(), chunk, chunk + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw FormatError("corrupt stream in " + path);
  return out;
}

struct Parsed {
  std::array<int, 3> dims;
  Spacing spacing;
  int16_t datatype = 0;
  const unsigned char* data = nullptr;
  size_t data_len = 0;
};

Parsed parse(const std::vector<unsigned char>& raw, const std::string& path) {
  if (raw.size() < kDataOffset) throw FormatError(path + ": truncated header");
  if (get<int32_t>(raw, 0) != 348) {
    if (get<int32_t>(raw, 0) == 1543569408)
      throw FormatError(path + ": byte-swapped NIfTI is not supported");
    throw FormatError(path + ": sizeof_hdr is not 348");
  }
  if (std::memcmp(raw.data() + 344, "n+1\0", 4) != 0)
    throw FormatError(path + ": bad magic (expected n+1)");
  if (get<int16_t>(raw, 40) != 3) throw FormatError(path + ": only 3-D volumes are supported");
  Parsed p;
  p.dims[2] = get<int16_t>(raw, 42);
  p.dims[1] = get<int16_t>(raw, 44);
  p.dims[0] = get<int16_t>(raw, 46);
  if (p.dims[0] <= 0 || p.dims[1] <= 0 || p.dims[2] <= 0)
    throw FormatError(path + ": non-positive dimensions");
  p.spacing = {get<float>(raw, 88), get<float>(raw, 84), get<float>(raw, 80)};
  p.datatype = get<int16_t>(raw, 70);
  const float slope = get<float>(raw, 112), inter = get<float>(raw, 116);
  if ((slope != 0.0f && slope != 1.0f) || inter != 0.0f)
    throw FormatError(path + ": intensity rescaling is not supported");
  const float vox_offset = get<float>(raw, 108);
  const size_t off = static_cast<size_t>(vox_offset);
  if (vox_offset < static_cast<float>(kHeaderLen) || off > raw.size())
    throw FormatError(path + ": bad vox_offset");
  p.data = raw.data() + off;
  p.data_len = raw.size() - off;
  return p;
}

size_t dtype_size(int16_t dt, const std::string& path) {
  switch (dt) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: throw FormatError(path + ": unsupported datatype " + std::to_string(dt));
  }
}

template <typename T, typename F>
void decode(const Parsed& p, int64_t n, F&& emit) {
  for (int64_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, p.data + static_cast<size_t>(i) * sizeof(T), sizeof(T));
    emit(i, v);
  }
}

}  // namespace

void save_volume(const std::string& path, const Tensor& vol, const Spacing& spacing) {
  if (vol.ndim() != 3) throw ShapeError("save_volume: expected (D, H, W), got " + vol.shape_str());
  auto h = make_header({vol.shape[0], vol.shape[1], vol.shape[2]}, spacing, kFloat64, 64);
  write_file(path, h, vol.data.data(), vol.data.size() * sizeof(double));
}

Volume load_volume(const std::string& path) {
  const auto raw = read_file(path);
  const Parsed p = parse(raw, path);
  const int64_t n = static_cast<int64_t>(p.dims[0]) * p.dims[1] * p.dims[2];
  if (p.data_len < static_cast<size_t>(n) * dtype_size(p.datatype, path))
    throw FormatError(path + ": data shorter than header promises");
  Volume out;
  out.spacing = p.spacing;
  out.data = Tensor({p.dims[0], p.dims[1], p.dims[2]});
  auto emit = [&](int64_t i, double v) { out.data.data[static_cast<size_t>(i)] = v; };
  switch (p.datatype) {
    case kUint8: decode<uint8_t>(p, n, emit); break;
    case kInt16: decode<int16_t>(p, n, emit); break;
    case kInt32: decode<int32_t>(p, n, emit); break;
    case kFloat32: decode<float>(p, n, emit); break;
    case kFloat64: decode<double>(p, n, emit); break;
    default: dtype_size(p.datatype, path);
  }
  return out;
}

void save_labels(const std::string& path, const IntGrid& labels, const Spacing& spacing) {
  auto h = make_header(labels.dims, spacing, kInt32, 32);
  write_file(path, h, labels.v.data(), labels.v.size() * sizeof(int32_t));
}

LabelVolume load_labels(const std::string& path) {
  const auto raw = read_file(path);
  const Parsed p = parse(raw, path);
  const int64_t n = static_cast<int64_t>(p.dims[0]) * p.dims[1] * p.dims[2];
  if (p.data_len < static_cast<size_t>(n) * dtype_size(p.datatype, path))
    throw FormatError(path + ": data shorter than header promises");
  LabelVolume out;
  out.spacing = p.spacing;
  out.labels = IntGrid(p.dims[0], p.dims[1], p.dims[2]);
  auto emit = [&](int64_t i, int64_t v) { out.labels.v[static_cast<size_t>(i)] = static_cast<int32_t>(v); };
  switch (p.datatype) {
    case kUint8: decode<uint8_t>(p, n, emit); break;
    case kInt16: decode<int16_t>(p, n, emit); break;
    case kInt32: decode<int32_t>(p, n, emit); break;
    default: throw FormatError(path + ": labels must be integer-typed, got datatype " +
                               std::to_string(p.datatype));
  }
  return out;
}

}  // namespace tak
