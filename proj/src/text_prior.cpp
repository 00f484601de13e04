#include "tak/text_prior.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace tak {

namespace O = ops;

Tensor HashTextEncoder::encode(const std::string& text) {
  Rng rng(fnv1a64(text) ^ seed_);
  Tensor v({d_});
  double norm2 = 0.0;
  for (double& x : v.data) {
    x = rng.normal();
    norm2 += x * x;
  }
  if (norm2 < 1e-24) {
    v[0] = 1.0;
    norm2 = 1.0;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v.data) x *= inv;
  return v;
}

PriorEmbeddingSet encode_priors(const std::vector<AnatomicalKnowledgeRecord>& knowledge,
                                TextEncoder& encoder) {
  if (knowledge.empty()) throw EncodingFailed("empty knowledge set");
  PriorEmbeddingSet set;
  set.K = static_cast<int>(knowledge.size());
  set.d_text = encoder.d_text();
  set.t_p = Tensor({set.K, set.d_text});
  set.t_s = Tensor({set.K, set.d_text});
  for (const auto& rec : knowledge) {
    if (rec.class_id < 1 || rec.class_id > set.K)
      throw EncodingFailed("knowledge does not cover classes 1..K contiguously");
    const int row = rec.class_id - 1;
    for (int slot = 0; slot < 2; ++slot) {
      const std::string& text = slot == 0 ? rec.position_text : rec.shape_text;
      Tensor e;
      try {
        e = encoder.encode(text);
      } catch (const std::exception& ex) {
        throw EncodingFailed("class '" + rec.class_name + "': " + ex.what());
      }
      if (e.numel() != set.d_text)
        throw EncodingFailed("class '" + rec.class_name + "': encoder returned dimension " +
                             std::to_string(e.numel()));
      for (double x : e.data)
        if (!std::isfinite(x))
          throw EncodingFailed("class '" + rec.class_name + "': non-finite embedding");
      Tensor& dst = slot == 0 ? set.t_p : set.t_s;
      std::memcpy(dst.data.data() + static_cast<int64_t>(row) * set.d_text, e.data.data(),
                  sizeof(double) * static_cast<size_t>(set.d_text));
    }
  }
  return set;
}

ScaleProjector::ScaleProjector(const std::map<int, int>& scale_widths, int d_text,
                               ParamRegistry& reg, Rng& rng, const std::string& prefix)
    : widths_(scale_widths), d_text_(d_text) {
  if (scale_widths.empty()) throw ConfigError("projector needs at least one scale");
  for (const auto& [scale, width] : widths_) {
    const std::string name = prefix + "/s" + std::to_string(scale);
    layers_[scale] = {make_linear(reg, name + "/hidden", d_text, d_text, rng),
                      make_linear(reg, name + "/out", d_text, width, rng)};
  }
}

void ScaleProjector::project(PriorEmbeddingSet& set) const {
  if (set.d_text != d_text_)
    throw ShapeError("projector built for d_text " + std::to_string(d_text_) + ", embeddings are " +
                     std::to_string(set.d_text));
  set.p_proj.clear();
  set.s_proj.clear();
  const Var tp = make_constant(set.t_p);
  const Var ts = make_constant(set.t_s);
  for (const auto& [scale, lw] : layers_) {
    const auto& [hidden, out] = lw;
    set.p_proj[scale] = O::l2_normalize_rows(out(O::tanh_(hidden(tp))));
    set.s_proj[scale] = O::l2_normalize_rows(out(O::tanh_(hidden(ts))));
  }
}

namespace {

constexpr char kMagic[4] = {'T', 'A', 'K', 'E'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw FormatError("embedding cache truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ofstream& f, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(f, bits);
}

float read_f32(std::ifstream& f) {
  const uint32_t bits = read_u32(f);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_embedding_cache(const std::string& path, const PriorEmbeddingSet& set) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(kMagic, 4);
  write_u32(f, kVersion);
  write_u32(f, static_cast<uint32_t>(set.K));
  write_u32(f, static_cast<uint32_t>(set.d_text));
  for (int k = 0; k < set.K; ++k) {
    for (int d = 0; d < set.d_text; ++d)
      write_f32(f, static_cast<float>(set.t_p[static_cast<int64_t>(k) * set.d_text + d]));
    for (int d = 0; d < set.d_text; ++d)
      write_f32(f, static_cast<float>(set.t_s[static_cast<int64_t>(k) * set.d_text + d]));
  }
  if (!f) throw FormatError("write failed for '" + path + "'");
}

PriorEmbeddingSet load_embedding_cache(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("'" + path + "' is not an embedding cache");
  const uint32_t version = read_u32(f);
  if (version != kVersion)
    throw FormatError("unsupported embedding cache version " + std::to_string(version));
  PriorEmbeddingSet set;
  set.K = static_cast<int>(read_u32(f));
  set.d_text = static_cast<int>(read_u32(f));
  if (set.K <= 0 || set.d_text <= 0) throw FormatError("embedding cache header out of range");
  set.t_p = Tensor({set.K, set.d_text});
  set.t_s = Tensor({set.K, set.d_text});
  for (int k = 0; k < set.K; ++k) {
    for (int d = 0; d < set.d_text; ++d)
      set.t_p[static_cast<int64_t>(k) * set.d_text + d] = read_f32(f);
    for (int d = 0; d < set.d_text; ++d)
      set.t_s[static_cast<int64_t>(k) * set.d_text + d] = read_f32(f);
  }
  return set;
}

}  // namespace tak
