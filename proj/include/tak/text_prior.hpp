#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tak/knowledge.hpp"
#include "tak/nn.hpp"

namespace tak {

// Adapter over a text encoder (BiomedCLIP-style). Implementations must be
// deterministic: equal text => equal vector; outputs finite.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Tensor encode(const std::string& text) = 0;  // shape (d_text)
  virtual int d_text() const = 0;
};

// Seeded pseudo-random unit vector keyed by a digest of the text. Gives the
// fixture-grade properties the pipeline needs (deterministic, distinct texts
// nearly orthogonal in high dimension) without any pretrained weights.
class HashTextEncoder : public TextEncoder {
 public:
  explicit HashTextEncoder(int d_text = 512, uint64_t seed = 0) : d_(d_text), seed_(seed) {}
  Tensor encode(const std::string& text) override;
  int d_text() const override { return d_; }

 private:
  int d_;
  uint64_t seed_;
};

// Per-class text embeddings T_p/T_s, plus per-scale projections after
// ScaleProjector::project has run. Embedding row k-1 holds class k.
struct PriorEmbeddingSet {
  int K = 0;
  int d_text = 0;
  Tensor t_p, t_s;          // (K, d_text) each
  std::map<int, Var> p_proj;  // scale i -> (K, C_i), rows L2-normalized
  std::map<int, Var> s_proj;
};

// Encode both texts of every class; the knowledge set must cover 1..K.
PriorEmbeddingSet encode_priors(const std::vector<AnatomicalKnowledgeRecord>& knowledge,
                                TextEncoder& encoder);

// Learnable per-scale projection MLP: Linear(d_text→d_text) + tanh +
// Linear(d_text→C_i) + row L2 normalization. One projector per scale, shared
// across classes and by the position and shape slots.
class ScaleProjector {
 public:
  ScaleProjector(const std::map<int, int>& scale_widths, int d_text, ParamRegistry& reg, Rng& rng,
                 const std::string& prefix = "text_proj");

  // Rebuilds p_proj/s_proj graph outputs from the stored embeddings.
  void project(PriorEmbeddingSet& set) const;

  const std::map<int, int>& scale_widths() const { return widths_; }

 private:
  std::map<int, int> widths_;
  std::map<int, std::pair<LinearLayer, LinearLayer>> layers_;  // scale -> (hidden, out)
  int d_text_;
};

// Embedding cache: header {magic "TAKE", version, K, D_text} then K×2×D_text
// float32 little-endian values ordered (class, [p, s], dim).
void save_embedding_cache(const std::string& path, const PriorEmbeddingSet& set);
PriorEmbeddingSet load_embedding_cache(const std::string& path);

}  // namespace tak
