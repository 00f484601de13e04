#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "tak/autodiff.hpp"
#include "tak/backbone.hpp"
#include "tak/rng.hpp"
#include "tak/text_prior.hpp"

namespace tak {

// Voxelwise prediction entropy H = -Σ_c p ln p (natural log, 0·ln 0 := 0).
// probs: (C, D, H, W); per-voxel channel sums must be 1 ± 1e-5 with p ≥ 0,
// otherwise NormalizationError. Result (D, H, W), each value in [0, ln C].
Tensor entropy_map(const Tensor& probs);

// Nearest-rank percentile: the ⌈q/100·n⌉-th smallest value. 0 < q ≤ 100.
double nearest_rank_percentile(std::vector<double> values, double q);

// 0/1 mask of voxels whose entropy is ≤ the q-th percentile of the map's own
// entropy values.
IntGrid select_confident(const Tensor& probs, double q);
// Batch variant: a single threshold pooled over every map's entropies.
std::vector<IntGrid> select_confident(const std::vector<const Tensor*>& probs, double q);

// Per-scale bank of L2-normalized per-class visual feature rows. Background
// (label 0) never enters the bank.
struct ScaleBank {
  Var rows;                    // (n, C_i); null when n == 0
  std::vector<int> row_class;  // class id of each row, 1..K
};

struct ClassFeatureBank {
  int num_classes = 0;              // K foreground classes
  std::map<int, ScaleBank> scales;  // scale index -> bank

  bool empty() const;
  // |V[k][i]| for k = 1..K (index k-1) at the given scale.
  std::vector<int> class_count(int scale) const;
};

// Pools voxel candidates from one or more samples, then draws at most λ_N per
// (class, scale) uniformly without replacement. Labels are nearest-neighbor
// downsampled to each scale; a null confident mask means every voxel is
// eligible (labeled data), otherwise only voxels whose downsampled mask entry
// is nonzero contribute (unlabeled data gated by confidence).
class BankBuilder {
 public:
  BankBuilder(std::vector<int> scales, int num_classes);

  void add_sample(const MultiScaleFeatures& features, const IntGrid& labels,
                  const IntGrid* confident_mask);
  ClassFeatureBank build(int lambda_n, Rng& rng) const;

 private:
  struct Candidate {
    int sample;
    int64_t voxel;  // flat spatial index at the candidate's scale
  };

  std::vector<int> scales_;
  int num_classes_;
  std::vector<MultiScaleFeatures> samples_;
  // (scale, class) -> candidates, in insertion order.
  std::map<int, std::vector<std::vector<Candidate>>> candidates_;
};

// Single-sample convenience over BankBuilder.
ClassFeatureBank sample_class_features(const MultiScaleFeatures& features, const IntGrid& labels,
                                       const IntGrid* confident_mask, int num_classes,
                                       const std::vector<int>& scales, int lambda_n, uint64_t seed);

struct ContrastiveConfig {
  double tau = 0.07;
  // Standard InfoNCE denominator (positives and negatives) instead of the
  // asymmetric form written in the alignment equation. Default keeps the
  // equation verbatim: positives in the numerator, negatives alone in the
  // denominator.
  bool infonce_compat = false;
};

// Local contrastive alignment loss:
//   L = -(1/|Ω|) Σ_f log [ Σ_{p∈P(f)} exp(f·p/τ) / Σ_{n∈N(f)} exp(f·n/τ) ]
// Pairs never span scales. For every class with a nonempty V[k][i], the
// projected text rows T_p'ᵢ[k] and T_s'ᵢ[k] join F_k^i as anchors and pair
// members; classes with empty V[k][i] are skipped entirely. Anchors with
// empty P(f) or N(f) are excluded from Ω. priors may be null (visual rows
// only). Throws AlignmentSkipped when Ω ends up empty (in particular when
// fewer than two classes are nonempty at every scale).
Var contrastive_loss(const ClassFeatureBank& bank, const PriorEmbeddingSet* priors,
                     const ContrastiveConfig& cfg);

}  // namespace tak
