#include "tak/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "tak/errors.hpp"

namespace tak {

namespace O = ops;

Tensor entropy_map(const Tensor& probs) {
  if (probs.ndim() != 4)
    throw ShapeError("entropy_map: probs must be (C, D, H, W), got " + probs.shape_str());
  const int c = probs.shape[0];
  const int64_t n = static_cast<int64_t>(probs.shape[1]) * probs.shape[2] * probs.shape[3];
  Tensor out({probs.shape[1], probs.shape[2], probs.shape[3]});
  for (int64_t v = 0; v < n; ++v) {
    double sum = 0.0, h = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double p = probs.data[static_cast<size_t>(ch) * n + v];
      if (p < 0.0)
        throw NormalizationError("entropy_map: negative probability at voxel " +
                                 std::to_string(v));
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw NormalizationError("entropy_map: channel sum " + std::to_string(sum) + " at voxel " +
                               std::to_string(v));
    out.data[static_cast<size_t>(v)] = h;
  }
  return out;
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (!(q > 0.0 && q <= 100.0))
    throw ConfigError("percentile must be in (0, 100], got " + std::to_string(q));
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const int64_t n = static_cast<int64_t>(values.size());
  int64_t rank = static_cast<int64_t>(std::ceil(q * static_cast<double>(n) / 100.0));
  rank = std::max<int64_t>(1, std::min(rank, n));
  return values[static_cast<size_t>(rank - 1)];
}

namespace {

IntGrid mask_from_threshold(const Tensor& ent, double thr) {
  IntGrid mask(ent.shape[0], ent.shape[1], ent.shape[2]);
  for (int64_t v = 0; v < ent.numel(); ++v)
    mask.v[static_cast<size_t>(v)] = ent.data[static_cast<size_t>(v)] <= thr ? 1 : 0;
  return mask;
}

}  // namespace

IntGrid select_confident(const Tensor& probs, double q) {
  Tensor ent = entropy_map(probs);
  return mask_from_threshold(ent, nearest_rank_percentile(ent.data, q));
}

std::vector<IntGrid> select_confident(const std::vector<const Tensor*>& probs, double q) {
  if (probs.empty()) throw ConfigError("select_confident: no probability maps");
  std::vector<Tensor> ents;
  ents.reserve(probs.size());
  std::vector<double> pooled;
  for (const Tensor* p : probs) {
    ents.push_back(entropy_map(*p));
    pooled.insert(pooled.end(), ents.back().data.begin(), ents.back().data.end());
  }
  const double thr = nearest_rank_percentile(std::move(pooled), q);
  std::vector<IntGrid> masks;
  masks.reserve(ents.size());
  for (const Tensor& e : ents) masks.push_back(mask_from_threshold(e, thr));
  return masks;
}

bool ClassFeatureBank::empty() const {
  for (const auto& [scale, sb] : scales)
    if (!sb.row_class.empty()) return false;
  return true;
}

std::vector<int> ClassFeatureBank::class_count(int scale) const {
  std::vector<int> counts(static_cast<size_t>(num_classes), 0);
  auto it = scales.find(scale);
  if (it == scales.end()) return counts;
  for (int k : it->second.row_class) counts[static_cast<size_t>(k - 1)]++;
  return counts;
}

BankBuilder::BankBuilder(std::vector<int> scales, int num_classes)
    : scales_(std::move(scales)), num_classes_(num_classes) {
  if (num_classes_ < 1) throw ConfigError("bank: need at least one foreground class");
  if (scales_.empty()) throw ConfigError("bank: need at least one scale");
  std::sort(scales_.begin(), scales_.end());
  for (int s : scales_) {
    if (s < 1) throw ConfigError("bank: scale indices are 1-based");
    candidates_[s].assign(static_cast<size_t>(num_classes_), {});
  }
}

void BankBuilder::add_sample(const MultiScaleFeatures& features, const IntGrid& labels,
                             const IntGrid* confident_mask) {
  for (int32_t lab : labels.v)
    if (lab < 0 || lab > num_classes_)
      throw LabelError("bank: label " + std::to_string(lab) + " outside [0, " +
                       std::to_string(num_classes_) + "]");
  if (confident_mask && !confident_mask->same_dims(labels))
    throw ShapeError("bank: confident mask dims differ from labels");

  const int sample_idx = static_cast<int>(samples_.size());
  IntGrid lbl = labels;
  IntGrid msk = confident_mask ? *confident_mask : IntGrid();
  int level = 1;
  for (int s : scales_) {
    for (; level < s; ++level) {
      lbl = downsample2_nearest(lbl);
      if (confident_mask) msk = downsample2_nearest(msk);
    }
    auto it = features.stages.find(s);
    if (it == features.stages.end() || !it->second)
      throw ShapeError("bank: features missing scale " + std::to_string(s));
    const auto& fs = it->second->value.shape;
    if (fs.size() != 4 || fs[1] != lbl.dims[0] || fs[2] != lbl.dims[1] || fs[3] != lbl.dims[2])
      throw ShapeError("bank: scale " + std::to_string(s) + " features " +
                       it->second->value.shape_str() + " do not match downsampled labels (" +
                       std::to_string(lbl.dims[0]) + "," + std::to_string(lbl.dims[1]) + "," +
                       std::to_string(lbl.dims[2]) + ")");
    auto& per_class = candidates_[s];
    for (int64_t v = 0; v < lbl.numel(); ++v) {
      const int32_t k = lbl.v[static_cast<size_t>(v)];
      if (k < 1) continue;
      if (confident_mask && msk.v[static_cast<size_t>(v)] == 0) continue;
      per_class[static_cast<size_t>(k - 1)].push_back({sample_idx, v});
    }
  }
  samples_.push_back(features);
}

ClassFeatureBank BankBuilder::build(int lambda_n, Rng& rng) const {
  if (lambda_n < 1) throw ConfigError("bank: sample cap must be >= 1");
  ClassFeatureBank bank;
  bank.num_classes = num_classes_;
  for (int s : scales_) {
    const auto& per_class = candidates_.at(s);
    // Draw per class in class order, then group rows by source sample so each
    // sample needs a single gather.
    std::vector<std::vector<int64_t>> voxels_by_sample(samples_.size());
    std::vector<std::vector<int>> classes_by_sample(samples_.size());
    for (int k = 1; k <= num_classes_; ++k) {
      const auto& cands = per_class[static_cast<size_t>(k - 1)];
      const int64_t avail = static_cast<int64_t>(cands.size());
      const int64_t take = std::min<int64_t>(lambda_n, avail);
      if (take == 0) continue;
      for (int64_t idx : rng.sample_without_replacement(avail, take)) {
        const Candidate& c = cands[static_cast<size_t>(idx)];
        voxels_by_sample[static_cast<size_t>(c.sample)].push_back(c.voxel);
        classes_by_sample[static_cast<size_t>(c.sample)].push_back(k);
      }
    }
    ScaleBank sb;
    std::vector<Var> parts;
    for (size_t i = 0; i < samples_.size(); ++i) {
      if (voxels_by_sample[i].empty()) continue;
      parts.push_back(O::gather_voxels(samples_[i].stages.at(s), voxels_by_sample[i]));
      sb.row_class.insert(sb.row_class.end(), classes_by_sample[i].begin(),
                          classes_by_sample[i].end());
    }
    if (!parts.empty()) {
      Var rows = parts.size() == 1 ? parts[0] : O::concat(parts, 0);
      sb.rows = O::l2_normalize_rows(rows);
    }
    bank.scales[s] = std::move(sb);
  }
  return bank;
}

ClassFeatureBank sample_class_features(const MultiScaleFeatures& features, const IntGrid& labels,
                                       const IntGrid* confident_mask, int num_classes,
                                       const std::vector<int>& scales, int lambda_n,
                                       uint64_t seed) {
  BankBuilder builder(scales, num_classes);
  builder.add_sample(features, labels, confident_mask);
  Rng rng(seed);
  return builder.build(lambda_n, rng);
}

Var contrastive_loss(const ClassFeatureBank& bank, const PriorEmbeddingSet* priors,
                     const ContrastiveConfig& cfg) {
  if (cfg.tau <= 0.0) throw ConfigError("contrastive temperature must be positive");
  const int K = bank.num_classes;
  if (priors && priors->K != K)
    throw ShapeError("contrastive_loss: priors cover " + std::to_string(priors->K) +
                     " classes, bank has " + std::to_string(K));

  std::vector<Var> scale_sums;
  int64_t omega = 0;
  for (const auto& [scale, sb] : bank.scales) {
    const int n_vis = static_cast<int>(sb.row_class.size());
    if (n_vis == 0) continue;

    std::vector<char> class_present(static_cast<size_t>(K + 1), 0);
    for (int k : sb.row_class) class_present[static_cast<size_t>(k)] = 1;
    int n_present = 0;
    for (int k = 1; k <= K; ++k) n_present += class_present[static_cast<size_t>(k)];
    if (n_present < 2) continue;

    Var rows = sb.rows;
    std::vector<int> row_class = sb.row_class;
    std::vector<char> active(static_cast<size_t>(n_vis), 1);
    if (priors) {
      auto pit = priors->p_proj.find(scale);
      auto sit = priors->s_proj.find(scale);
      if (pit == priors->p_proj.end() || sit == priors->s_proj.end())
        throw ShapeError("contrastive_loss: priors missing projection for scale " +
                         std::to_string(scale));
      const int c = rows->value.shape[1];
      if (pit->second->value.shape != std::vector<int>{K, c} ||
          sit->second->value.shape != std::vector<int>{K, c})
        throw ShapeError("contrastive_loss: projected priors at scale " + std::to_string(scale) +
                         " must be (" + std::to_string(K) + "," + std::to_string(c) + ")");
      rows = O::concat({rows, pit->second, sit->second}, 0);
      // Text rows of classes absent at this scale stay inert: they are kept
      // out of every anchor and pair set below.
      for (int rep = 0; rep < 2; ++rep)
        for (int k = 1; k <= K; ++k) {
          row_class.push_back(k);
          active.push_back(class_present[static_cast<size_t>(k)]);
        }
    }

    const int n = static_cast<int>(row_class.size());
    Var g = O::gram(rows, 1.0 / cfg.tau);
    std::vector<O::RowSubset> subs_p, subs_n;
    for (int r = 0; r < n; ++r) {
      if (!active[static_cast<size_t>(r)]) continue;
      std::vector<int> pos, neg;
      for (int j = 0; j < n; ++j) {
        if (!active[static_cast<size_t>(j)] || j == r) continue;
        (row_class[static_cast<size_t>(j)] == row_class[static_cast<size_t>(r)] ? pos : neg)
            .push_back(j);
      }
      if (pos.empty() || neg.empty()) continue;
      if (cfg.infonce_compat) {
        std::vector<int> denom = pos;
        denom.insert(denom.end(), neg.begin(), neg.end());
        subs_n.push_back({r, std::move(denom)});
      } else {
        subs_n.push_back({r, std::move(neg)});
      }
      subs_p.push_back({r, std::move(pos)});
    }
    if (subs_p.empty()) continue;
    Var lse_p = O::gather_logsumexp(g, subs_p);
    Var lse_n = O::gather_logsumexp(g, subs_n);
    scale_sums.push_back(O::sum(O::sub(lse_n, lse_p)));
    omega += static_cast<int64_t>(subs_p.size());
  }

  if (omega == 0)
    throw AlignmentSkipped("fewer than two classes with features at every scale");
  Var total = scale_sums[0];
  for (size_t i = 1; i < scale_sums.size(); ++i) total = O::add(total, scale_sums[i]);
  return O::scale(total, 1.0 / static_cast<double>(omega));
}

}  // namespace tak
