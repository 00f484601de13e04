#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tak/alignment.hpp"
#include "tak/backbone.hpp"
#include "tak/dynamic_head.hpp"
#include "tak/phantom.hpp"
#include "tak/text_prior.hpp"

namespace tak {

// Mean-teacher semi-supervised training: the student minimizes
//   L = L_s + lambda_u(epoch) * L_u + lambda_c * L_con
// and the teacher tracks the student by exponential moving average. L_s/L_u
// are cross entropy + soft Dice against ground-truth/pseudo labels; L_con is
// the text-visual contrastive alignment term, inactive before
// contrast_start_epoch.

struct TrainingConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::array<int, 3> patch_size{96, 96, 96};
  int n_labeled = 2, n_unlabeled = 2;
  double lambda_c = 0.1;
  int contrast_start_epoch = 20;
  int lambda_n = 40;  // bank cap per (class, scale); 0 disables alignment
  double lambda_u_max = 1.0;
  int lambda_u_ramp = 40;  // ramp length T_r in epochs
  double ema_alpha = 0.99;
  int epochs = 60;
  int steps_per_epoch = 25;
  double confidence_q = 75.0;  // entropy percentile gating unlabeled voxels
  double tau = 0.07;
  bool infonce_compat = false;
  double dice_eps = 1e-5;
  uint64_t seed = 0;
  std::string checkpoint_dir;  // when set, a divergence dumps state here
};

void validate_training_config(const TrainingConfig& cfg);

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 0;  // K foreground classes
  int d_text = 512;
  int controller_hidden = 256;
  HeadShape head_shape;                 // widths[0] must equal decoder width
  std::vector<int> contrastive_scales;  // empty: every encoder stage
};

// Eq.-3-style segmentation loss on probabilities: mean -log p[y] plus soft
// Dice (per-class mean, smoothing dice_eps).
Var supervised_loss(const Var& probs, const IntGrid& labels, double dice_eps = 1e-5);
// Eq. 4: the identical functional form against teacher pseudo-labels.
Var unsupervised_loss(const Var& probs, const IntGrid& pseudo, double dice_eps = 1e-5);

// Per-voxel argmax of (C, D, H, W) probabilities; ties break toward the
// lowest class index.
IntGrid pseudo_labels(const Tensor& probs);

// Gaussian consistency ramp: 0 at epoch 0, then
// lambda_max * exp(-5 (1 - min(epoch, ramp)/ramp)^2), plateau after `ramp`.
double lambda_u_schedule(int epoch, double lambda_max, int ramp_epochs);
// Polynomial decay base_lr * (1 - epoch/total)^power, clamped at >= 0.
double poly_lr(double base_lr, int epoch, int total_epochs, double power = 0.9);

// Eq. 5. l_con may be null (alignment disabled or skipped this step); the
// contrastive coefficient is exactly 0 before contrast_start_epoch and
// exactly lambda_c from it onward.
Var total_loss(const Var& l_s, const Var& l_u, const Var* l_con, int epoch,
               const TrainingConfig& cfg);

// Backbone + text-conditioned controller + per-scale text projector wired
// into one network.
class SegmentationModel {
 public:
  SegmentationModel(const ModelConfig& cfg, uint64_t init_seed);
  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;

  struct Forward {
    MultiScaleFeatures features;
    std::vector<Var> thetas;  // K+1 head parameter vectors, [0] = background
    Var logits;               // (K+1, D, H, W)
    Var probs;                // softmax of logits
  };
  // patch: (1, D, H, W) or (D, H, W); priors supply T_p/T_s rows for 1..K.
  Forward forward(const Var& patch, const PriorEmbeddingSet& priors) const;

  // Copy of `priors` with p_proj/s_proj rebuilt through this model's
  // projector, so alignment gradients reach the projector weights.
  PriorEmbeddingSet project_priors(const PriorEmbeddingSet& priors) const;

  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }
  const ModelConfig& config() const { return cfg_; }
  const std::vector<int>& contrastive_scales() const { return scales_; }

 private:
  ModelConfig cfg_;
  std::vector<int> scales_;
  ParamRegistry reg_;
  Rng init_rng_;  // consumed during construction only
  Backbone backbone_;
  Controller controller_;
  ScaleProjector projector_;
};

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise over
// registries paired by name and registration order.
void ema_update(const ParamRegistry& student, const ParamRegistry& teacher, double alpha);

// SGD with classical momentum and decoupled-from-nothing L2 weight decay:
// v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.
class SgdOptimizer {
 public:
  SgdOptimizer(ParamRegistry& reg, double momentum, double weight_decay);
  void step(double lr);
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  ParamRegistry& reg_;
  double momentum_, weight_decay_;
  std::vector<Tensor> velocity_;  // registry order
};

struct TrainCase {
  Tensor image;   // (D, H, W)
  IntGrid labels; // ignored for unlabeled cases
};

struct TrainingData {
  std::vector<TrainCase> labeled, unlabeled;
};

struct Batch {
  std::vector<PatchPair> labeled, unlabeled;
};

struct StepRecord {
  double l_s = 0.0, l_u = 0.0, l_con = 0.0;
  double lambda_u = 0.0, lr = 0.0, total = 0.0;
  bool alignment_skipped = false;
};

struct EpochStats {
  int epoch = 0, steps = 0;
  double mean_l_s = 0.0, mean_l_u = 0.0, mean_l_con = 0.0;
  double lambda_u = 0.0, lr = 0.0;
};

class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainingConfig& tcfg, const PriorEmbeddingSet& priors);

  Batch draw_batch(const TrainingData& data);
  // One optimizer step on an explicit batch, then one EMA update. Non-finite
  // totals dump a checkpoint (if checkpoint_dir is set) and raise
  // DivergenceError.
  StepRecord step(const Batch& batch, int epoch);
  EpochStats train_epoch(const TrainingData& data, int epoch);

  SegmentationModel& student() { return student_; }
  SegmentationModel& teacher() { return teacher_; }
  const TrainingConfig& config() const { return tcfg_; }
  const PriorEmbeddingSet& priors() const { return priors_; }
  SgdOptimizer& optimizer() { return opt_; }
  int64_t global_step() const { return global_step_; }
  Rng& rng() { return rng_; }

  // Newline-delimited JSON, one record per step:
  // {epoch, step, L_s, L_u, L_con, lambda_u, lr}.
  void set_log_sink(std::function<void(const std::string&)> sink) { sink_ = std::move(sink); }

  void save_checkpoint(const std::string& path, int epoch,
                       const std::string& config_hash) const;
  int load_checkpoint(const std::string& path);  // returns the stored epoch

 private:
  ModelConfig mcfg_;
  TrainingConfig tcfg_;
  PriorEmbeddingSet priors_;
  SegmentationModel student_, teacher_;
  SgdOptimizer opt_;
  Rng rng_;
  int64_t global_step_ = 0;
  std::function<void(const std::string&)> sink_;
};

}  // namespace tak
