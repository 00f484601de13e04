#include "tak/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <utility>

namespace tak {

using nlohmann::json;

void validate_training_config(const TrainingConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  for (int d : cfg.patch_size)
    if (d < 1) throw ConfigError("patch_size entries must be positive");
  if (cfg.n_labeled < 1) throw ConfigError("n_labeled must be at least 1");
  if (cfg.n_unlabeled < 1) throw ConfigError("n_unlabeled must be at least 1");
  if (!(cfg.lambda_c >= 0.0)) throw ConfigError("lambda_c must be nonnegative");
  if (cfg.contrast_start_epoch < 0) throw ConfigError("contrast_start_epoch must be nonnegative");
  if (cfg.lambda_n < 0) throw ConfigError("lambda_n must be nonnegative");
  if (!(cfg.lambda_u_max >= 0.0)) throw ConfigError("lambda_u_max must be nonnegative");
  if (cfg.lambda_u_ramp < 1) throw ConfigError("lambda_u_ramp must be at least 1");
  if (!(cfg.ema_alpha >= 0.0 && cfg.ema_alpha <= 1.0))
    throw ConfigError("ema_alpha must lie in [0, 1]");
  if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (cfg.steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be at least 1");
  if (!(cfg.confidence_q > 0.0 && cfg.confidence_q <= 100.0))
    throw ConfigError("confidence_q must lie in (0, 100]");
  if (!(cfg.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(cfg.dice_eps > 0.0)) throw ConfigError("dice_eps must be positive");
}

Var supervised_loss(const Var& probs, const IntGrid& labels, double dice_eps) {
  return ops::add(ops::nll_with_labels(probs, labels),
                  ops::soft_dice_loss(probs, labels, dice_eps));
}

Var unsupervised_loss(const Var& probs, const IntGrid& pseudo, double dice_eps) {
  return supervised_loss(probs, pseudo, dice_eps);
}

IntGrid pseudo_labels(const Tensor& probs) {
  if (probs.ndim() != 4) throw ShapeError("pseudo_labels expects (C, D, H, W), got " + probs.shape_str());
  const int c = probs.dim(0);
  if (c < 1) throw ShapeError("pseudo_labels needs at least one channel");
  IntGrid out(probs.dim(1), probs.dim(2), probs.dim(3));
  const int64_t m = static_cast<int64_t>(out.v.size());
  for (int64_t i = 0; i < m; ++i) {
    int arg = 0;
    double best = probs[i];
    for (int k = 1; k < c; ++k) {
      const double p = probs[k * m + i];
      if (p > best) {  // strict: ties keep the lowest index
        best = p;
        arg = k;
      }
    }
    out.v[static_cast<size_t>(i)] = arg;
  }
  return out;
}

double lambda_u_schedule(int epoch, double lambda_max, int ramp_epochs) {
  if (ramp_epochs < 1) throw ConfigError("lambda_u ramp length must be at least 1");
  if (epoch <= 0) return 0.0;  // no consistency pressure before any teacher update
  const double t = std::min(static_cast<double>(epoch), static_cast<double>(ramp_epochs));
  const double x = 1.0 - t / ramp_epochs;
  return lambda_max * std::exp(-5.0 * x * x);
}

double poly_lr(double base_lr, int epoch, int total_epochs, double power) {
  if (total_epochs < 1) throw ConfigError("total_epochs must be at least 1");
  if (epoch < 0) throw ConfigError("epoch must be nonnegative");
  const double frac = std::min(1.0, static_cast<double>(epoch) / total_epochs);
  return base_lr * std::pow(1.0 - frac, power);
}

Var total_loss(const Var& l_s, const Var& l_u, const Var* l_con, int epoch,
               const TrainingConfig& cfg) {
  const double lu = lambda_u_schedule(epoch, cfg.lambda_u_max, cfg.lambda_u_ramp);
  Var out = ops::add(l_s, ops::scale(l_u, lu));
  if (l_con != nullptr && *l_con != nullptr && epoch >= cfg.contrast_start_epoch)
    out = ops::add(out, ops::scale(*l_con, cfg.lambda_c));
  return out;
}

namespace {

std::vector<int> resolved_scales(const ModelConfig& cfg) {
  if (cfg.num_classes < 1) throw ConfigError("num_classes must be at least 1");
  if (cfg.d_text < 1) throw ConfigError("d_text must be at least 1");
  if (cfg.controller_hidden < 1) throw ConfigError("controller_hidden must be at least 1");
  const auto& w = cfg.head_shape.widths;
  if (w.size() < 2) throw ConfigError("head_shape needs at least one layer");
  for (int x : w)
    if (x < 1) throw ConfigError("head_shape widths must be positive");
  if (w.back() != 1) throw ConfigError("head_shape must end in a single logit channel");
  if (w.front() != cfg.backbone.base_width)
    throw ConfigError("head_shape input width " + std::to_string(w.front()) +
                      " does not match decoder channels " + std::to_string(cfg.backbone.base_width));
  std::vector<int> scales = cfg.contrastive_scales;
  if (scales.empty())
    for (int i = 1; i <= cfg.backbone.stages; ++i) scales.push_back(i);
  std::sort(scales.begin(), scales.end());
  scales.erase(std::unique(scales.begin(), scales.end()), scales.end());
  for (int s : scales)
    if (s < 1 || s > cfg.backbone.stages)
      throw ConfigError("contrastive scale " + std::to_string(s) + " outside encoder stages 1..=" +
                        std::to_string(cfg.backbone.stages));
  return scales;
}

std::map<int, int> scale_width_map(const ModelConfig& cfg, const std::vector<int>& scales) {
  std::map<int, int> m;
  for (int s : scales) m[s] = cfg.backbone.stage_width(s);
  return m;
}

Tensor embedding_row(const Tensor& mat, int row) {
  const int d = mat.dim(1);
  Tensor out({d});
  std::copy_n(mat.data.begin() + static_cast<int64_t>(row) * d, d, out.data.begin());
  return out;
}

Var as_input_patch(const Tensor& image, int in_channels) {
  if (image.ndim() == 3) {
    if (in_channels != 1)
      throw ShapeError("rank-3 patch requires a single-channel backbone");
    Tensor chw({1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
    return make_constant(std::move(chw));
  }
  if (image.ndim() == 4) {
    if (image.dim(0) != in_channels)
      throw ShapeError("patch channels " + std::to_string(image.dim(0)) +
                       " do not match backbone input channels " + std::to_string(in_channels));
    return make_constant(image);
  }
  throw ShapeError("patch must be (D, H, W) or (C, D, H, W), got " + image.shape_str());
}

}  // namespace

SegmentationModel::SegmentationModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg),
      scales_(resolved_scales(cfg)),
      reg_(),
      init_rng_(init_seed),
      backbone_(cfg.backbone, reg_, init_rng_, "backbone"),
      controller_(cfg.d_text, cfg.backbone.top_width(), cfg.head_shape, cfg.controller_hidden,
                  reg_, init_rng_, "controller"),
      projector_(scale_width_map(cfg, scales_), cfg.d_text, reg_, init_rng_, "text_proj") {}

SegmentationModel::Forward SegmentationModel::forward(const Var& patch,
                                                      const PriorEmbeddingSet& priors) const {
  if (priors.K != cfg_.num_classes)
    throw ShapeError("prior set covers " + std::to_string(priors.K) + " classes, model expects " +
                     std::to_string(cfg_.num_classes));
  if (priors.d_text != cfg_.d_text)
    throw ShapeError("prior embedding width " + std::to_string(priors.d_text) +
                     " does not match model d_text " + std::to_string(cfg_.d_text));
  Forward out;
  out.features = backbone_.forward(patch);
  out.thetas.resize(static_cast<size_t>(cfg_.num_classes) + 1);
  out.thetas[0] = controller_.generate_background_params(out.features.global_F);
  for (int k = 1; k <= cfg_.num_classes; ++k) {
    const Var tp = make_constant(embedding_row(priors.t_p, k - 1));
    const Var ts = make_constant(embedding_row(priors.t_s, k - 1));
    out.thetas[static_cast<size_t>(k)] =
        controller_.generate_params(tp, ts, out.features.global_F);
  }
  out.logits = apply_heads(out.features.decoder_map, out.thetas, cfg_.head_shape);
  out.probs = ops::softmax_channels(out.logits);
  return out;
}

PriorEmbeddingSet SegmentationModel::project_priors(const PriorEmbeddingSet& priors) const {
  if (priors.K != cfg_.num_classes || priors.d_text != cfg_.d_text)
    throw ShapeError("prior set does not match model configuration");
  PriorEmbeddingSet out = priors;
  projector_.project(out);
  return out;
}

void ema_update(const ParamRegistry& student, const ParamRegistry& teacher, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("EMA alpha must lie in [0, 1]");
  const auto& se = student.entries();
  const auto& te = teacher.entries();
  if (se.size() != te.size())
    throw ShapeError("student and teacher registries hold different parameter counts");
  for (size_t i = 0; i < se.size(); ++i) {
    if (se[i].first != te[i].first)
      throw ShapeError("registry mismatch at index " + std::to_string(i) + ": " + se[i].first +
                       " vs " + te[i].first);
    Tensor& tv = te[i].second->value;
    const Tensor& sv = se[i].second->value;
    if (!tv.same_shape(sv))
      throw ShapeError("parameter " + se[i].first + " has shape " + sv.shape_str() +
                       " in the student but " + tv.shape_str() + " in the teacher");
    for (int64_t j = 0; j < tv.numel(); ++j) tv[j] = alpha * tv[j] + (1.0 - alpha) * sv[j];
  }
}

SgdOptimizer::SgdOptimizer(ParamRegistry& reg, double momentum, double weight_decay)
    : reg_(reg), momentum_(momentum), weight_decay_(weight_decay) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  for (const auto& e : reg_.entries()) velocity_.push_back(Tensor::zeros(e.second->value.shape));
}

void SgdOptimizer::step(double lr) {
  const auto& entries = reg_.entries();
  if (entries.size() != velocity_.size())
    throw ShapeError("optimizer state no longer matches the registry");
  for (size_t i = 0; i < entries.size(); ++i) {
    const Var& p = entries[i].second;
    Tensor& val = p->value;
    Tensor& vel = velocity_[i];
    const bool has_grad = p->grad.numel() == val.numel();
    for (int64_t j = 0; j < val.numel(); ++j) {
      const double g = (has_grad ? p->grad[j] : 0.0) + weight_decay_ * val[j];
      vel[j] = momentum_ * vel[j] + g;
      val[j] -= lr * vel[j];
    }
  }
}

Trainer::Trainer(const ModelConfig& mcfg, const TrainingConfig& tcfg,
                 const PriorEmbeddingSet& priors)
    : mcfg_((validate_training_config(tcfg), mcfg)),
      tcfg_(tcfg),
      priors_(priors),
      student_(mcfg, tcfg.seed),
      teacher_(mcfg, tcfg.seed),
      opt_(student_.registry(), tcfg.momentum, tcfg.weight_decay),
      rng_(fnv1a64("trainer/data", tcfg.seed)) {
  if (priors_.K != mcfg_.num_classes)
    throw ConfigError("prior set covers " + std::to_string(priors_.K) + " classes, model expects " +
                      std::to_string(mcfg_.num_classes));
  if (priors_.d_text != mcfg_.d_text)
    throw ConfigError("prior embedding width " + std::to_string(priors_.d_text) +
                      " does not match configured d_text " + std::to_string(mcfg_.d_text));
}

Batch Trainer::draw_batch(const TrainingData& data) {
  if (data.labeled.empty()) throw DataError("training data holds no labeled cases");
  if (data.unlabeled.empty()) throw DataError("training data holds no unlabeled cases");
  Batch b;
  for (int i = 0; i < tcfg_.n_labeled; ++i) {
    const TrainCase& c = data.labeled[rng_.uniform_index(data.labeled.size())];
    b.labeled.push_back(random_patch(c.image, c.labels, tcfg_.patch_size, rng_));
  }
  for (int i = 0; i < tcfg_.n_unlabeled; ++i) {
    const TrainCase& c = data.unlabeled[rng_.uniform_index(data.unlabeled.size())];
    b.unlabeled.push_back(random_patch(c.image, c.labels, tcfg_.patch_size, rng_));
  }
  return b;
}

StepRecord Trainer::step(const Batch& batch, int epoch) {
  if (batch.labeled.empty()) throw DataError("a training step needs at least one labeled patch");
  if (batch.unlabeled.empty())
    throw DataError("a training step needs at least one unlabeled patch");
  StepRecord rec;
  rec.lr = poly_lr(tcfg_.lr, epoch, tcfg_.epochs);
  rec.lambda_u = lambda_u_schedule(epoch, tcfg_.lambda_u_max, tcfg_.lambda_u_ramp);
  const int in_ch = mcfg_.backbone.in_channels;

  // Student on labeled patches: Eq. 3 averaged over the sub-batch.
  std::vector<SegmentationModel::Forward> fwd_l;
  Var ls_sum;
  for (const PatchPair& p : batch.labeled) {
    SegmentationModel::Forward f = student_.forward(as_input_patch(p.image, in_ch), priors_);
    Var l = supervised_loss(f.probs, p.labels, tcfg_.dice_eps);
    ls_sum = ls_sum ? ops::add(ls_sum, l) : l;
    fwd_l.push_back(std::move(f));
  }
  const Var l_s = ops::scale(ls_sum, 1.0 / static_cast<double>(batch.labeled.size()));

  // Teacher predictions on unlabeled patches (no graph): pseudo-labels plus
  // the pooled confidence gate.
  std::vector<Tensor> teacher_probs;
  {
    NoGradGuard ng;
    for (const PatchPair& p : batch.unlabeled)
      teacher_probs.push_back(
          teacher_.forward(as_input_patch(p.image, in_ch), priors_).probs->value);
  }
  std::vector<IntGrid> pseudo;
  std::vector<const Tensor*> prob_ptrs;
  for (const Tensor& t : teacher_probs) {
    pseudo.push_back(pseudo_labels(t));
    prob_ptrs.push_back(&t);
  }
  const std::vector<IntGrid> masks = select_confident(prob_ptrs, tcfg_.confidence_q);

  // Student on unlabeled patches: Eq. 4 against the pseudo-labels.
  std::vector<SegmentationModel::Forward> fwd_u;
  Var lu_sum;
  for (size_t i = 0; i < batch.unlabeled.size(); ++i) {
    SegmentationModel::Forward f =
        student_.forward(as_input_patch(batch.unlabeled[i].image, in_ch), priors_);
    Var l = unsupervised_loss(f.probs, pseudo[i], tcfg_.dice_eps);
    lu_sum = lu_sum ? ops::add(lu_sum, l) : l;
    fwd_u.push_back(std::move(f));
  }
  const Var l_u = ops::scale(lu_sum, 1.0 / static_cast<double>(batch.unlabeled.size()));

  // Contrastive alignment, active once the schedule and the bank allow it.
  Var l_con;
  const bool want_con =
      epoch >= tcfg_.contrast_start_epoch && tcfg_.lambda_c > 0.0 && tcfg_.lambda_n > 0;
  if (want_con) {
    BankBuilder builder(student_.contrastive_scales(), mcfg_.num_classes);
    for (size_t i = 0; i < batch.labeled.size(); ++i)
      builder.add_sample(fwd_l[i].features, batch.labeled[i].labels, nullptr);
    for (size_t i = 0; i < batch.unlabeled.size(); ++i)
      builder.add_sample(fwd_u[i].features, pseudo[i], &masks[i]);
    const ClassFeatureBank bank = builder.build(tcfg_.lambda_n, rng_);
    const PriorEmbeddingSet projected = student_.project_priors(priors_);
    ContrastiveConfig ccfg;
    ccfg.tau = tcfg_.tau;
    ccfg.infonce_compat = tcfg_.infonce_compat;
    try {
      l_con = contrastive_loss(bank, &projected, ccfg);
    } catch (const AlignmentSkipped&) {
      rec.alignment_skipped = true;
    }
  }

  const Var total = total_loss(l_s, l_u, l_con ? &l_con : nullptr, epoch, tcfg_);
  rec.l_s = l_s->value[0];
  rec.l_u = l_u->value[0];
  rec.l_con = l_con ? l_con->value[0] : 0.0;
  rec.total = total->value[0];
  if (!std::isfinite(rec.total)) {
    if (!tcfg_.checkpoint_dir.empty()) {
      std::filesystem::create_directories(tcfg_.checkpoint_dir);
      save_checkpoint(tcfg_.checkpoint_dir + "/diverged.takc", epoch, "");
    }
    throw DivergenceError("total loss is not finite at epoch " + std::to_string(epoch) +
                          ", step " + std::to_string(global_step_));
  }

  student_.registry().zero_grad();
  backward(total);
  opt_.step(rec.lr);
  ema_update(student_.registry(), teacher_.registry(), tcfg_.ema_alpha);

  if (sink_) {
    json line;
    line["epoch"] = epoch;
    line["step"] = global_step_;
    line["L_s"] = rec.l_s;
    line["L_u"] = rec.l_u;
    line["L_con"] = rec.l_con;
    line["lambda_u"] = rec.lambda_u;
    line["lr"] = rec.lr;
    sink_(line.dump());
  }
  ++global_step_;
  return rec;
}

EpochStats Trainer::train_epoch(const TrainingData& data, int epoch) {
  EpochStats stats;
  stats.epoch = epoch;
  for (int s = 0; s < tcfg_.steps_per_epoch; ++s) {
    const Batch batch = draw_batch(data);
    const StepRecord rec = step(batch, epoch);
    stats.mean_l_s += rec.l_s;
    stats.mean_l_u += rec.l_u;
    stats.mean_l_con += rec.l_con;
    stats.lambda_u = rec.lambda_u;
    stats.lr = rec.lr;
    ++stats.steps;
  }
  stats.mean_l_s /= stats.steps;
  stats.mean_l_u /= stats.steps;
  stats.mean_l_con /= stats.steps;
  return stats;
}

void Trainer::save_checkpoint(const std::string& path, int epoch,
                              const std::string& config_hash) const {
  json meta;
  meta["epoch"] = epoch;
  meta["seed"] = tcfg_.seed;
  meta["config_hash"] = config_hash;
  meta["global_step"] = global_step_;
  std::vector<std::pair<std::string, const Tensor*>> arrays;
  const auto& se = student_.registry().entries();
  const auto& te = teacher_.registry().entries();
  for (const auto& e : se) arrays.emplace_back("student/" + e.first, &e.second->value);
  for (const auto& e : te) arrays.emplace_back("teacher/" + e.first, &e.second->value);
  for (size_t i = 0; i < se.size(); ++i)
    arrays.emplace_back("momentum/" + se[i].first, &opt_.velocity()[i]);
  save_archive(path, meta.dump(), arrays);
}

int Trainer::load_checkpoint(const std::string& path) {
  const Archive a = load_archive(path);
  json meta;
  try {
    meta = json::parse(a.meta_json);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (!meta.contains("epoch") || !meta["epoch"].is_number_integer())
    throw DataError("checkpoint metadata is missing the epoch");
  auto restore = [&](const std::string& name, Tensor& dst) {
    const Tensor* t = a.find(name);
    if (t == nullptr) throw DataError("checkpoint is missing array " + name);
    if (!t->same_shape(dst))
      throw ShapeError("checkpoint array " + name + " has shape " + t->shape_str() +
                       ", expected " + dst.shape_str());
    dst = *t;
  };
  const auto& se = student_.registry().entries();
  const auto& te = teacher_.registry().entries();
  for (const auto& e : se) restore("student/" + e.first, e.second->value);
  for (const auto& e : te) restore("teacher/" + e.first, e.second->value);
  for (size_t i = 0; i < se.size(); ++i) restore("momentum/" + se[i].first, opt_.velocity()[i]);
  global_step_ = meta.value("global_step", static_cast<int64_t>(0));
  return meta["epoch"].get<int>();
}

}  // namespace tak
