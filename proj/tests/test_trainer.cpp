#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "tak/errors.hpp"
#include "tak/trainer.hpp"

using namespace tak;
namespace O = ops;

namespace {

ModelConfig tiny_model(int num_classes = 2) {
  ModelConfig m;
  m.backbone.stages = 2;
  m.backbone.base_width = 2;
  m.num_classes = num_classes;
  m.d_text = 6;
  m.controller_hidden = 6;
  m.head_shape.widths = {2, 1};
  m.contrastive_scales = {1, 2};
  return m;
}

TrainingConfig tiny_train() {
  TrainingConfig t;
  t.lr = 0.05;
  t.patch_size = {8, 8, 8};
  t.n_labeled = 1;
  t.n_unlabeled = 1;
  t.lambda_c = 0.1;
  t.contrast_start_epoch = 0;
  t.lambda_n = 4;
  t.epochs = 10;
  t.steps_per_epoch = 2;
  t.seed = 11;
  return t;
}

PriorEmbeddingSet random_priors(int k, int d, uint64_t seed) {
  Rng rng(seed);
  PriorEmbeddingSet set;
  set.K = k;
  set.d_text = d;
  set.t_p = Tensor({k, d});
  set.t_s = Tensor({k, d});
  for (auto& v : set.t_p.data) v = rng.normal() * 0.8;
  for (auto& v : set.t_s.data) v = rng.normal() * 0.8;
  return set;
}

// Class 1 fills the bottom z slab, class 2 the top one, background between:
// both classes survive nearest-neighbor downsampling to every encoder scale.
TrainCase slab_case(uint64_t seed, int d = 8) {
  Rng rng(seed);
  TrainCase c;
  c.image = Tensor({d, d, d});
  for (auto& v : c.image.data) v = rng.uniform();
  c.labels = IntGrid(d, d, d);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) c.labels.at(z, y, x) = z < d * 3 / 8 ? 1 : (z >= d * 5 / 8 ? 2 : 0);
  return c;
}

PatchPair full_patch(const TrainCase& c) { return PatchPair{c.image, c.labels, {0, 0, 0}}; }

Var chw(const Tensor& vol) {
  Tensor t({1, vol.dim(0), vol.dim(1), vol.dim(2)}, vol.data);
  return make_constant(std::move(t));
}

bool registries_equal(const ParamRegistry& a, const ParamRegistry& b) {
  const auto& ea = a.entries();
  const auto& eb = b.entries();
  if (ea.size() != eb.size()) return false;
  for (size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].first != eb[i].first) return false;
    const Tensor& ta = ea[i].second->value;
    const Tensor& tb = eb[i].second->value;
    if (!ta.same_shape(tb)) return false;
    for (int64_t j = 0; j < ta.numel(); ++j)
      if (ta[j] != tb[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("lambda_u schedule: zero at epoch 0, Gaussian ramp, plateau") {
  CHECK(lambda_u_schedule(0, 1.0, 40) == 0.0);
  CHECK(lambda_u_schedule(40, 1.0, 40) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lambda_u_schedule(77, 1.0, 40) == doctest::Approx(1.0).epsilon(1e-12));
  // Halfway up the ramp: exp(-5 * (1 - 20/40)^2) = exp(-1.25).
  CHECK(lambda_u_schedule(20, 1.0, 40) == doctest::Approx(std::exp(-1.25)).epsilon(1e-12));
  CHECK(lambda_u_schedule(20, 0.25, 40) ==
        doctest::Approx(0.25 * std::exp(-1.25)).epsilon(1e-12));
  double prev = -1.0;
  for (int e = 0; e <= 80; ++e) {
    const double v = lambda_u_schedule(e, 1.0, 40);
    CHECK(v >= prev);
    prev = v;
  }
  CHECK_THROWS_AS(lambda_u_schedule(3, 1.0, 0), ConfigError);
}

TEST_CASE("poly_lr decays polynomially and reaches zero at the horizon") {
  CHECK(poly_lr(0.01, 0, 60) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(poly_lr(0.01, 60, 60) == 0.0);
  CHECK(poly_lr(0.01, 90, 60) == 0.0);
  CHECK(poly_lr(0.01, 30, 60) == doctest::Approx(0.01 * std::pow(0.5, 0.9)).epsilon(1e-12));
  double prev = 1.0;
  for (int e = 0; e <= 60; ++e) {
    const double v = poly_lr(0.01, e, 60);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS(poly_lr(0.01, 3, 0), ConfigError);
  CHECK_THROWS_AS(poly_lr(0.01, -1, 60), ConfigError);
}

TEST_CASE("supervised loss is exactly zero on one-hot correct predictions") {
  IntGrid labels(2, 2, 2);
  for (int i = 0; i < 8; ++i) labels.v[static_cast<size_t>(i)] = i % 3;
  Tensor probs({3, 2, 2, 2});
  for (int64_t i = 0; i < 8; ++i) probs[labels.v[static_cast<size_t>(i)] * 8 + i] = 1.0;
  const Var loss = supervised_loss(make_constant(probs), labels, 1e-5);
  CHECK(loss->value[0] == 0.0);
}

TEST_CASE("supervised loss: uniform two-class prediction = ln 2 + dice oracle") {
  Tensor probs = Tensor::full({2, 1, 2, 2}, 0.5);
  IntGrid labels(1, 2, 2);
  labels.v = {0, 0, 1, 1};
  const double eps = 1e-5;
  // Both classes: intersection 0.5*2 = 1, probability mass 0.5*4 = 2, two
  // ground-truth voxels each.
  const double dice_c = (2.0 * 1.0 + eps) / (2.0 + 2.0 + eps);
  const double expected = std::log(2.0) + (1.0 - dice_c);
  const Var loss = supervised_loss(make_constant(probs), labels, eps);
  CHECK(loss->value[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("supervised loss matches a brute-force oracle on random predictions") {
  Rng rng(17);
  const int c = 3, d = 2, h = 2, w = 2;
  const int64_t m = d * h * w;
  Tensor probs({c, d, h, w});
  for (int64_t i = 0; i < m; ++i) {
    double s = 0;
    std::vector<double> raw(c);
    for (int k = 0; k < c; ++k) {
      raw[static_cast<size_t>(k)] = 0.05 + rng.uniform();
      s += raw[static_cast<size_t>(k)];
    }
    for (int k = 0; k < c; ++k) probs[k * m + i] = raw[static_cast<size_t>(k)] / s;
  }
  IntGrid labels(d, h, w);
  for (auto& v : labels.v) v = static_cast<int32_t>(rng.uniform_index(c));
  const double eps = 1e-5;

  double ce = 0.0;
  for (int64_t i = 0; i < m; ++i) ce -= std::log(probs[labels.v[static_cast<size_t>(i)] * m + i]);
  ce /= static_cast<double>(m);
  double dice = 0.0;
  for (int k = 0; k < c; ++k) {
    double inter = 0, psum = 0, gcount = 0;
    for (int64_t i = 0; i < m; ++i) {
      const double p = probs[k * m + i];
      const bool g = labels.v[static_cast<size_t>(i)] == k;
      psum += p;
      if (g) {
        inter += p;
        gcount += 1.0;
      }
    }
    dice += (2.0 * inter + eps) / (psum + gcount + eps);
  }
  const double expected = ce + (1.0 - dice / c);

  const Var loss = supervised_loss(make_constant(probs), labels, eps);
  CHECK(loss->value[0] == doctest::Approx(expected).epsilon(1e-9));
  const Var uloss = unsupervised_loss(make_constant(probs), labels, eps);
  CHECK(uloss->value[0] == loss->value[0]);
}

TEST_CASE("pseudo-labels take the channel argmax, ties toward the lower class") {
  Tensor probs({3, 1, 1, 4});
  // voxel 0: clear class 2; voxel 1: tie 0 vs 1 -> 0; voxel 2: tie 1 vs 2 -> 1;
  // voxel 3: clear class 0.
  const double grid[3][4] = {{0.1, 0.4, 0.2, 0.8}, {0.2, 0.4, 0.4, 0.1}, {0.7, 0.2, 0.4, 0.1}};
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 4; ++i) probs[k * 4 + i] = grid[k][i];
  const IntGrid out = pseudo_labels(probs);
  CHECK(out.v == std::vector<int32_t>{2, 0, 1, 0});
  CHECK_THROWS_AS(pseudo_labels(Tensor({2, 2, 2})), ShapeError);
}

TEST_CASE("EMA update: convex combination with closed-form checks") {
  auto one_param = [](double v) {
    ParamRegistry r;
    r.add("w", Tensor({1}, {v}));
    return r;
  };
  ParamRegistry student = one_param(2.0);

  ParamRegistry teacher = one_param(1.0);
  ema_update(student, teacher, 0.9);
  CHECK(teacher.entries()[0].second->value[0] == doctest::Approx(1.1).epsilon(1e-15));

  ParamRegistry frozen = one_param(1.0);
  ema_update(student, frozen, 1.0);
  CHECK(frozen.entries()[0].second->value[0] == 1.0);

  ParamRegistry copied = one_param(1.0);
  ema_update(student, copied, 0.0);
  CHECK(copied.entries()[0].second->value[0] == 2.0);

  CHECK_THROWS_AS(ema_update(student, teacher, 1.5), ConfigError);
  CHECK_THROWS_AS(ema_update(student, teacher, -0.1), ConfigError);

  ParamRegistry other_name;
  other_name.add("v", Tensor({1}, {0.0}));
  CHECK_THROWS_AS(ema_update(student, other_name, 0.5), ShapeError);
  ParamRegistry other_shape;
  other_shape.add("w", Tensor({2}, {0.0, 0.0}));
  CHECK_THROWS_AS(ema_update(student, other_shape, 0.5), ShapeError);
  ParamRegistry empty;
  CHECK_THROWS_AS(ema_update(student, empty, 0.5), ShapeError);
}

TEST_CASE("EMA error contracts geometrically toward a frozen student") {
  ParamRegistry student, teacher;
  student.add("w", Tensor({1}, {1.0}));
  teacher.add("w", Tensor({1}, {3.0}));
  const double alpha = 0.8;
  for (int k = 1; k <= 10; ++k) {
    ema_update(student, teacher, alpha);
    const double err = teacher.entries()[0].second->value[0] - 1.0;
    CHECK(err == doctest::Approx(2.0 * std::pow(alpha, k)).epsilon(1e-12));
  }
}

TEST_CASE("EMA result stays inside the [teacher, student] interval") {
  Rng rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    ParamRegistry student, teacher;
    const double s = rng.normal() * 3.0;
    const double t = rng.normal() * 3.0;
    student.add("w", Tensor({1}, {s}));
    teacher.add("w", Tensor({1}, {t}));
    ema_update(student, teacher, rng.uniform());
    const double out = teacher.entries()[0].second->value[0];
    CHECK(out >= std::min(s, t) - 1e-12);
    CHECK(out <= std::max(s, t) + 1e-12);
  }
}

TEST_CASE("total loss: the contrastive term switches on at the configured epoch") {
  TrainingConfig cfg = tiny_train();
  cfg.contrast_start_epoch = 20;
  cfg.lambda_c = 0.1;
  const Var l_s = make_constant(Tensor::scalar(1.5));
  const Var l_u = make_constant(Tensor::scalar(0.5));
  const Var l_con = make_constant(Tensor::scalar(2.0));

  const Var at19 = total_loss(l_s, l_u, &l_con, 19, cfg);
  const double base19 = 1.5 + lambda_u_schedule(19, cfg.lambda_u_max, cfg.lambda_u_ramp) * 0.5;
  CHECK(at19->value[0] == doctest::Approx(base19).epsilon(1e-15));

  const Var at20 = total_loss(l_s, l_u, &l_con, 20, cfg);
  const double base20 = 1.5 + lambda_u_schedule(20, cfg.lambda_u_max, cfg.lambda_u_ramp) * 0.5;
  CHECK(at20->value[0] == doctest::Approx(base20 + 0.2).epsilon(1e-15));

  // Epoch 0: lambda_u is exactly zero, so the total IS the supervised loss.
  const Var at0 = total_loss(l_s, l_u, nullptr, 0, cfg);
  CHECK(at0->value[0] == 1.5);
}

TEST_CASE("SGD with momentum and weight decay matches hand-computed updates") {
  ParamRegistry reg;
  Var p = reg.add("w", Tensor({2}, {1.0, -2.0}));
  SgdOptimizer opt(reg, 0.9, 0.1);

  p->ensure_grad();
  p->grad[0] = 0.5;
  p->grad[1] = -1.0;
  opt.step(0.1);
  // v = g + wd*theta = {0.6, -1.2}; theta -= 0.1 * v.
  CHECK(p->value[0] == doctest::Approx(0.94).epsilon(1e-15));
  CHECK(p->value[1] == doctest::Approx(-1.88).epsilon(1e-15));

  p->grad[0] = 0.5;
  p->grad[1] = -1.0;
  opt.step(0.1);
  // v = 0.9*v + (g + wd*theta) = {1.134, -2.268}.
  CHECK(p->value[0] == doctest::Approx(0.8266).epsilon(1e-12));
  CHECK(p->value[1] == doctest::Approx(-1.6532).epsilon(1e-12));

  CHECK_THROWS_AS(SgdOptimizer(reg, 1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(SgdOptimizer(reg, 0.9, -0.5), ConfigError);
}

TEST_CASE("configuration validation rejects out-of-range settings") {
  TrainingConfig t = tiny_train();
  CHECK_NOTHROW(validate_training_config(t));
  t.lr = 0.0;
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);
  t = tiny_train();
  t.ema_alpha = 1.5;
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);
  t = tiny_train();
  t.confidence_q = 0.0;
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);
  t = tiny_train();
  t.epochs = 0;
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);
  t = tiny_train();
  t.lambda_u_ramp = 0;
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);
  t = tiny_train();
  t.patch_size = {8, 0, 8};
  CHECK_THROWS_AS(validate_training_config(t), ConfigError);

  ModelConfig m = tiny_model();
  m.head_shape.widths = {4, 1};  // decoder emits base_width = 2 channels
  CHECK_THROWS_AS(SegmentationModel(m, 1), ConfigError);
  m = tiny_model();
  m.contrastive_scales = {1, 5};
  CHECK_THROWS_AS(SegmentationModel(m, 1), ConfigError);
  m = tiny_model();
  m.num_classes = 0;
  CHECK_THROWS_AS(SegmentationModel(m, 1), ConfigError);
  m = tiny_model();
  m.head_shape.widths = {2, 3};
  CHECK_THROWS_AS(SegmentationModel(m, 1), ConfigError);
}

TEST_CASE("model forward: shapes, softmax normalization, per-class heads") {
  const ModelConfig mcfg = tiny_model(2);
  SegmentationModel model(mcfg, 31);
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  const TrainCase c = slab_case(41);

  const auto f = model.forward(chw(c.image), priors);
  REQUIRE(f.logits->value.shape == std::vector<int>{3, 8, 8, 8});
  REQUIRE(f.thetas.size() == 3);
  for (const Var& th : f.thetas)
    CHECK(th->value.numel() == mcfg.head_shape.theta_len());
  const int64_t m = 8 * 8 * 8;
  for (int64_t i = 0; i < m; ++i) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += f.probs->value[k * m + i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }

  PriorEmbeddingSet wrong = random_priors(3, 6, 3);
  CHECK_THROWS_AS(model.forward(chw(c.image), wrong), ShapeError);
  PriorEmbeddingSet narrow_prior = random_priors(2, 4, 3);
  CHECK_THROWS_AS(model.forward(chw(c.image), narrow_prior), ShapeError);
}

TEST_CASE("identical priors produce identical heads; distinct priors diverge") {
  const ModelConfig mcfg = tiny_model(2);
  SegmentationModel model(mcfg, 31);
  const TrainCase c = slab_case(43);

  PriorEmbeddingSet same = random_priors(2, 6, 7);
  for (int j = 0; j < 6; ++j) {
    same.t_p[6 + j] = same.t_p[j];
    same.t_s[6 + j] = same.t_s[j];
  }
  const auto fs = model.forward(chw(c.image), same);
  const int64_t tl = fs.thetas[1]->value.numel();
  for (int64_t j = 0; j < tl; ++j) CHECK(fs.thetas[1]->value[j] == fs.thetas[2]->value[j]);
  const int64_t m = 8 * 8 * 8;
  for (int64_t i = 0; i < m; ++i)
    CHECK(fs.logits->value[1 * m + i] == fs.logits->value[2 * m + i]);

  const PriorEmbeddingSet distinct = random_priors(2, 6, 9);
  const auto fd = model.forward(chw(c.image), distinct);
  double max_diff = 0;
  for (int64_t j = 0; j < tl; ++j)
    max_diff = std::max(max_diff, std::abs(fd.thetas[1]->value[j] - fd.thetas[2]->value[j]));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("a lambda-zero step reproduces a purely supervised update bitwise") {
  const ModelConfig mcfg = tiny_model(2);
  TrainingConfig tcfg = tiny_train();
  tcfg.lambda_c = 0.0;
  tcfg.lambda_u_max = 0.0;
  tcfg.ema_alpha = 0.5;
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  const TrainCase lab = slab_case(51);
  const TrainCase unl = slab_case(52);
  Batch batch;
  batch.labeled.push_back(full_patch(lab));
  batch.unlabeled.push_back(full_patch(unl));

  Trainer trainer(mcfg, tcfg, priors);
  const StepRecord rec = trainer.step(batch, 3);
  CHECK(rec.lambda_u == 0.0);

  // Reference: the same update computed from the supervised loss alone.
  SegmentationModel student(mcfg, tcfg.seed);
  SegmentationModel teacher(mcfg, tcfg.seed);
  SgdOptimizer opt(student.registry(), tcfg.momentum, tcfg.weight_decay);
  const auto f = student.forward(chw(lab.image), priors);
  const Var l_s = O::scale(supervised_loss(f.probs, lab.labels, tcfg.dice_eps), 1.0);
  CHECK(rec.l_s == l_s->value[0]);
  student.registry().zero_grad();
  backward(l_s);
  opt.step(poly_lr(tcfg.lr, 3, tcfg.epochs));
  ema_update(student.registry(), teacher.registry(), tcfg.ema_alpha);

  CHECK(registries_equal(trainer.student().registry(), student.registry()));
  CHECK(registries_equal(trainer.teacher().registry(), teacher.registry()));
}

TEST_CASE("the contrastive term activates inside the trainer at its start epoch") {
  const ModelConfig mcfg = tiny_model(2);
  TrainingConfig tcfg = tiny_train();
  tcfg.contrast_start_epoch = 1;
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  Batch batch;
  batch.labeled.push_back(full_patch(slab_case(61)));
  batch.unlabeled.push_back(full_patch(slab_case(62)));

  Trainer trainer(mcfg, tcfg, priors);
  const StepRecord r0 = trainer.step(batch, 0);
  CHECK(r0.l_con == 0.0);
  CHECK_FALSE(r0.alignment_skipped);
  CHECK(r0.total == doctest::Approx(r0.l_s + r0.lambda_u * r0.l_u).epsilon(1e-12));

  const StepRecord r1 = trainer.step(batch, 1);
  CHECK(r1.l_con != 0.0);
  CHECK(r1.total ==
        doctest::Approx(r1.l_s + r1.lambda_u * r1.l_u + tcfg.lambda_c * r1.l_con).epsilon(1e-12));
  CHECK(trainer.global_step() == 2);
}

TEST_CASE("teacher tracks the student by EMA within a step") {
  const ModelConfig mcfg = tiny_model(2);
  const TrainingConfig tcfg = tiny_train();
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  Batch batch;
  batch.labeled.push_back(full_patch(slab_case(71)));
  batch.unlabeled.push_back(full_patch(slab_case(72)));

  Trainer trainer(mcfg, tcfg, priors);
  std::vector<Tensor> before;
  for (const auto& e : trainer.teacher().registry().entries()) before.push_back(e.second->value);
  trainer.step(batch, 2);

  const auto& se = trainer.student().registry().entries();
  const auto& te = trainer.teacher().registry().entries();
  for (size_t i = 0; i < se.size(); ++i)
    for (int64_t j = 0; j < before[i].numel(); ++j) {
      const double expected =
          tcfg.ema_alpha * before[i][j] + (1.0 - tcfg.ema_alpha) * se[i].second->value[j];
      CHECK(te[i].second->value[j] == expected);
    }
}

TEST_CASE("a fixed seed reproduces the training log bit for bit") {
  const ModelConfig mcfg = tiny_model(2);
  const TrainingConfig tcfg = tiny_train();
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  TrainingData data;
  data.labeled.push_back(slab_case(81));
  data.labeled.push_back(slab_case(82));
  data.unlabeled.push_back(slab_case(83));
  data.unlabeled.push_back(slab_case(84));

  auto run = [&](uint64_t seed) {
    TrainingConfig t = tcfg;
    t.seed = seed;
    Trainer trainer(mcfg, t, priors);
    std::vector<std::string> log;
    trainer.set_log_sink([&](const std::string& line) { log.push_back(line); });
    for (int e = 0; e < 2; ++e) trainer.train_epoch(data, e);
    return log;
  };

  const std::vector<std::string> a = run(11);
  const std::vector<std::string> b = run(11);
  REQUIRE(a.size() == 4);
  CHECK(a == b);
  const std::vector<std::string> c = run(12);
  CHECK(a != c);

  // Records are parseable NDJSON with the documented fields.
  const auto rec = nlohmann::json::parse(a[0]);
  CHECK(rec.at("epoch").get<int>() == 0);
  CHECK(rec.at("step").get<int>() == 0);
  CHECK(rec.contains("L_s"));
  CHECK(rec.contains("L_u"));
  CHECK(rec.contains("L_con"));
  CHECK(rec.contains("lambda_u"));
  CHECK(rec.contains("lr"));
  CHECK(nlohmann::json::parse(a[3]).at("step").get<int>() == 3);
}

TEST_CASE("draw_batch is deterministic per seed and validates the data") {
  const ModelConfig mcfg = tiny_model(2);
  TrainingConfig tcfg = tiny_train();
  tcfg.patch_size = {4, 4, 4};
  tcfg.n_labeled = 2;
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  TrainingData data;
  data.labeled.push_back(slab_case(91));
  data.labeled.push_back(slab_case(92));
  data.unlabeled.push_back(slab_case(93));

  Trainer a(mcfg, tcfg, priors);
  Trainer b(mcfg, tcfg, priors);
  const Batch ba = a.draw_batch(data);
  const Batch bb = b.draw_batch(data);
  REQUIRE(ba.labeled.size() == 2);
  REQUIRE(ba.unlabeled.size() == 1);
  for (size_t i = 0; i < ba.labeled.size(); ++i) {
    CHECK(ba.labeled[i].corner == bb.labeled[i].corner);
    CHECK(ba.labeled[i].image.data == bb.labeled[i].image.data);
    CHECK(ba.labeled[i].labels.v == bb.labeled[i].labels.v);
  }
  CHECK(ba.labeled[0].image.shape == std::vector<int>{4, 4, 4});

  TrainingData no_labeled;
  no_labeled.unlabeled.push_back(slab_case(93));
  CHECK_THROWS_AS(a.draw_batch(no_labeled), DataError);
  TrainingData no_unlabeled;
  no_unlabeled.labeled.push_back(slab_case(91));
  CHECK_THROWS_AS(a.draw_batch(no_unlabeled), DataError);
}

TEST_CASE("gradient check of the full objective through controller and projector") {
  const ModelConfig mcfg = tiny_model(2);
  SegmentationModel student(mcfg, 21);
  SegmentationModel teacher(mcfg, 22);
  CHECK(student.registry().parameter_count() <= 2000);
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  const TrainCase lab = slab_case(101, 4);
  const TrainCase unl = slab_case(102, 4);

  Tensor tprobs;
  {
    NoGradGuard ng;
    tprobs = teacher.forward(chw(unl.image), priors).probs->value;
  }
  const IntGrid pseudo = pseudo_labels(tprobs);
  const IntGrid mask = select_confident(tprobs, 75.0);

  auto build = [&]() -> Var {
    const auto f_l = student.forward(chw(lab.image), priors);
    const Var l_s = supervised_loss(f_l.probs, lab.labels, 1e-5);
    const auto f_u = student.forward(chw(unl.image), priors);
    const Var l_u = unsupervised_loss(f_u.probs, pseudo, 1e-5);
    BankBuilder builder(student.contrastive_scales(), 2);
    builder.add_sample(f_l.features, lab.labels, nullptr);
    builder.add_sample(f_u.features, pseudo, &mask);
    Rng bank_rng(7);
    const ClassFeatureBank bank = builder.build(4, bank_rng);
    const PriorEmbeddingSet projected = student.project_priors(priors);
    const Var l_con = contrastive_loss(bank, &projected, {0.07, false});
    return O::add(O::add(l_s, O::scale(l_u, 0.7)), O::scale(l_con, 0.1));
  };

  student.registry().zero_grad();
  const Var total = build();
  REQUIRE(std::isfinite(total->value[0]));
  backward(total);

  int checked = 0;
  for (const auto& entry : student.registry().entries()) {
    const Var v = entry.second;
    const int64_t n = v->value.numel();
    for (const int64_t i : {static_cast<int64_t>(0), n / 2}) {
      if (i >= n) continue;
      const double an = v->grad[i];
      const double fd = central_difference([&] { return build()->value[0]; }, v, i, 1e-5);
      if (std::abs(an) < 1e-8 && std::abs(fd) < 1e-8) continue;
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-10});
      CHECK_MESSAGE(rel < 1e-4, entry.first << "[" << i << "] an=" << an << " fd=" << fd);
      ++checked;
    }
  }
  CHECK(checked >= 20);
}

TEST_CASE("divergence dumps a checkpoint and raises") {
  const ModelConfig mcfg = tiny_model(2);
  TrainingConfig tcfg = tiny_train();
  tcfg.lambda_c = 0.0;
  tcfg.checkpoint_dir = "trainer_divergence_dir";
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  Batch batch;
  batch.labeled.push_back(full_patch(slab_case(111)));
  batch.unlabeled.push_back(full_patch(slab_case(112)));

  Trainer trainer(mcfg, tcfg, priors);
  trainer.student().registry().entries()[0].second->value[0] =
      std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(trainer.step(batch, 0), DivergenceError);
  CHECK(std::filesystem::exists("trainer_divergence_dir/diverged.takc"));
  std::filesystem::remove_all("trainer_divergence_dir");
}

TEST_CASE("checkpoints round-trip the full training state") {
  const ModelConfig mcfg = tiny_model(2);
  TrainingConfig tcfg = tiny_train();
  tcfg.lambda_c = 0.0;  // keep the data RNG untouched so the resume is exact
  const PriorEmbeddingSet priors = random_priors(2, 6, 3);
  Batch batch;
  batch.labeled.push_back(full_patch(slab_case(121)));
  batch.unlabeled.push_back(full_patch(slab_case(122)));
  const std::string path = "trainer_roundtrip.takc";

  Trainer a(mcfg, tcfg, priors);
  a.step(batch, 0);
  a.step(batch, 1);
  a.save_checkpoint(path, 2, "cfg-hash-1");

  Trainer b(mcfg, tcfg, priors);
  CHECK(b.load_checkpoint(path) == 2);
  CHECK(b.global_step() == 2);
  CHECK(registries_equal(a.student().registry(), b.student().registry()));
  CHECK(registries_equal(a.teacher().registry(), b.teacher().registry()));
  for (size_t i = 0; i < a.optimizer().velocity().size(); ++i)
    CHECK(a.optimizer().velocity()[i].data == b.optimizer().velocity()[i].data);

  const StepRecord ra = a.step(batch, 2);
  const StepRecord rb = b.step(batch, 2);
  CHECK(ra.l_s == rb.l_s);
  CHECK(ra.l_u == rb.l_u);
  CHECK(ra.total == rb.total);
  CHECK(registries_equal(a.student().registry(), b.student().registry()));

  // A differently sized model cannot absorb this checkpoint.
  ModelConfig wide = tiny_model(2);
  wide.backbone.base_width = 4;
  wide.head_shape.widths = {4, 1};
  Trainer c(wide, tcfg, priors);
  CHECK_THROWS_AS(c.load_checkpoint(path), ShapeError);

  std::remove(path.c_str());
}
