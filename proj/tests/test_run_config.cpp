#include <doctest.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tak/errors.hpp"
#include "tak/knowledge.hpp"
#include "tak/run_config.hpp"

using nlohmann::json;
using namespace tak;

namespace {

json minimal_phantom_spec() {
  return json::parse(R"({
    "grid": [16, 16, 16],
    "background_mean": 0.0,
    "background_sigma": 0.1,
    "classes": [{
      "class_id": 1, "class_name": "blob", "primitive": "ellipsoid",
      "size_min": 0.01, "size_max": 0.02,
      "intensity_mean": 1.0, "intensity_sigma": 0.1
    }]
  })");
}

std::string schema_pointer(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const SchemaError& e) {
    return e.pointer();
  }
  return "<no error>";
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path((std::filesystem::temp_directory_path() / name).string()) {
    std::ofstream out(path, std::ios::binary);
    out << content;
  }
  ~TempFile() { std::filesystem::remove(path); }
};

std::vector<AnatomicalKnowledgeRecord> two_records() {
  AnatomicalKnowledgeRecord a;
  a.class_id = 1;
  a.class_name = "liver";
  a.position_text = "The liver sits under the diaphragm.";
  a.shape_text = "The liver is wedge shaped.";
  AnatomicalKnowledgeRecord b;
  b.class_id = 2;
  b.class_name = "spleen";
  b.position_text = "The spleen lies left of the stomach.";
  b.shape_text = "The spleen resembles a coffee bean.";
  return {a, b};
}

}  // namespace

TEST_CASE("empty document yields library defaults with merged ablation") {
  const RunConfig cfg = parse_run_config(json::object());
  CHECK(cfg.seed == 0);
  CHECK(cfg.knowledge_path.empty());
  CHECK(cfg.corpus_dir.empty());
  CHECK(cfg.model.num_classes == 0);
  CHECK(cfg.model.d_text == 512);
  CHECK(cfg.ablation.prompt_kind == "position+shape");
  CHECK(cfg.ablation.contrast);
  CHECK(!cfg.phantom.present);
  // Ablation defaults flow into the effective training config.
  CHECK(cfg.training.lambda_c == doctest::Approx(0.1));
  CHECK(cfg.training.lambda_n == 40);
  CHECK(cfg.training.tau == doctest::Approx(0.07));
  CHECK(cfg.training.confidence_q == doctest::Approx(75.0));
  CHECK(!cfg.training.infonce_compat);
  CHECK(cfg.training.seed == 0);
  CHECK(cfg.hash.size() == 16);
  for (char c : cfg.hash) CHECK(std::isxdigit(static_cast<unsigned char>(c)));
}

TEST_CASE("full document lands in every section") {
  json doc = {
      {"seed", 17},
      {"knowledge_path", "know.json"},
      {"corpus_dir", "corpus"},
      {"model",
       {{"stages", 3},
        {"base_width", 4},
        {"in_channels", 1},
        {"num_classes", 2},
        {"d_text", 64},
        {"controller_hidden", 32},
        {"head_widths", {4, 4, 1}},
        {"contrastive_scales", {1, 2}}}},
      {"training",
       {{"lr", 0.02},
        {"momentum", 0.8},
        {"weight_decay", 0.0001},
        {"patch_size", {16, 16, 8}},
        {"n_labeled", 1},
        {"n_unlabeled", 3},
        {"contrast_start_epoch", 5},
        {"lambda_u_max", 0.5},
        {"lambda_u_ramp", 10},
        {"ema_alpha", 0.95},
        {"epochs", 7},
        {"steps_per_epoch", 4},
        {"dice_eps", 1e-4}}},
      {"ablation",
       {{"prompt_kind", "position"},
        {"contrast", true},
        {"infonce_compat", true},
        {"lambda_c", 0.5},
        {"lambda_n", 12},
        {"tau", 0.2},
        {"confidence_q", 60.0}}},
      {"phantom",
       {{"spec", minimal_phantom_spec()},
        {"n_train", 6},
        {"n_val", 1},
        {"n_test", 2},
        {"labeled_fraction", 0.25}}}};
  const RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.seed == 17);
  CHECK(cfg.knowledge_path == "know.json");
  CHECK(cfg.corpus_dir == "corpus");
  CHECK(cfg.model.backbone.stages == 3);
  CHECK(cfg.model.backbone.base_width == 4);
  CHECK(cfg.model.num_classes == 2);
  CHECK(cfg.model.d_text == 64);
  CHECK(cfg.model.controller_hidden == 32);
  CHECK(cfg.model.head_shape.widths == std::vector<int>{4, 4, 1});
  CHECK(cfg.model.contrastive_scales == std::vector<int>{1, 2});
  CHECK(cfg.training.lr == doctest::Approx(0.02));
  CHECK(cfg.training.momentum == doctest::Approx(0.8));
  CHECK(cfg.training.patch_size == std::array<int, 3>{16, 16, 8});
  CHECK(cfg.training.n_labeled == 1);
  CHECK(cfg.training.n_unlabeled == 3);
  CHECK(cfg.training.contrast_start_epoch == 5);
  CHECK(cfg.training.lambda_u_max == doctest::Approx(0.5));
  CHECK(cfg.training.lambda_u_ramp == 10);
  CHECK(cfg.training.ema_alpha == doctest::Approx(0.95));
  CHECK(cfg.training.epochs == 7);
  CHECK(cfg.training.steps_per_epoch == 4);
  CHECK(cfg.training.dice_eps == doctest::Approx(1e-4));
  CHECK(cfg.ablation.prompt_kind == "position");
  CHECK(cfg.ablation.infonce_compat);
  // Merge: seed and ablation switches become effective training knobs.
  CHECK(cfg.training.seed == 17);
  CHECK(cfg.training.lambda_c == doctest::Approx(0.5));
  CHECK(cfg.training.lambda_n == 12);
  CHECK(cfg.training.tau == doctest::Approx(0.2));
  CHECK(cfg.training.confidence_q == doctest::Approx(60.0));
  CHECK(cfg.training.infonce_compat);
  CHECK(cfg.phantom.present);
  CHECK(cfg.phantom.spec.grid == std::array<int, 3>{16, 16, 16});
  CHECK(cfg.phantom.n_train == 6);
  CHECK(cfg.phantom.n_val == 1);
  CHECK(cfg.phantom.n_test == 2);
  CHECK(cfg.phantom.labeled_fraction == doctest::Approx(0.25));
}

TEST_CASE("contrast=false zeroes the effective lambda_c but keeps ablation value") {
  json doc = {{"ablation", {{"contrast", false}, {"lambda_c", 0.7}}}};
  const RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.training.lambda_c == 0.0);
  CHECK(cfg.ablation.lambda_c == doctest::Approx(0.7));
  CHECK(!cfg.ablation.contrast);
}

TEST_CASE("unknown keys are rejected with precise pointers") {
  CHECK(schema_pointer([] { parse_run_config(json{{"bogus", 1}}); }) == "/bogus");
  CHECK(schema_pointer([] { parse_run_config(json{{"model", {{"depth", 3}}}}); }) ==
        "/model/depth");
  CHECK(schema_pointer([] { parse_run_config(json{{"training", {{"batch", 2}}}}); }) ==
        "/training/batch");
  CHECK(schema_pointer([] { parse_run_config(json{{"ablation", {{"augment", true}}}}); }) ==
        "/ablation/augment");
  CHECK(schema_pointer([] {
          parse_run_config(json{{"phantom", {{"spec", minimal_phantom_spec()}, {"cases", 9}}}});
        }) == "/phantom/cases");
}

TEST_CASE("type errors carry the offending pointer") {
  CHECK(schema_pointer([] { parse_run_config(json{{"seed", -3}}); }) == "/seed");
  CHECK(schema_pointer([] { parse_run_config(json{{"seed", "zero"}}); }) == "/seed");
  CHECK(schema_pointer([] { parse_run_config(json{{"training", {{"lr", "fast"}}}}); }) ==
        "/training/lr");
  CHECK(schema_pointer([] { parse_run_config(json{{"model", {{"stages", 2.5}}}}); }) ==
        "/model/stages");
  CHECK(schema_pointer([] {
          parse_run_config(json{{"training", {{"patch_size", {8, 8}}}}});
        }) == "/training/patch_size");
  CHECK(schema_pointer([] {
          parse_run_config(json{{"model", {{"head_widths", {8, "one"}}}}});
        }) == "/model/head_widths/1");
  CHECK(schema_pointer([] { parse_run_config(json{{"model", 7}}); }) == "/model");
  CHECK(schema_pointer([] { parse_run_config(json::array()); }) == "/");
}

TEST_CASE("prompt_kind outside the ablation enum is rejected") {
  CHECK(schema_pointer([] {
          parse_run_config(json{{"ablation", {{"prompt_kind", "both"}}}});
        }) == "/ablation/prompt_kind");
}

TEST_CASE("phantom spec errors are wrapped under /phantom/spec") {
  json bad = minimal_phantom_spec();
  bad.erase("grid");
  CHECK(schema_pointer([&] {
          parse_run_config(json{{"phantom", {{"spec", bad}}}});
        }) == "/phantom/spec");
  CHECK(schema_pointer([] {
          parse_run_config(json{{"phantom", {{"n_train", 4}}}});
        }) == "/phantom/spec");
}

TEST_CASE("apply_override parses values and routes bare keys to their section") {
  json doc = json::object();
  apply_override(doc, "lr=0.5");
  apply_override(doc, "contrast=false");
  apply_override(doc, "prompt_kind=name");
  apply_override(doc, "num_classes=3");
  apply_override(doc, "head_widths=[8,1]");
  apply_override(doc, "seed=7");
  apply_override(doc, "knowledge_path=alt.json");
  CHECK(doc["training"]["lr"] == json(0.5));
  CHECK(doc["ablation"]["contrast"] == json(false));
  CHECK(doc["ablation"]["prompt_kind"] == json("name"));
  CHECK(doc["model"]["num_classes"] == json(3));
  CHECK(doc["model"]["head_widths"] == json({8, 1}));
  CHECK(doc["seed"] == json(7));
  CHECK(doc["knowledge_path"] == json("alt.json"));

  // Dotted paths pick the section explicitly and win over later reads.
  apply_override(doc, "training.lr=0.25");
  CHECK(doc["training"]["lr"] == json(0.25));
  apply_override(doc, "phantom.n_train=9");
  CHECK(doc["phantom"]["n_train"] == json(9));

  const RunConfig cfg = parse_run_config(
      json{{"ablation", json::object()}, {"training", {{"lr", 0.01}}}});
  CHECK(cfg.training.lambda_c == doctest::Approx(0.1));
  json doc2 = json::object();
  apply_override(doc2, "contrast=false");
  const RunConfig cfg2 = parse_run_config(doc2);
  CHECK(cfg2.training.lambda_c == 0.0);
}

TEST_CASE("apply_override rejects malformed assignments") {
  json doc = json::object();
  CHECK_THROWS_AS(apply_override(doc, "no_equals"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=5"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "training..lr=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "warp=1"), ConfigError);
  json doc2 = {{"training", 5}};
  CHECK_THROWS_AS(apply_override(doc2, "training.lr=1"), ConfigError);
}

TEST_CASE("config hash is deterministic and value-sensitive") {
  json a = {{"seed", 1}, {"training", {{"lr", 0.01}}}};
  json b = {{"seed", 1}, {"training", {{"lr", 0.01}}}};
  json c = {{"seed", 2}, {"training", {{"lr", 0.01}}}};
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a) != config_hash(c));
  CHECK(config_hash(a).size() == 16);
  const RunConfig cfg = parse_run_config(a);
  CHECK(cfg.hash == config_hash(a));
  CHECK(cfg.document == a);
}

TEST_CASE("load_run_config reads files, applies overrides, reports real pointers") {
  TempFile good("tak_cfg_good.json", R"({"seed": 3, "training": {"lr": 0.04}})");
  const RunConfig cfg = load_run_config(good.path);
  CHECK(cfg.seed == 3);
  CHECK(cfg.training.lr == doctest::Approx(0.04));

  const RunConfig cfg2 = load_run_config(good.path, {"lr=0.08", "contrast=false"});
  CHECK(cfg2.training.lr == doctest::Approx(0.08));
  CHECK(cfg2.training.lambda_c == 0.0);
  CHECK(cfg2.hash != cfg.hash);  // overrides change the hashed document

  CHECK_THROWS_AS(load_run_config("/nonexistent/cfg.json"), DataError);
  try {
    load_run_config("/nonexistent/cfg.json");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/cfg.json") != std::string::npos);
  }
  TempFile bad("tak_cfg_bad.json", "{ not json ]");
  CHECK_THROWS_AS(load_run_config(bad.path), SchemaError);
}

TEST_CASE("apply_prompt_kind rewrites texts per ablation arm") {
  const auto records = two_records();

  const auto both = apply_prompt_kind(records, "position+shape");
  CHECK(both[0].position_text == records[0].position_text);
  CHECK(both[0].shape_text == records[0].shape_text);

  const auto name = apply_prompt_kind(records, "name");
  CHECK(name[0].position_text == name_prompt("liver"));
  CHECK(name[0].shape_text == name_prompt("liver"));
  CHECK(name[1].position_text == name_prompt("spleen"));
  CHECK(name[0].position_text ==
        "A computerized tomography scan of the human abdomen includes the liver");

  const auto pos = apply_prompt_kind(records, "position");
  CHECK(pos[0].position_text == records[0].position_text);
  CHECK(pos[0].shape_text == records[0].position_text);

  const auto shp = apply_prompt_kind(records, "shape");
  CHECK(shp[0].position_text == records[0].shape_text);
  CHECK(shp[0].shape_text == records[0].shape_text);

  CHECK_THROWS_AS(apply_prompt_kind(records, "texture"), ConfigError);
  // The input list is never mutated.
  CHECK(records[0].position_text == "The liver sits under the diaphragm.");
}
