#include "tak/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "tak/rng.hpp"

namespace tak {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& ptr, const std::set<std::string>& known) {
  for (const auto& [key, _] : obj.items())
    if (known.find(key) == known.end()) throw SchemaError(ptr + "/" + key, "unknown key");
}

double num_at(const json& obj, const std::string& ptr, const std::string& key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw SchemaError(ptr + "/" + key, "expected a number");
  return v.get<double>();
}

int int_at(const json& obj, const std::string& ptr, const std::string& key, int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw SchemaError(ptr + "/" + key, "expected an integer");
  return v.get<int>();
}

bool bool_at(const json& obj, const std::string& ptr, const std::string& key, bool fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean()) throw SchemaError(ptr + "/" + key, "expected a boolean");
  return v.get<bool>();
}

std::string str_at(const json& obj, const std::string& ptr, const std::string& key,
                   const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw SchemaError(ptr + "/" + key, "expected a string");
  return v.get<std::string>();
}

std::vector<int> int_list_at(const json& obj, const std::string& ptr, const std::string& key,
                             std::vector<int> fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_array()) throw SchemaError(ptr + "/" + key, "expected an array of integers");
  std::vector<int> out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer())
      throw SchemaError(ptr + "/" + key + "/" + std::to_string(i), "expected an integer");
    out.push_back(v[i].get<int>());
  }
  return out;
}

void parse_model(const json& obj, ModelConfig& m) {
  const std::string ptr = "/model";
  reject_unknown(obj, ptr,
                 {"stages", "base_width", "in_channels", "num_classes", "d_text",
                  "controller_hidden", "head_widths", "contrastive_scales"});
  m.backbone.stages = int_at(obj, ptr, "stages", m.backbone.stages);
  m.backbone.base_width = int_at(obj, ptr, "base_width", m.backbone.base_width);
  m.backbone.in_channels = int_at(obj, ptr, "in_channels", m.backbone.in_channels);
  m.num_classes = int_at(obj, ptr, "num_classes", m.num_classes);
  m.d_text = int_at(obj, ptr, "d_text", m.d_text);
  m.controller_hidden = int_at(obj, ptr, "controller_hidden", m.controller_hidden);
  m.head_shape.widths = int_list_at(obj, ptr, "head_widths", m.head_shape.widths);
  m.contrastive_scales = int_list_at(obj, ptr, "contrastive_scales", m.contrastive_scales);
}

void parse_training(const json& obj, TrainingConfig& t) {
  const std::string ptr = "/training";
  reject_unknown(obj, ptr,
                 {"lr", "momentum", "weight_decay", "patch_size", "n_labeled", "n_unlabeled",
                  "contrast_start_epoch", "lambda_u_max", "lambda_u_ramp", "ema_alpha", "epochs",
                  "steps_per_epoch", "dice_eps"});
  t.lr = num_at(obj, ptr, "lr", t.lr);
  t.momentum = num_at(obj, ptr, "momentum", t.momentum);
  t.weight_decay = num_at(obj, ptr, "weight_decay", t.weight_decay);
  const std::vector<int> ps = int_list_at(
      obj, ptr, "patch_size", {t.patch_size[0], t.patch_size[1], t.patch_size[2]});
  if (ps.size() != 3) throw SchemaError(ptr + "/patch_size", "expected three extents");
  t.patch_size = {ps[0], ps[1], ps[2]};
  t.n_labeled = int_at(obj, ptr, "n_labeled", t.n_labeled);
  t.n_unlabeled = int_at(obj, ptr, "n_unlabeled", t.n_unlabeled);
  t.contrast_start_epoch = int_at(obj, ptr, "contrast_start_epoch", t.contrast_start_epoch);
  t.lambda_u_max = num_at(obj, ptr, "lambda_u_max", t.lambda_u_max);
  t.lambda_u_ramp = int_at(obj, ptr, "lambda_u_ramp", t.lambda_u_ramp);
  t.ema_alpha = num_at(obj, ptr, "ema_alpha", t.ema_alpha);
  t.epochs = int_at(obj, ptr, "epochs", t.epochs);
  t.steps_per_epoch = int_at(obj, ptr, "steps_per_epoch", t.steps_per_epoch);
  t.dice_eps = num_at(obj, ptr, "dice_eps", t.dice_eps);
}

void parse_ablation(const json& obj, AblationConfig& a) {
  const std::string ptr = "/ablation";
  reject_unknown(obj, ptr,
                 {"prompt_kind", "contrast", "infonce_compat", "lambda_c", "lambda_n", "tau",
                  "confidence_q"});
  a.prompt_kind = str_at(obj, ptr, "prompt_kind", a.prompt_kind);
  if (a.prompt_kind != "name" && a.prompt_kind != "position" && a.prompt_kind != "shape" &&
      a.prompt_kind != "position+shape")
    throw SchemaError(ptr + "/prompt_kind",
                      "expected one of name, position, shape, position+shape");
  a.contrast = bool_at(obj, ptr, "contrast", a.contrast);
  a.infonce_compat = bool_at(obj, ptr, "infonce_compat", a.infonce_compat);
  a.lambda_c = num_at(obj, ptr, "lambda_c", a.lambda_c);
  a.lambda_n = int_at(obj, ptr, "lambda_n", a.lambda_n);
  a.tau = num_at(obj, ptr, "tau", a.tau);
  a.confidence_q = num_at(obj, ptr, "confidence_q", a.confidence_q);
}

void parse_phantom(const json& obj, CorpusPlan& p) {
  const std::string ptr = "/phantom";
  reject_unknown(obj, ptr, {"spec", "n_train", "n_val", "n_test", "labeled_fraction"});
  if (!obj.contains("spec") || !obj.at("spec").is_object())
    throw SchemaError(ptr + "/spec", "expected the phantom spec object");
  try {
    p.spec = parse_phantom_spec(obj.at("spec").dump());
  } catch (const SchemaError& e) {
    throw SchemaError(ptr + "/spec", e.what());
  }
  p.n_train = int_at(obj, ptr, "n_train", p.n_train);
  p.n_val = int_at(obj, ptr, "n_val", p.n_val);
  p.n_test = int_at(obj, ptr, "n_test", p.n_test);
  p.labeled_fraction = num_at(obj, ptr, "labeled_fraction", p.labeled_fraction);
  p.present = true;
}

// Section ownership for bare `--set key=value` keys.
const std::set<std::string> kTrainingKeys = {
    "lr",           "momentum",     "weight_decay", "patch_size",      "n_labeled",
    "n_unlabeled",  "contrast_start_epoch",         "lambda_u_max",    "lambda_u_ramp",
    "ema_alpha",    "epochs",       "steps_per_epoch",                 "dice_eps"};
const std::set<std::string> kAblationKeys = {"prompt_kind", "contrast", "infonce_compat",
                                             "lambda_c",    "lambda_n", "tau",
                                             "confidence_q"};
const std::set<std::string> kModelKeys = {"stages",     "base_width",        "in_channels",
                                          "num_classes", "d_text",           "controller_hidden",
                                          "head_widths", "contrastive_scales"};
const std::set<std::string> kTopKeys = {"seed",     "knowledge_path", "corpus_dir",
                                        "model",    "training",       "ablation",
                                        "phantom"};

}  // namespace

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw SchemaError("/", "expected a configuration object");
  reject_unknown(doc, "", kTopKeys);
  RunConfig cfg;
  if (doc.contains("seed")) {
    const json& s = doc.at("seed");
    if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<int64_t>() < 0))
      throw SchemaError("/seed", "expected a nonnegative integer");
    cfg.seed = s.get<uint64_t>();
  }
  cfg.knowledge_path = str_at(doc, "", "knowledge_path", "");
  cfg.corpus_dir = str_at(doc, "", "corpus_dir", "");
  if (doc.contains("model")) {
    if (!doc.at("model").is_object()) throw SchemaError("/model", "expected an object");
    parse_model(doc.at("model"), cfg.model);
  }
  if (doc.contains("training")) {
    if (!doc.at("training").is_object()) throw SchemaError("/training", "expected an object");
    parse_training(doc.at("training"), cfg.training);
  }
  if (doc.contains("ablation")) {
    if (!doc.at("ablation").is_object()) throw SchemaError("/ablation", "expected an object");
    parse_ablation(doc.at("ablation"), cfg.ablation);
  }
  if (doc.contains("phantom")) {
    if (!doc.at("phantom").is_object()) throw SchemaError("/phantom", "expected an object");
    parse_phantom(doc.at("phantom"), cfg.phantom);
  }
  // Merge the ablation switches and seed into the effective training config.
  cfg.training.seed = cfg.seed;
  cfg.training.lambda_c = cfg.ablation.contrast ? cfg.ablation.lambda_c : 0.0;
  cfg.training.lambda_n = cfg.ablation.lambda_n;
  cfg.training.tau = cfg.ablation.tau;
  cfg.training.confidence_q = cfg.ablation.confidence_q;
  cfg.training.infonce_compat = cfg.ablation.infonce_compat;
  cfg.document = doc;
  cfg.hash = config_hash(doc);
  return cfg;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  json doc;
  try {
    doc = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw SchemaError("/", std::string("config is not valid JSON: ") + e.what());
  }
  for (const std::string& s : sets) apply_override(doc, s);
  return parse_run_config(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings stay strings
  }

  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    if (dot == std::string::npos) {
      parts.push_back(key.substr(start));
      break;
    }
    parts.push_back(key.substr(start, dot - start));
    start = dot + 1;
  }
  for (const std::string& p : parts)
    if (p.empty()) throw ConfigError("--set key has an empty path segment: '" + key + "'");

  if (parts.size() == 1 && kTopKeys.find(parts[0]) == kTopKeys.end()) {
    // Bare key: route to the section that owns it.
    if (kTrainingKeys.count(parts[0]))
      parts = {"training", parts[0]};
    else if (kAblationKeys.count(parts[0]))
      parts = {"ablation", parts[0]};
    else if (kModelKeys.count(parts[0]))
      parts = {"model", parts[0]};
    else
      throw ConfigError("--set references unknown key '" + parts[0] + "'");
  }

  json* node = &doc;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object())
      throw ConfigError("--set path '" + key + "' descends into a non-object");
  }
  (*node)[parts.back()] = value;
}

std::string config_hash(const json& doc) {
  const std::string canonical = doc.dump();
  const uint64_t h = fnv1a64(canonical);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::vector<AnatomicalKnowledgeRecord> apply_prompt_kind(
    const std::vector<AnatomicalKnowledgeRecord>& records, const std::string& kind) {
  std::vector<AnatomicalKnowledgeRecord> out = records;
  if (kind == "position+shape") return out;
  for (AnatomicalKnowledgeRecord& r : out) {
    if (kind == "name") {
      r.position_text = name_prompt(r.class_name);
      r.shape_text = r.position_text;
    } else if (kind == "position") {
      r.shape_text = r.position_text;
    } else if (kind == "shape") {
      r.position_text = r.shape_text;
    } else {
      throw ConfigError("unknown prompt kind '" + kind + "'");
    }
  }
  return out;
}

}  // namespace tak
