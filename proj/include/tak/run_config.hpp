#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "tak/knowledge.hpp"
#include "tak/phantom.hpp"
#include "tak/trainer.hpp"

namespace tak {

// Ablation switches. prompt_kind picks which descriptor feeds the two text
// slots: "name" puts the plain name sentence in both, "position"/"shape"
// duplicate that single descriptor, "position+shape" is the full pairing.
// contrast=false forces the contrastive coefficient to exactly zero.
struct AblationConfig {
  std::string prompt_kind = "position+shape";
  bool contrast = true;
  bool infonce_compat = false;
  double lambda_c = 0.1;
  int lambda_n = 40;
  double tau = 0.07;
  double confidence_q = 75.0;
};

// Phantom corpus recipe: the generator spec plus split sizes.
struct CorpusPlan {
  bool present = false;
  PhantomSpec spec;
  int n_train = 30, n_val = 2, n_test = 8;
  double labeled_fraction = 0.05;
};

// One validated configuration document driving every command. `training`
// already carries the merged ablation values (lambda_c, lambda_n, tau,
// confidence_q, infonce_compat) and the top-level seed.
struct RunConfig {
  uint64_t seed = 0;
  std::string knowledge_path;
  std::string corpus_dir;
  ModelConfig model;  // num_classes 0 = take the class count from knowledge
  TrainingConfig training;
  AblationConfig ablation;
  CorpusPlan phantom;
  nlohmann::json document;  // post-override, schema-validated
  std::string hash;         // 16 hex digits over the canonical dump
};

// Schema validation with unknown-key rejection at every level
// (SchemaError carries a JSON pointer).
RunConfig parse_run_config(const nlohmann::json& doc);

// Read + parse + apply `--set key=value` overrides (dotted paths; bare keys
// are routed to the section that owns them), then validate.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets = {});

void apply_override(nlohmann::json& doc, const std::string& assignment);

// FNV-1a over the canonical (sorted-key, compact) serialization.
std::string config_hash(const nlohmann::json& doc);

// Rewrites knowledge texts according to the prompt-kind ablation.
std::vector<AnatomicalKnowledgeRecord> apply_prompt_kind(
    const std::vector<AnatomicalKnowledgeRecord>& records, const std::string& kind);

}  // namespace tak
