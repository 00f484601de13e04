// Command-line surface: knowledge generation/validation, text encoding,
// phantom corpus creation, training, evaluation, inference, and report
// export. One command per process; every failure exits with a machine-
// readable JSON error record on stderr (2 = config, 3 = data, 4 = training
// divergence).

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "tak/inference.hpp"
#include "tak/knowledge.hpp"
#include "tak/metrics.hpp"
#include "tak/nifti.hpp"
#include "tak/run_config.hpp"
#include "tak/text_prior.hpp"
#include "tak/trainer.hpp"

#ifndef TAK_GIT_DESCRIBE
#define TAK_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Chat client speaking to TAK_MLLM_ENDPOINT: POST /complete with
// {"prompt": ...}; the reply is either {"text": ...} or the raw body.
class HttpChatClient : public tak::ChatClient {
 public:
  explicit HttpChatClient(std::string endpoint) : endpoint_(std::move(endpoint)) {}

  std::string complete(const std::string& prompt) override {
    httplib::Client client(endpoint_);
    client.set_read_timeout(60, 0);
    const json body{{"prompt", prompt}};
    auto res = client.Post("/complete", body.dump(), "application/json");
    if (!res || res->status != 200)
      throw tak::DataError("MLLM endpoint " + endpoint_ + " failed" +
                           (res ? " with status " + std::to_string(res->status) : ""));
    try {
      const json reply = json::parse(res->body);
      if (reply.is_object() && reply.contains("text") && reply["text"].is_string())
        return reply["text"].get<std::string>();
    } catch (const json::exception&) {
    }
    return res->body;
  }

 private:
  std::string endpoint_;
};

std::unique_ptr<tak::ChatClient> make_chat_client(uint64_t mock_seed) {
  const char* ep = std::getenv("TAK_MLLM_ENDPOINT");
  if (ep != nullptr && *ep != '\0') return std::make_unique<HttpChatClient>(ep);
  return std::make_unique<tak::MockChatClient>(mock_seed);
}

bool endpoint_configured() {
  const char* ep = std::getenv("TAK_MLLM_ENDPOINT");
  return ep != nullptr && *ep != '\0';
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(text);
  while (std::getline(ss, item, ',')) {
    const size_t b = item.find_first_not_of(" \t");
    const size_t e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw tak::DataError("cannot write " + path);
  out << text;
}

// Resolved text priors for the configured prompt kind. The hash encoder is
// seeded independently of the training seed so every run of an ablation grid
// shares one fixed "pretrained" text space.
tak::PriorEmbeddingSet resolve_priors(const tak::RunConfig& cfg,
                                      std::vector<tak::AnatomicalKnowledgeRecord>* out_records) {
  if (cfg.knowledge_path.empty())
    throw tak::ConfigError("config lacks knowledge_path, required by this command");
  const auto records = tak::load_knowledge(cfg.knowledge_path);
  const auto effective = tak::apply_prompt_kind(records, cfg.ablation.prompt_kind);
  tak::HashTextEncoder encoder(cfg.model.d_text, 0);
  tak::PriorEmbeddingSet priors = tak::encode_priors(effective, encoder);
  if (out_records != nullptr) *out_records = records;
  return priors;
}

tak::ModelConfig resolve_model(const tak::RunConfig& cfg, int num_classes_hint) {
  tak::ModelConfig m = cfg.model;
  if (m.num_classes == 0) m.num_classes = num_classes_hint;
  return m;
}

tak::CorpusManifest load_corpus_manifest(const tak::RunConfig& cfg) {
  if (cfg.corpus_dir.empty())
    throw tak::ConfigError("config lacks corpus_dir, required by this command");
  return tak::load_manifest(cfg.corpus_dir + "/manifest.json");
}

tak::TrainingData load_training_split(const std::string& dir, const tak::CorpusManifest& man) {
  tak::TrainingData data;
  for (const tak::CaseEntry& c : man.cases) {
    if (c.split != "labeled" && c.split != "unlabeled") continue;
    tak::TrainCase tc;
    tc.image = tak::load_volume(tak::case_image_path(dir, c.id)).data;
    tc.labels = tak::load_labels(tak::case_label_path(dir, c.id)).labels;
    (c.split == "labeled" ? data.labeled : data.unlabeled).push_back(std::move(tc));
  }
  if (data.labeled.empty()) throw tak::DataError("corpus has no labeled cases");
  if (data.unlabeled.empty()) throw tak::DataError("corpus has no unlabeled cases");
  return data;
}

std::array<int, 3> default_stride(const std::array<int, 3>& win) {
  if (win == std::array<int, 3>{96, 96, 96}) return {32, 32, 16};
  return {std::max(1, win[0] / 2), std::max(1, win[1] / 2), std::max(1, win[2] / 2)};
}

std::array<int, 3> parse_triple(const std::vector<int>& v, const char* what) {
  if (v.size() != 3) throw tak::ConfigError(std::string(what) + " expects three integers");
  return {v[0], v[1], v[2]};
}

json run_meta(const tak::RunConfig& cfg, const std::string& command) {
  return json{{"config_hash", cfg.hash},
              {"seed", cfg.seed},
              {"git_describe", TAK_GIT_DESCRIBE},
              {"command", command}};
}

std::vector<std::string> class_names_for(const tak::RunConfig& cfg) {
  if (!cfg.knowledge_path.empty()) {
    const auto records = tak::load_knowledge(cfg.knowledge_path);
    std::vector<std::string> names;
    for (const auto& r : records) names.push_back(r.class_name);
    return names;
  }
  if (cfg.phantom.present) {
    std::vector<std::string> names;
    for (const auto& c : cfg.phantom.spec.classes) names.push_back(c.class_name);
    return names;
  }
  throw tak::ConfigError("cannot resolve class names: no knowledge_path or phantom spec");
}

std::vector<tak::ReportRow> parse_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw tak::DataError("cannot open report " + path);
  std::string line;
  if (!std::getline(in, line)) throw tak::DataError("report " + path + " is empty");
  const std::string header =
      "case_id,class_id,class_name,dice,asd,voxel_proportion,size_group,chvr";
  if (line != header) throw tak::DataError("report " + path + " has an unexpected header");
  std::vector<tak::ReportRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 8)
      throw tak::DataError("report " + path + " line " + std::to_string(lineno) +
                           " has " + std::to_string(f.size()) + " fields");
    tak::ReportRow r;
    r.case_id = f[0];
    r.metrics.class_id = std::stoi(f[1]);
    r.metrics.class_name = f[2];
    r.metrics.dice = std::strtod(f[3].c_str(), nullptr);
    r.metrics.asd = std::strtod(f[4].c_str(), nullptr);
    r.metrics.voxel_proportion = std::strtod(f[5].c_str(), nullptr);
    r.metrics.size_group = f[6];
    r.metrics.chvr = std::strtod(f[7].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Command bodies.

struct KnowledgeGenArgs {
  std::string classes_csv, config_path, out_path, source;
  uint64_t seed = 0;
};

void cmd_knowledge_gen(const KnowledgeGenArgs& a) {
  std::vector<std::string> names = split_csv(a.classes_csv);
  if (names.empty() && !a.config_path.empty()) {
    const tak::RunConfig cfg = tak::load_run_config(a.config_path);
    if (!cfg.phantom.present)
      throw tak::ConfigError("config has no phantom section to take class names from");
    for (const auto& c : cfg.phantom.spec.classes) names.push_back(c.class_name);
  }
  if (names.empty()) throw tak::ConfigError("no class names given (--classes or --config)");
  auto generator = make_chat_client(a.seed);
  auto validator = make_chat_client(a.seed + 1);
  std::string source = a.source;
  if (source.empty()) source = endpoint_configured() ? "generated" : "mock";
  const auto records = tak::generate_knowledge(names, *generator, *validator, source);
  tak::save_knowledge(records, a.out_path);
  std::cout << json{{"written", a.out_path}, {"classes", records.size()}, {"source", source}}
                   .dump()
            << "\n";
}

void cmd_knowledge_validate(const std::string& path) {
  const auto records = tak::load_knowledge(path);
  std::cout << json{{"valid", true}, {"path", path}, {"classes", records.size()}}.dump() << "\n";
}

void cmd_encode(const std::string& config_path, const std::vector<std::string>& sets,
                const std::string& out_path) {
  const tak::RunConfig cfg = tak::load_run_config(config_path, sets);
  const tak::PriorEmbeddingSet priors = resolve_priors(cfg, nullptr);
  tak::save_embedding_cache(out_path, priors);
  std::cout << json{{"written", out_path},
                    {"classes", priors.K},
                    {"d_text", priors.d_text},
                    {"config_hash", cfg.hash}}
                   .dump()
            << "\n";
}

void cmd_phantom_gen(const std::string& config_path, const std::vector<std::string>& sets,
                     std::string out_dir) {
  const tak::RunConfig cfg = tak::load_run_config(config_path, sets);
  if (!cfg.phantom.present) throw tak::ConfigError("config lacks the phantom section");
  if (out_dir.empty()) out_dir = cfg.corpus_dir;
  if (out_dir.empty()) throw tak::ConfigError("no output directory (--out-dir or corpus_dir)");
  const tak::CorpusManifest man =
      tak::generate_corpus(cfg.phantom.spec, cfg.phantom.n_train, cfg.phantom.n_val,
                           cfg.phantom.n_test, cfg.phantom.labeled_fraction, out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir + "/gen_meta.json", run_meta(cfg, "phantom gen").dump(2) + "\n");
  std::cout << json{{"dir", out_dir}, {"cases", man.cases.size()}, {"config_hash", cfg.hash}}
                   .dump()
            << "\n";
}

struct TrainArgs {
  std::string config_path, run_dir, resume, sweep_path;
  std::vector<std::string> sets;
  int cell = -1;
  int checkpoint_every = 0;
};

void cmd_train(const TrainArgs& a) {
  std::vector<std::string> sets = a.sets;
  if (!a.sweep_path.empty()) {
    std::ifstream in(a.sweep_path, std::ios::binary);
    if (!in) throw tak::DataError("cannot open sweep manifest " + a.sweep_path);
    json manifest;
    try {
      std::stringstream buf;
      buf << in.rdbuf();
      manifest = json::parse(buf.str());
    } catch (const json::exception& e) {
      throw tak::SchemaError("/", std::string("sweep manifest is not valid JSON: ") + e.what());
    }
    if (!manifest.contains("cells") || !manifest["cells"].is_array())
      throw tak::SchemaError("/cells", "sweep manifest needs a cells array");
    if (a.cell < 0 || a.cell >= static_cast<int>(manifest["cells"].size()))
      throw tak::ConfigError("--cell " + std::to_string(a.cell) + " outside the manifest (" +
                             std::to_string(manifest["cells"].size()) + " cells)");
    const json& cell = manifest["cells"][static_cast<size_t>(a.cell)];
    if (!cell.contains("set") || !cell["set"].is_array())
      throw tak::SchemaError("/cells/" + std::to_string(a.cell) + "/set",
                             "expected an array of key=value overrides");
    for (const auto& s : cell["set"]) sets.push_back(s.get<std::string>());
  }

  const tak::RunConfig cfg = tak::load_run_config(a.config_path, sets);
  std::vector<tak::AnatomicalKnowledgeRecord> records;
  const tak::PriorEmbeddingSet priors = resolve_priors(cfg, &records);
  const tak::ModelConfig mcfg = resolve_model(cfg, static_cast<int>(records.size()));
  const tak::CorpusManifest man = load_corpus_manifest(cfg);
  const tak::TrainingData data = load_training_split(cfg.corpus_dir, man);

  fs::create_directories(a.run_dir);
  tak::TrainingConfig tcfg = cfg.training;
  tcfg.checkpoint_dir = a.run_dir;
  tak::Trainer trainer(mcfg, tcfg, priors);

  write_text(a.run_dir + "/config.json", cfg.document.dump(2) + "\n");
  write_text(a.run_dir + "/run_meta.json", run_meta(cfg, "train").dump(2) + "\n");

  int start_epoch = 0;
  if (!a.resume.empty()) start_epoch = trainer.load_checkpoint(a.resume);

  std::ofstream log(a.run_dir + "/train_log.ndjson", std::ios::binary);
  if (!log) throw tak::DataError("cannot write " + a.run_dir + "/train_log.ndjson");
  log << json{{"config_hash", cfg.hash}, {"seed", cfg.seed}, {"git_describe", TAK_GIT_DESCRIBE}}
             .dump()
      << "\n";
  trainer.set_log_sink([&log](const std::string& line) { log << line << "\n"; });

  tak::EpochStats last;
  for (int e = start_epoch; e < tcfg.epochs; ++e) {
    last = trainer.train_epoch(data, e);
    std::cerr << "epoch " << e + 1 << "/" << tcfg.epochs << " L_s=" << last.mean_l_s
              << " L_u=" << last.mean_l_u << " L_con=" << last.mean_l_con << " lr=" << last.lr
              << "\n";
    if (a.checkpoint_every > 0 && (e + 1) % a.checkpoint_every == 0)
      trainer.save_checkpoint(a.run_dir + "/checkpoint_epoch" + std::to_string(e + 1) + ".takc",
                              e + 1, cfg.hash);
  }
  trainer.save_checkpoint(a.run_dir + "/checkpoint.takc", tcfg.epochs, cfg.hash);
  log.flush();
  std::cout << json{{"run_dir", a.run_dir},
                    {"epochs", tcfg.epochs},
                    {"steps", trainer.global_step()},
                    {"config_hash", cfg.hash},
                    {"final_L_s", last.mean_l_s}}
                   .dump()
            << "\n";
}

struct EvalArgs {
  std::string config_path, run_dir = ".", checkpoint, pred_dir, split = "test",
              which = "student";
  std::vector<std::string> sets;
  std::vector<int> window, stride;
};

void cmd_eval(const EvalArgs& a) {
  const tak::RunConfig cfg = tak::load_run_config(a.config_path, a.sets);
  if (a.split != "val" && a.split != "test" && a.split != "labeled" && a.split != "unlabeled")
    throw tak::ConfigError("--split must be one of labeled, unlabeled, val, test");
  if (a.checkpoint.empty() == a.pred_dir.empty())
    throw tak::ConfigError("exactly one of --checkpoint or --pred-dir is required");
  const tak::CorpusManifest man = load_corpus_manifest(cfg);
  const std::vector<std::string> names = class_names_for(cfg);

  std::vector<std::string> ids;
  for (const auto& c : man.cases)
    if (c.split == a.split) ids.push_back(c.id);
  if (ids.empty()) throw tak::DataError("split '" + a.split + "' holds no cases");

  std::unique_ptr<tak::Trainer> trainer;
  tak::PriorEmbeddingSet priors;
  if (!a.checkpoint.empty()) {
    std::vector<tak::AnatomicalKnowledgeRecord> records;
    priors = resolve_priors(cfg, &records);
    const tak::ModelConfig mcfg = resolve_model(cfg, static_cast<int>(records.size()));
    trainer = std::make_unique<tak::Trainer>(mcfg, cfg.training, priors);
    trainer->load_checkpoint(a.checkpoint);
    if (a.which != "student" && a.which != "teacher")
      throw tak::ConfigError("--model must be student or teacher");
  }

  std::vector<tak::ReportRow> rows;
  for (const std::string& id : ids) {
    const tak::LabelVolume gt = tak::load_labels(tak::case_label_path(cfg.corpus_dir, id));
    tak::IntGrid pred;
    if (!a.checkpoint.empty()) {
      const tak::Volume vol = tak::load_volume(tak::case_image_path(cfg.corpus_dir, id));
      std::array<int, 3> win = cfg.training.patch_size;
      if (!a.window.empty()) win = parse_triple(a.window, "--window");
      std::array<int, 3> stride =
          a.stride.empty() ? default_stride(win) : parse_triple(a.stride, "--stride");
      const tak::WindowPlan plan = tak::plan_windows(
          {vol.data.dim(0), vol.data.dim(1), vol.data.dim(2)}, win, stride);
      const tak::SegmentationModel& model =
          a.which == "teacher" ? trainer->teacher() : trainer->student();
      pred = tak::hard_labels(tak::sliding_window_infer(vol.data, model, priors, plan));
    } else {
      pred = tak::load_labels(a.pred_dir + "/" + id + "_pred.nii.gz").labels;
    }
    for (const tak::ClassReport& cr : tak::class_report(pred, gt.labels, gt.spacing, names))
      rows.push_back({id, cr});
    std::cerr << "evaluated " << id << "\n";
  }

  fs::create_directories(a.run_dir);
  const std::string csv_path = a.run_dir + "/report.csv";
  tak::write_report_csv(csv_path, rows);
  json summary = json::parse(tak::summarize_report(rows));
  summary["config_hash"] = cfg.hash;
  summary["split"] = a.split;
  const std::string sum_path = a.run_dir + "/summary.json";
  write_text(sum_path, summary.dump(2) + "\n");
  std::cout << json{{"report", csv_path},
                    {"summary", sum_path},
                    {"cases", ids.size()},
                    {"mean_dice", summary["All"]["dice"]},
                    {"config_hash", cfg.hash}}
                   .dump()
            << "\n";
}

struct InferArgs {
  std::string config_path, checkpoint, image, out, probs_out, which = "student";
  std::vector<std::string> sets;
  std::vector<int> window, stride;
};

void cmd_infer(const InferArgs& a) {
  const tak::RunConfig cfg = tak::load_run_config(a.config_path, a.sets);
  std::vector<tak::AnatomicalKnowledgeRecord> records;
  const tak::PriorEmbeddingSet priors = resolve_priors(cfg, &records);
  const tak::ModelConfig mcfg = resolve_model(cfg, static_cast<int>(records.size()));
  tak::Trainer trainer(mcfg, cfg.training, priors);
  trainer.load_checkpoint(a.checkpoint);
  if (a.which != "student" && a.which != "teacher")
    throw tak::ConfigError("--model must be student or teacher");

  const tak::Volume vol = tak::load_volume(a.image);
  std::array<int, 3> win = cfg.training.patch_size;
  if (!a.window.empty()) win = parse_triple(a.window, "--window");
  std::array<int, 3> stride =
      a.stride.empty() ? default_stride(win) : parse_triple(a.stride, "--stride");
  const tak::WindowPlan plan =
      tak::plan_windows({vol.data.dim(0), vol.data.dim(1), vol.data.dim(2)}, win, stride);
  const tak::SegmentationModel& model =
      a.which == "teacher" ? trainer.teacher() : trainer.student();
  const tak::Tensor probs = tak::sliding_window_infer(vol.data, model, priors, plan);
  const tak::IntGrid pred = tak::hard_labels(probs);
  tak::save_labels(a.out, pred, vol.spacing);
  if (!a.probs_out.empty()) {
    const json meta{{"config_hash", cfg.hash}, {"image", a.image}};
    tak::save_archive(a.probs_out, meta.dump(), {{"probs", &probs}});
  }
  std::cout << json{{"out", a.out}, {"windows", plan.corners.size()}, {"config_hash", cfg.hash}}
                   .dump()
            << "\n";
}

struct ReportArgs {
  std::string run_dir, baseline_dir, out_dir;
};

void cmd_report(const ReportArgs& a) {
  const std::vector<tak::ReportRow> rows = parse_report_csv(a.run_dir + "/report.csv");
  const std::string out_dir = a.out_dir.empty() ? a.run_dir : a.out_dir;
  fs::create_directories(out_dir);
  write_text(out_dir + "/summary.json", tak::summarize_report(rows));

  struct Agg {
    double prop = 0, chvr = 0, dice = 0;
    int n = 0, n_chvr = 0;
  };
  std::map<std::string, Agg> by_class;
  for (const auto& r : rows) {
    Agg& g = by_class[r.metrics.class_name];
    g.prop += r.metrics.voxel_proportion;
    g.dice += r.metrics.dice;
    if (!std::isnan(r.metrics.chvr)) {
      g.chvr += r.metrics.chvr;
      ++g.n_chvr;
    }
    ++g.n;
  }
  std::map<std::string, double> base_dice;
  if (!a.baseline_dir.empty()) {
    std::map<std::string, Agg> base;
    for (const auto& r : parse_report_csv(a.baseline_dir + "/report.csv")) {
      Agg& g = base[r.metrics.class_name];
      g.dice += r.metrics.dice;
      ++g.n;
    }
    for (const auto& [name, g] : base) base_dice[name] = g.dice / g.n;
  }
  std::vector<tak::ScatterEntry> entries;
  for (const auto& [name, g] : by_class) {
    tak::ScatterEntry e;
    e.class_name = name;
    e.voxel_proportion = g.prop / g.n;
    e.chvr = g.n_chvr > 0 ? g.chvr / g.n_chvr : std::nan("");
    const double mean_dice = g.dice / g.n;
    e.dice_delta = base_dice.count(name) ? base_dice[name] - mean_dice : 0.0;
    entries.push_back(std::move(e));
  }
  tak::write_scatter_csv(out_dir + "/scatter.csv", entries);
  std::cout << json{{"summary", out_dir + "/summary.json"},
                    {"scatter", out_dir + "/scatter.csv"},
                    {"classes", entries.size()}}
                   .dump()
            << "\n";
}

int classify_and_report(const tak::Error& e) {
  int code = 3;
  std::string kind = "data";
  if (dynamic_cast<const tak::ConfigError*>(&e) != nullptr ||
      dynamic_cast<const tak::SchemaError*>(&e) != nullptr) {
    code = 2;
    kind = "config";
  } else if (dynamic_cast<const tak::DivergenceError*>(&e) != nullptr) {
    code = 4;
    kind = "divergence";
  }
  std::cerr << json{{"error", kind}, {"message", e.what()}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Textual-anatomical-knowledge-guided semi-supervised segmentation toolkit"};
  app.require_subcommand(1);

  // knowledge gen | validate
  auto* knowledge = app.add_subcommand("knowledge", "Generate or validate anatomical knowledge");
  knowledge->require_subcommand(1);
  KnowledgeGenArgs kgen_args;
  auto* kgen = knowledge->add_subcommand("gen", "Two-agent knowledge generation");
  kgen->add_option("--classes", kgen_args.classes_csv, "Comma-separated class names");
  kgen->add_option("--config", kgen_args.config_path, "Take class names from this config");
  kgen->add_option("--out", kgen_args.out_path, "Output knowledge JSON")->required();
  kgen->add_option("--seed", kgen_args.seed, "Mock client seed");
  kgen->add_option("--source", kgen_args.source, "Source tag (generated|curated|mock)");
  kgen->callback([&] { cmd_knowledge_gen(kgen_args); });

  std::string kval_path;
  auto* kval = knowledge->add_subcommand("validate", "Schema-check a knowledge file");
  kval->add_option("--in", kval_path, "Knowledge JSON path")->required();
  kval->callback([&] { cmd_knowledge_validate(kval_path); });

  // encode
  std::string enc_config, enc_out;
  std::vector<std::string> enc_sets;
  auto* encode = app.add_subcommand("encode", "Encode knowledge texts into an embedding cache");
  encode->add_option("--config", enc_config, "Run config JSON")->required();
  encode->add_option("--out", enc_out, "Embedding cache path")->required();
  encode->add_option("--set", enc_sets, "Override config keys (key=value)");
  encode->callback([&] { cmd_encode(enc_config, enc_sets, enc_out); });

  // phantom gen
  auto* phantom = app.add_subcommand("phantom", "Phantom corpus tools");
  phantom->require_subcommand(1);
  std::string pgen_config, pgen_out;
  std::vector<std::string> pgen_sets;
  auto* pgen = phantom->add_subcommand("gen", "Generate the phantom corpus");
  pgen->add_option("--config", pgen_config, "Run config JSON")->required();
  pgen->add_option("--out-dir", pgen_out, "Corpus directory (default: corpus_dir)");
  pgen->add_option("--set", pgen_sets, "Override config keys (key=value)");
  pgen->callback([&] { cmd_phantom_gen(pgen_config, pgen_sets, pgen_out); });

  // train
  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Mean-teacher semi-supervised training");
  train->add_option("--config", train_args.config_path, "Run config JSON")->required();
  train->add_option("--run-dir", train_args.run_dir, "Artifact directory")->required();
  train->add_option("--set", train_args.sets, "Override config keys (key=value)");
  train->add_option("--resume", train_args.resume, "Checkpoint to resume from");
  train->add_option("--sweep", train_args.sweep_path, "Sweep manifest JSON");
  train->add_option("--cell", train_args.cell, "Sweep cell index (with --sweep)");
  train->add_option("--checkpoint-every", train_args.checkpoint_every,
                    "Extra checkpoint every N epochs (0 = final only)");
  train->callback([&] { cmd_train(train_args); });

  // eval
  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or prediction set");
  eval->add_option("--config", eval_args.config_path, "Run config JSON")->required();
  eval->add_option("--run-dir", eval_args.run_dir, "Output directory");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint to evaluate");
  eval->add_option("--pred-dir", eval_args.pred_dir, "Directory of <id>_pred.nii.gz volumes");
  eval->add_option("--split", eval_args.split, "Corpus split (default test)");
  eval->add_option("--model", eval_args.which, "student|teacher (default student)");
  eval->add_option("--set", eval_args.sets, "Override config keys (key=value)");
  eval->add_option("--window", eval_args.window, "Inference window (three ints)");
  eval->add_option("--stride", eval_args.stride, "Inference stride (three ints)");
  eval->callback([&] { cmd_eval(eval_args); });

  // infer
  InferArgs infer_args;
  auto* infer = app.add_subcommand("infer", "Predict one volume");
  infer->add_option("--config", infer_args.config_path, "Run config JSON")->required();
  infer->add_option("--checkpoint", infer_args.checkpoint, "Checkpoint")->required();
  infer->add_option("--image", infer_args.image, "Input NIfTI volume")->required();
  infer->add_option("--out", infer_args.out, "Output NIfTI label volume")->required();
  infer->add_option("--probs", infer_args.probs_out, "Optional probability archive");
  infer->add_option("--model", infer_args.which, "student|teacher (default student)");
  infer->add_option("--set", infer_args.sets, "Override config keys (key=value)");
  infer->add_option("--window", infer_args.window, "Inference window (three ints)");
  infer->add_option("--stride", infer_args.stride, "Inference stride (three ints)");
  infer->callback([&] { cmd_infer(infer_args); });

  // report
  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "Summaries and scatter CSV from report.csv");
  report->add_option("--run-dir", report_args.run_dir, "Run directory with report.csv")
      ->required();
  report->add_option("--baseline", report_args.baseline_dir,
                     "Baseline run directory for dice deltas");
  report->add_option("--out-dir", report_args.out_dir, "Output directory (default run dir)");
  report->callback([&] { cmd_report(report_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "config"}, {"message", e.what()}, {"exit_code", 2}}.dump()
              << "\n";
    return 2;
  } catch (const tak::Error& e) {
    return classify_and_report(e);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}, {"exit_code", 1}}.dump()
              << "\n";
    return 1;
  }
  return 0;
}
