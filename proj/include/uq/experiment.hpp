#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "uq/data.hpp"
#include "uq/hash.hpp"
#include "uq/io.hpp"
#include "uq/metrics.hpp"
#include "uq/model.hpp"
#include "uq/train.hpp"

namespace uq {

/// Everything a run needs, in one JSON-serializable bundle. The canonical
/// serialization (key-sorted, shortest-round-trip numbers, output root
/// excluded) names the run directory by its hash, so "same config" and
/// "same directory" are the same statement.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig data;
  std::uint64_t data_seed = 1234;
  PretrainConfig pretrain;
  std::size_t pretrain_corpus = 2500;
  std::vector<std::string> eval_datasets{"val", "ood"};
  std::size_t histogram_bins = 30;
  std::size_t ece_bins = 10;
  std::string output_root = "runs";  // overridable via UQ_OUTPUT_ROOT

  void validate() const {
    model.validate();
    train.validate();
    pretrain.validate();
    if (histogram_bins < 1 || ece_bins < 1) {
      throw std::invalid_argument("ExperimentConfig: bin counts must be >= 1");
    }
    if (eval_datasets.empty()) {
      throw std::invalid_argument("ExperimentConfig: need at least one evaluation dataset");
    }
    for (const std::string& d : eval_datasets) {
      if (d != "train" && d != "val" && d != "validation" && d != "ood") {
        throw std::invalid_argument("ExperimentConfig: unknown dataset '" + d +
                                    "' (expected train, val, or ood)");
      }
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end()) {
      throw std::invalid_argument(std::string("config: unknown key '") + key + "' in " +
                                  where);
    }
  }
}

template <typename T>
void read_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// The hash-relevant part of the config as sorted-key JSON. Output root is
/// deliberately left out: moving artifacts must not rename the run.
inline nlohmann::json canonical_config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["model"] = {{"vocab_size", cfg.model.vocab_size},
                {"embed_dim", cfg.model.embed_dim},
                {"num_layers", cfg.model.num_layers},
                {"num_heads", cfg.model.num_heads},
                {"mlp_dim", cfg.model.mlp_dim},
                {"max_seq_len", cfg.model.max_seq_len}};
  j["train"] = {{"members", cfg.train.members},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lambda_half", cfg.train.lambda_half},
                {"learning_rate", cfg.train.adam.learning_rate},
                {"beta1", cfg.train.adam.beta1},
                {"beta2", cfg.train.adam.beta2},
                {"eps", cfg.train.adam.eps},
                {"master_seed", cfg.train.master_seed},
                {"early_stop", cfg.train.early_stop},
                {"lora_rank", cfg.train.lora_rank},
                {"lora_scale", cfg.train.lora_scale}};
  j["data"] = {{"train_size", cfg.data.train_size},
               {"validation_size", cfg.data.validation_size},
               {"ood_size", cfg.data.ood_size},
               {"ambiguity_fraction", cfg.data.ambiguity_fraction},
               {"seed", cfg.data_seed}};
  j["pretrain"] = {{"corpus_size", cfg.pretrain_corpus},
                   {"epochs", cfg.pretrain.epochs},
                   {"batch_size", cfg.pretrain.batch_size},
                   {"learning_rate", cfg.pretrain.adam.learning_rate},
                   {"seed", cfg.pretrain.seed},
                   {"held_out_fraction", cfg.pretrain.held_out_fraction}};
  j["eval"] = {{"datasets", cfg.eval_datasets},
               {"histogram_bins", cfg.histogram_bins},
               {"ece_bins", cfg.ece_bins}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(canonical_config_json(cfg).dump());
}

/// Pretraining ignores the fine-tune and evaluation sections, so its
/// directory hashes only what determines the base checkpoint.
inline std::uint64_t pretrain_hash(const ExperimentConfig& cfg) {
  const nlohmann::json full = canonical_config_json(cfg);
  nlohmann::json j;
  j["model"] = full.at("model");
  j["pretrain"] = full.at("pretrain");
  return fnv1a64(j.dump());
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  detail::check_keys(j, {"model", "train", "data", "pretrain", "eval", "output_root"},
                     "top level");
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m, {"vocab_size", "embed_dim", "num_layers", "num_heads",
                           "mlp_dim", "max_seq_len"}, "model");
    detail::read_to(m, "vocab_size", cfg.model.vocab_size);
    detail::read_to(m, "embed_dim", cfg.model.embed_dim);
    detail::read_to(m, "num_layers", cfg.model.num_layers);
    detail::read_to(m, "num_heads", cfg.model.num_heads);
    detail::read_to(m, "mlp_dim", cfg.model.mlp_dim);
    detail::read_to(m, "max_seq_len", cfg.model.max_seq_len);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, {"members", "epochs", "batch_size", "lambda_half",
                           "learning_rate", "beta1", "beta2", "eps", "master_seed",
                           "early_stop", "lora_rank", "lora_scale"}, "train");
    detail::read_to(t, "members", cfg.train.members);
    detail::read_to(t, "epochs", cfg.train.epochs);
    detail::read_to(t, "batch_size", cfg.train.batch_size);
    detail::read_to(t, "lambda_half", cfg.train.lambda_half);
    detail::read_to(t, "learning_rate", cfg.train.adam.learning_rate);
    detail::read_to(t, "beta1", cfg.train.adam.beta1);
    detail::read_to(t, "beta2", cfg.train.adam.beta2);
    detail::read_to(t, "eps", cfg.train.adam.eps);
    detail::read_to(t, "master_seed", cfg.train.master_seed);
    detail::read_to(t, "early_stop", cfg.train.early_stop);
    detail::read_to(t, "lora_rank", cfg.train.lora_rank);
    detail::read_to(t, "lora_scale", cfg.train.lora_scale);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"train_size", "validation_size", "ood_size",
                           "ambiguity_fraction", "seed"}, "data");
    detail::read_to(d, "train_size", cfg.data.train_size);
    detail::read_to(d, "validation_size", cfg.data.validation_size);
    detail::read_to(d, "ood_size", cfg.data.ood_size);
    detail::read_to(d, "ambiguity_fraction", cfg.data.ambiguity_fraction);
    detail::read_to(d, "seed", cfg.data_seed);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    detail::check_keys(p, {"corpus_size", "epochs", "batch_size", "learning_rate",
                           "seed", "held_out_fraction"}, "pretrain");
    detail::read_to(p, "corpus_size", cfg.pretrain_corpus);
    detail::read_to(p, "epochs", cfg.pretrain.epochs);
    detail::read_to(p, "batch_size", cfg.pretrain.batch_size);
    detail::read_to(p, "learning_rate", cfg.pretrain.adam.learning_rate);
    detail::read_to(p, "seed", cfg.pretrain.seed);
    detail::read_to(p, "held_out_fraction", cfg.pretrain.held_out_fraction);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"datasets", "histogram_bins", "ece_bins"}, "eval");
    detail::read_to(e, "datasets", cfg.eval_datasets);
    detail::read_to(e, "histogram_bins", cfg.histogram_bins);
    detail::read_to(e, "ece_bins", cfg.ece_bins);
  }
  detail::read_to(j, "output_root", cfg.output_root);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_file(path));
}

/// UQ_OUTPUT_ROOT redirects every artifact tree without touching configs
/// (and without touching run names, since the root is not hashed).
inline std::filesystem::path resolve_output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("UQ_OUTPUT_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return cfg.output_root;
}

inline std::filesystem::path run_directory(const ExperimentConfig& cfg) {
  return resolve_output_root(cfg) / hex12(config_hash(cfg));
}

inline std::filesystem::path pretrain_directory(const ExperimentConfig& cfg) {
  return resolve_output_root(cfg) / hex12(pretrain_hash(cfg));
}

/// Thrown when a finetune would land in an existing run directory; callers
/// pass force=true to overwrite deliberately.
struct RunExists : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunArtifacts {
  std::filesystem::path run_dir;
  std::filesystem::path config_json;
  std::filesystem::path base_checkpoint;
  std::filesystem::path train_log;
  std::filesystem::path checkpoint_manifest;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> record_files;
  std::vector<std::filesystem::path> histogram_files;
  std::filesystem::path metrics_csv;
  std::filesystem::path auroc_csv;
  std::filesystem::path summary_csv;
  std::filesystem::path report_csv;
};

// ---------------------------------------------------------------------------
// Checkpoint manifest.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kManifestHeader = "member,epoch,file,val_nll";

struct ManifestEntry {
  std::int64_t member = 0;
  std::int64_t epoch = 0;
  std::string file;  // relative to the run directory
  double val_nll = 0.0;
};

inline std::string checkpoint_filename(std::size_t member, std::int64_t epoch) {
  std::string e = std::to_string(epoch);
  if (e.size() < 2) e.insert(0, "0");
  return "checkpoints/member" + std::to_string(member) + "_epoch" + e + ".ckpt";
}

inline std::string manifest_csv(const std::vector<ManifestEntry>& entries) {
  std::string out{kManifestHeader};
  out += '\n';
  for (const ManifestEntry& e : entries) {
    out += std::to_string(e.member);
    out += ',';
    out += std::to_string(e.epoch);
    out += ',';
    out += e.file;
    out += ',';
    out += format_double(e.val_nll);
    out += '\n';
  }
  return out;
}

inline std::vector<ManifestEntry> parse_manifest_csv(std::string_view text) {
  std::vector<ManifestEntry> entries;
  for (std::string_view line : detail::csv_lines(text, kManifestHeader, "manifest")) {
    const auto f = detail::split(line, ',');
    if (f.size() != 4) {
      throw std::runtime_error("manifest: malformed row '" + std::string(line) + "'");
    }
    entries.push_back({parse_int(f[0]), parse_int(f[1]), std::string(f[2]),
                       parse_double(f[3])});
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Pretraining command.
// ---------------------------------------------------------------------------

struct PretrainOutcome {
  std::filesystem::path dir;
  std::filesystem::path base_checkpoint;
  double final_train_loss = 0.0;
  double held_out_loss = 0.0;
  double held_out_perplexity = 0.0;
  bool reused = false;
};

inline PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg, bool force = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  PretrainOutcome out;
  out.dir = pretrain_directory(cfg);
  out.base_checkpoint = out.dir / "base.ckpt";
  const fs::path log_path = out.dir / "pretrain_log.csv";

  if (!force && fs::exists(out.base_checkpoint)) {
    out.reused = true;
    const auto rows = parse_train_log_csv(read_file(log_path));
    TrainLog log;
    log.rows = rows;
    const auto series = log.series(kEnsembleMember, "pretrain", "loss");
    if (!series.empty()) out.final_train_loss = series.back();
    for (const TrainLogRow& r : rows) {
      if (r.metric == "held_out_nll") out.held_out_loss = r.value;
    }
    out.held_out_perplexity = std::exp(out.held_out_loss);
    return out;
  }

  const Tokenizer tok;
  const auto texts = generate_pretrain_corpus(cfg.pretrain_corpus, cfg.pretrain.seed);
  std::vector<std::vector<std::int32_t>> corpus;
  corpus.reserve(texts.size());
  for (const std::string& t : texts) corpus.push_back(tok.encode(t));

  PretrainResult result = pretrain_base(cfg.model, corpus, cfg.pretrain);
  out.final_train_loss = result.final_train_loss;
  out.held_out_loss = result.held_out_loss;
  out.held_out_perplexity = std::exp(result.held_out_loss);

  BaseCheckpointFile file;
  file.config = cfg.model;
  file.seed = cfg.pretrain.seed;
  file.weights = std::move(result.base);
  save_base_checkpoint(out.base_checkpoint, file);
  atomic_write(log_path, train_log_csv(result.log.rows));
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning command.
// ---------------------------------------------------------------------------

struct FinetuneOutcome {
  RunArtifacts artifacts;
  std::size_t best_epoch = 0;
  double wall_seconds = 0.0;
};

inline FinetuneOutcome cmd_finetune(const ExperimentConfig& cfg,
                                    const std::filesystem::path& base_dir,
                                    bool force = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path base_path = base_dir / "base.ckpt";
  if (!fs::exists(base_path)) {
    throw std::runtime_error("finetune: no base checkpoint at " + base_path.string() +
                             " (run pretrain first)");
  }
  BaseCheckpointFile base_file = load_base_checkpoint(base_path);
  const ModelConfig& bc = base_file.config;
  if (bc.vocab_size != cfg.model.vocab_size || bc.embed_dim != cfg.model.embed_dim ||
      bc.num_layers != cfg.model.num_layers || bc.num_heads != cfg.model.num_heads ||
      bc.mlp_dim != cfg.model.mlp_dim || bc.max_seq_len != cfg.model.max_seq_len) {
    throw std::runtime_error("finetune: base checkpoint was trained with a different "
                             "model config than this run requests");
  }

  FinetuneOutcome out;
  RunArtifacts& art = out.artifacts;
  art.run_dir = run_directory(cfg);
  art.train_log = art.run_dir / "train_log.csv";
  if (fs::exists(art.train_log) && !force) {
    throw RunExists("finetune: run " + art.run_dir.string() +
                    " already exists for this config; pass --force to redo it");
  }

  const Tokenizer tok;
  const Dataset data = generate_synthetic(cfg.data, cfg.data_seed);
  const auto train = encode_samples(tok, data.train);
  const auto val = encode_samples(tok, data.validation);

  auto base = std::make_shared<const BaseWeights>(std::move(base_file.weights));
  EnsembleRun run = fine_tune_ensemble(cfg.model, base, train, val, cfg.train);
  out.best_epoch = run.best_epoch;
  out.wall_seconds = run.log.wall_seconds;

  const std::uint64_t hash = config_hash(cfg);
  art.config_json = art.run_dir / "config.json";
  atomic_write(art.config_json, canonical_config_json(cfg).dump(2) + "\n");
  // The run carries its own copy of the base so evaluation is self-contained.
  art.base_checkpoint = art.run_dir / "base.ckpt";
  atomic_write(art.base_checkpoint, read_file(base_path));
  atomic_write(art.train_log, train_log_csv(run.log.rows));

  std::vector<ManifestEntry> manifest;
  for (std::size_t m = 0; m < cfg.train.members; ++m) {
    for (const Checkpoint& ck : run.checkpoints[m]) {
      MemberCheckpointFile file;
      file.config_hash = hash;
      file.member_seed = run.members[m].seed;
      file.rank = cfg.train.lora_rank;
      file.scale = cfg.train.lora_scale;
      file.epoch = ck.epoch;
      file.optimizer_digest = ck.optimizer_digest;
      file.val_nll = ck.val_nll;
      file.adapters = ck.adapters;
      const std::string rel = checkpoint_filename(m, ck.epoch);
      save_member_checkpoint(art.run_dir / rel, file);
      art.checkpoints.push_back(art.run_dir / rel);
      manifest.push_back({static_cast<std::int64_t>(m), ck.epoch, rel, ck.val_nll});
    }
  }
  art.checkpoint_manifest = art.run_dir / "checkpoints.csv";
  atomic_write(art.checkpoint_manifest, manifest_csv(manifest));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation command.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kMetricsHeader =
    "dataset,epoch,accuracy,nll,ece,mean_entropy,mean_mi";
inline constexpr std::string_view kAurocHeader =
    "epoch,reference,dataset,metric,auroc,status";

struct EvalMetricsRow {
  std::string dataset;
  std::int64_t epoch = 0;
  double accuracy = 0.0, nll = 0.0, ece = 0.0;
  double mean_entropy = 0.0, mean_mi = 0.0;
};

inline std::vector<EvalMetricsRow> parse_metrics_csv(std::string_view text) {
  std::vector<EvalMetricsRow> rows;
  for (std::string_view line : detail::csv_lines(text, kMetricsHeader, "metrics")) {
    const auto f = detail::split(line, ',');
    if (f.size() != 7) {
      throw std::runtime_error("metrics: malformed row '" + std::string(line) + "'");
    }
    rows.push_back({std::string(f[0]), parse_int(f[1]), parse_double(f[2]),
                    parse_double(f[3]), parse_double(f[4]), parse_double(f[5]),
                    parse_double(f[6])});
  }
  return rows;
}

struct AurocRow {
  std::int64_t epoch = 0;
  std::string reference;
  std::string dataset;
  std::string metric;  // "entropy" | "mi"
  double auroc = 0.0;  // meaningful only when status == "ok"
  std::string status;  // "ok" | "skipped"
};

inline std::vector<AurocRow> parse_auroc_csv(std::string_view text) {
  std::vector<AurocRow> rows;
  for (std::string_view line : detail::csv_lines(text, kAurocHeader, "auroc")) {
    const auto f = detail::split(line, ',');
    if (f.size() != 6) {
      throw std::runtime_error("auroc: malformed row '" + std::string(line) + "'");
    }
    AurocRow r;
    r.epoch = parse_int(f[0]);
    r.reference = std::string(f[1]);
    r.dataset = std::string(f[2]);
    r.metric = std::string(f[3]);
    r.status = std::string(f[5]);
    r.auroc = f[4].empty() ? 0.0 : parse_double(f[4]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

inline const std::vector<McqSample>& resolve_split(const Dataset& data,
                                                   const std::string& name) {
  if (name == "train") return data.train;
  if (name == "val") return data.validation;
  if (name == "ood") return data.ood;
  throw std::invalid_argument("evaluate: unknown dataset '" + name +
                              "' (expected train, val, or ood)");
}

inline std::string normalize_dataset_name(const std::string& name) {
  return name == "validation" ? "val" : name;
}

}  // namespace detail

/// Evaluates saved checkpoints over (epoch x dataset) cells. `epochs` empty
/// means every epoch in the manifest; a listed epoch with no checkpoint is
/// an input error naming that epoch. The in-domain validation split always
/// serves as the AUROC reference, whether or not it is in `datasets`.
inline RunArtifacts cmd_evaluate(const std::filesystem::path& run_dir,
                                 const std::vector<std::string>& datasets_in,
                                 const std::vector<std::int64_t>& epochs = {}) {
  namespace fs = std::filesystem;
  if (datasets_in.empty()) {
    throw std::invalid_argument("evaluate: need at least one dataset");
  }
  std::vector<std::string> datasets;
  for (const std::string& d : datasets_in) {
    const std::string name = detail::normalize_dataset_name(d);
    if (std::find(datasets.begin(), datasets.end(), name) == datasets.end()) {
      datasets.push_back(name);
    }
  }
  RunArtifacts art;
  art.run_dir = run_dir;
  art.config_json = run_dir / "config.json";
  art.base_checkpoint = run_dir / "base.ckpt";
  art.train_log = run_dir / "train_log.csv";
  art.checkpoint_manifest = run_dir / "checkpoints.csv";
  if (!fs::exists(art.checkpoint_manifest)) {
    throw std::runtime_error("evaluate: no checkpoint manifest in " + run_dir.string());
  }

  const ExperimentConfig cfg = load_experiment_config(art.config_json);
  BaseCheckpointFile base_file = load_base_checkpoint(art.base_checkpoint);
  auto base = std::make_shared<const BaseWeights>(std::move(base_file.weights));

  // Index the manifest by epoch and check each requested epoch is complete.
  const auto manifest = parse_manifest_csv(read_file(art.checkpoint_manifest));
  std::map<std::int64_t, std::vector<const ManifestEntry*>> by_epoch;
  for (const ManifestEntry& e : manifest) by_epoch[e.epoch].push_back(&e);
  std::vector<std::int64_t> eval_epochs;
  if (epochs.empty()) {
    for (const auto& [epoch, entries] : by_epoch) eval_epochs.push_back(epoch);
  } else {
    eval_epochs = epochs;
    std::sort(eval_epochs.begin(), eval_epochs.end());
    eval_epochs.erase(std::unique(eval_epochs.begin(), eval_epochs.end()),
                      eval_epochs.end());
  }
  for (std::int64_t e : eval_epochs) {
    const auto it = by_epoch.find(e);
    if (it == by_epoch.end() || it->second.size() != cfg.train.members) {
      throw std::runtime_error("evaluate: missing checkpoint(s) for epoch " +
                               std::to_string(e));
    }
  }

  const Tokenizer tok;
  const Dataset data = generate_synthetic(cfg.data, cfg.data_seed);
  std::vector<std::string> needed = datasets;     // reference is always scored
  if (std::find(needed.begin(), needed.end(), std::string("val")) == needed.end()) {
    needed.push_back("val");
  }
  std::map<std::string, std::vector<EncodedMcq>> encoded;
  for (const std::string& name : needed) {
    encoded.emplace(name, encode_samples(tok, detail::resolve_split(data, name)));
  }

  const std::vector<double> entropy_edges =
      uniform_edges(0.0, std::log(static_cast<double>(kNumReducedClasses)),
                    cfg.histogram_bins);
  // With one member MI is identically zero; any positive span keeps the
  // histogram well-formed and puts all mass in the first bin.
  const double mi_hi = cfg.train.members > 1
                           ? std::log(static_cast<double>(cfg.train.members))
                           : 1.0;
  const std::vector<double> mi_edges = uniform_edges(0.0, mi_hi, cfg.histogram_bins);

  std::string metrics_out{kMetricsHeader};
  metrics_out += '\n';
  std::string auroc_out{kAurocHeader};
  auroc_out += '\n';
  std::vector<SummaryRow> summary_rows;

  for (std::int64_t epoch : eval_epochs) {
    // Rebuild the epoch's ensemble from its checkpoints.
    std::vector<EnsembleMember> members(cfg.train.members);
    for (const ManifestEntry* e : by_epoch.at(epoch)) {
      MemberCheckpointFile ck = load_member_checkpoint(run_dir / e->file);
      EnsembleMember& m = members.at(static_cast<std::size_t>(e->member));
      m.base = base;
      m.adapters = std::move(ck.adapters);
      m.seed = ck.member_seed;
    }
    for (const EnsembleMember& m : members) {
      if (m.base == nullptr) {
        throw std::runtime_error("evaluate: manifest lists duplicate members for epoch " +
                                 std::to_string(epoch));
      }
    }

    std::map<std::string, std::vector<double>> entropy_scores, mi_scores;
    for (const std::string& name : needed) {
      const auto& samples = encoded.at(name);
      std::vector<Tensor> probs;
      probs.reserve(members.size());
      for (const EnsembleMember& m : members) {
        probs.push_back(predict_reduced(cfg.model, *base, &m, samples));
      }
      const auto records = build_records(stack_members(probs, labels_of(samples)));

      auto& ent = entropy_scores[name];
      auto& mi = mi_scores[name];
      for (const UncertaintyRecord& r : records) {
        ent.push_back(r.entropy);
        mi.push_back(r.mutual_information);
      }
      if (std::find(datasets.begin(), datasets.end(), name) == datasets.end()) {
        continue;  // reference-only dataset: scored but not emitted
      }

      const std::string ep = std::to_string(epoch);
      const std::string tag = name + "_epoch" + (ep.size() < 2 ? "0" + ep : ep);
      const fs::path record_path = run_dir / ("records_" + tag + ".jsonl");
      atomic_write(record_path, uncertainty_jsonl(records, epoch, name));
      art.record_files.push_back(record_path);

      double mean_entropy = 0.0, mean_mi = 0.0;
      for (const UncertaintyRecord& r : records) {
        mean_entropy += r.entropy;
        mean_mi += r.mutual_information;
      }
      mean_entropy /= static_cast<double>(records.size());
      mean_mi /= static_cast<double>(records.size());
      metrics_out += name;
      metrics_out += ',';
      metrics_out += std::to_string(epoch);
      for (double v : {accuracy(records), nll(records), ece(records, cfg.ece_bins),
                       mean_entropy, mean_mi}) {
        metrics_out += ',';
        metrics_out += format_double(v);
      }
      metrics_out += '\n';

      const Histogram2D hist = histogram2d(records, entropy_edges, mi_edges);
      const fs::path hist_path = run_dir / ("hist_" + tag + ".csv");
      atomic_write(hist_path, histogram_csv(hist));
      art.histogram_files.push_back(hist_path);
      append_summary_rows(summary_rows, hist, name, epoch);
    }

    for (const std::string& name : datasets) {
      const bool self = name == "val";
      for (const char* metric : {"entropy", "mi"}) {
        auroc_out += std::to_string(epoch);
        auroc_out += ",val,";
        auroc_out += name;
        auroc_out += ',';
        auroc_out += metric;
        auroc_out += ',';
        if (self) {
          auroc_out += ",skipped\n";
        } else {
          const auto& ref = metric == std::string("entropy") ? entropy_scores.at("val")
                                                             : mi_scores.at("val");
          const auto& out = metric == std::string("entropy") ? entropy_scores.at(name)
                                                             : mi_scores.at(name);
          auroc_out += format_double(auroc(ref, out));
          auroc_out += ",ok\n";
        }
      }
    }
  }

  art.metrics_csv = run_dir / "metrics.csv";
  art.auroc_csv = run_dir / "auroc.csv";
  art.summary_csv = run_dir / "summary.csv";
  atomic_write(art.metrics_csv, metrics_out);
  atomic_write(art.auroc_csv, auroc_out);
  atomic_write(art.summary_csv, summary_csv(summary_rows));
  return art;
}

// ---------------------------------------------------------------------------
// Report command.
// ---------------------------------------------------------------------------

struct ReportOutcome {
  std::filesystem::path report_csv;
  std::string text;  // the emitted CSV, for printing
  std::size_t best_epoch = 0;
};

inline constexpr std::string_view kReportHeader =
    "epoch,dataset,accuracy,nll,ece,mean_entropy,mean_mi,entropy_auroc,mi_auroc,best";

/// Joins the evaluation tables into one per-(epoch, dataset) report row and
/// flags the early-stopped epoch. Pure function of the stored artifacts, so
/// regeneration is byte-identical.
inline ReportOutcome cmd_report(const std::filesystem::path& run_dir) {
  TrainLog log;
  log.rows = parse_train_log_csv(read_file(run_dir / "train_log.csv"));
  const std::size_t best = early_stop_select(log);

  const auto metrics = parse_metrics_csv(read_file(run_dir / "metrics.csv"));
  const auto aurocs = parse_auroc_csv(read_file(run_dir / "auroc.csv"));
  std::map<std::pair<std::int64_t, std::string>, std::pair<std::string, std::string>>
      auroc_cells;  // (epoch, dataset) -> (entropy text, mi text)
  for (const AurocRow& r : aurocs) {
    auto& cell = auroc_cells[{r.epoch, r.dataset}];
    std::string& slot = r.metric == "entropy" ? cell.first : cell.second;
    slot = r.status == "ok" ? format_double(r.auroc) : "";
  }

  std::string out{kReportHeader};
  out += '\n';
  for (const EvalMetricsRow& m : metrics) {
    const auto cell = auroc_cells.find({m.epoch, m.dataset});
    out += std::to_string(m.epoch);
    out += ',';
    out += m.dataset;
    for (double v : {m.accuracy, m.nll, m.ece, m.mean_entropy, m.mean_mi}) {
      out += ',';
      out += format_double(v);
    }
    out += ',';
    out += cell != auroc_cells.end() ? cell->second.first : "";
    out += ',';
    out += cell != auroc_cells.end() ? cell->second.second : "";
    out += ',';
    out += m.epoch == static_cast<std::int64_t>(best) ? '1' : '0';
    out += '\n';
  }

  ReportOutcome outcome;
  outcome.report_csv = run_dir / "report.csv";
  outcome.text = out;
  outcome.best_epoch = best;
  atomic_write(outcome.report_csv, out);
  return outcome;
}

}  // namespace uq
