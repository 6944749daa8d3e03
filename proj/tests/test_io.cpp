// Artifact round trips and the experiment pipeline: bit-exact checkpoint
// serialization, lossless CSV/JSONL emission, canonical config hashing,
// and an end-to-end mini run checked for byte-identical artifacts across
// repeated invocations and relocated output roots.

#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "uq/experiment.hpp"
#include "uq/io.hpp"
#include "uq/rng.hpp"

using namespace uq;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("uq_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

bool same_bits(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

// Every regular file under root, keyed by its root-relative path.
std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) {
      out[fs::relative(entry.path(), root).generic_string()] = read_file(entry.path());
    }
  }
  return out;
}

// Small enough that the full pretrain-finetune-evaluate-report chain runs
// in about a second.
ExperimentConfig mini_experiment(const fs::path& root) {
  ExperimentConfig cfg;
  cfg.model.embed_dim = 16;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.mlp_dim = 32;
  cfg.model.max_seq_len = 192;
  cfg.train.members = 2;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.train.lora_rank = 2;
  cfg.train.master_seed = 5;
  cfg.data.train_size = 24;
  cfg.data.validation_size = 8;
  cfg.data.ood_size = 8;
  cfg.data_seed = 11;
  cfg.pretrain_corpus = 12;
  cfg.pretrain.epochs = 1;
  cfg.pretrain.batch_size = 6;
  cfg.pretrain.seed = 3;
  cfg.output_root = root.string();
  return cfg;
}

std::vector<LoraAdapter> random_adapters(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LoraAdapter> out;
  for (std::size_t layer = 0; layer < 2; ++layer) {
    for (auto target : {LoraAdapter::Target::query, LoraAdapter::Target::value}) {
      LoraAdapter ad;
      ad.rank = 3;
      ad.scale = 8.0;
      ad.layer = layer;
      ad.target = target;
      ad.a = Tensor::uninitialized({3, 16});
      ad.b = Tensor::uninitialized({16, 3});
      for (double& v : ad.a) v = rng.uniform(-1.0, 1.0);
      for (double& v : ad.b) v = rng.uniform(-1.0, 1.0);
      out.push_back(std::move(ad));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("doubles survive text round trips bit for bit", "[io]") {
  const double cases[] = {0.0,     -0.0,      1.0 / 3.0, 0.1,   std::log(6.0),
                          1e-300,  -2.5e17,   6.02e23,   -1.0,  5e-324,
                          1.7976931348623157e308};
  for (double v : cases) {
    REQUIRE(same_bits(parse_double(format_double(v)), v));
  }
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double v = (rng.uniform() - 0.5) * std::pow(10.0, rng.uniform(-12.0, 12.0));
    REQUIRE(same_bits(parse_double(format_double(v)), v));
  }
  REQUIRE_THROWS_AS(parse_double("1.5x"), std::runtime_error);
  REQUIRE_THROWS_AS(parse_double(""), std::runtime_error);
  REQUIRE_THROWS_AS(parse_int("7.5"), std::runtime_error);
}

TEST_CASE("byte stream primitives", "[io]") {
  SECTION("tensor round trip is bitwise") {
    Rng rng(3);
    Tensor t = Tensor::uninitialized({3, 5});
    for (double& v : t) v = rng.uniform(-10.0, 10.0);
    ByteWriter w;
    w.tensor(t);
    ByteReader r(w.str());
    Tensor back = r.tensor();
    REQUIRE(back.equals(t));
    REQUIRE(r.done());
  }

  SECTION("truncated input is rejected") {
    ByteWriter w;
    w.u64(42);
    ByteReader r(std::string_view(w.str()).substr(0, 5));
    REQUIRE_THROWS_AS(r.u64(), std::runtime_error);
  }

  SECTION("implausible tensor headers are rejected") {
    ByteWriter w;
    w.u64(9);  // rank 9 tensor
    ByteReader r(w.str());
    REQUIRE_THROWS_AS(r.tensor(), std::runtime_error);
  }
}

TEST_CASE("member checkpoints round trip bit-exactly", "[io]") {
  MemberCheckpointFile ck;
  ck.config_hash = 0xdeadbeef12345678ULL;
  ck.member_seed = 901;
  ck.rank = 3;
  ck.scale = 8.0;
  ck.epoch = 4;
  ck.optimizer_digest = 0x1122334455667788ULL;
  ck.val_nll = 1.0 / 3.0;
  ck.adapters = random_adapters(7);

  const std::string bytes = serialize_member_checkpoint(ck);
  const MemberCheckpointFile back = parse_member_checkpoint(bytes);
  REQUIRE(back.config_hash == ck.config_hash);
  REQUIRE(back.member_seed == ck.member_seed);
  REQUIRE(back.rank == ck.rank);
  REQUIRE(same_bits(back.scale, ck.scale));
  REQUIRE(back.epoch == ck.epoch);
  REQUIRE(back.optimizer_digest == ck.optimizer_digest);
  REQUIRE(same_bits(back.val_nll, ck.val_nll));
  REQUIRE(back.adapters.size() == ck.adapters.size());
  for (std::size_t i = 0; i < ck.adapters.size(); ++i) {
    REQUIRE(back.adapters[i].layer == ck.adapters[i].layer);
    REQUIRE(back.adapters[i].target == ck.adapters[i].target);
    REQUIRE(back.adapters[i].rank == ck.rank);
    REQUIRE(back.adapters[i].a.equals(ck.adapters[i].a));
    REQUIRE(back.adapters[i].b.equals(ck.adapters[i].b));
  }
  // Reserialization is the identity on bytes: the format has one spelling.
  REQUIRE(serialize_member_checkpoint(back) == bytes);

  REQUIRE_THROWS_AS(parse_member_checkpoint(bytes.substr(0, bytes.size() - 3)),
                    std::runtime_error);
  std::string wrong = bytes;
  wrong[0] = 'X';
  REQUIRE_THROWS_AS(parse_member_checkpoint(wrong), std::runtime_error);

  TempDir dir;
  save_member_checkpoint(dir.path / "m.ckpt", ck);
  REQUIRE(serialize_member_checkpoint(load_member_checkpoint(dir.path / "m.ckpt")) ==
          bytes);
  REQUIRE_FALSE(fs::exists(dir.path / "m.ckpt.tmp"));
}

TEST_CASE("base checkpoints round trip and validate their shapes", "[io]") {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_dim = 32;
  cfg.max_seq_len = 64;
  BaseCheckpointFile file;
  file.config = cfg;
  file.seed = 19;
  file.weights = init_base(cfg, 19);

  const std::string bytes = serialize_base_checkpoint(file);
  BaseCheckpointFile back = parse_base_checkpoint(bytes);
  REQUIRE(back.seed == 19);
  REQUIRE(back.config.embed_dim == 16);
  const auto got = back.weights.all_params();
  const auto want = file.weights.all_params();
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got[i]->equals(*want[i]));
  REQUIRE(serialize_base_checkpoint(back) == bytes);

  REQUIRE_THROWS_AS(parse_base_checkpoint(bytes.substr(0, 64)), std::runtime_error);
}

TEST_CASE("train log CSV is lossless", "[io]") {
  std::vector<TrainLogRow> rows;
  rows.push_back({-1, 0, "val", "nll", std::log(6.0)});
  rows.push_back({0, 3, "train", "loss", 1.0 / 3.0});
  rows.push_back({4, 12, "val", "ece", 5e-324});

  const std::string csv = train_log_csv(rows);
  REQUIRE(csv.substr(0, csv.find('\n')) == "member,epoch,split,metric,value");
  const auto back = parse_train_log_csv(csv);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(back[i].member == rows[i].member);
    REQUIRE(back[i].epoch == rows[i].epoch);
    REQUIRE(back[i].split == rows[i].split);
    REQUIRE(back[i].metric == rows[i].metric);
    REQUIRE(same_bits(back[i].value, rows[i].value));
  }
  REQUIRE(train_log_csv(back) == csv);
  REQUIRE_THROWS_AS(parse_train_log_csv("wrong,header\n1,2\n"), std::runtime_error);
  REQUIRE_THROWS_AS(parse_train_log_csv(std::string(kTrainLogHeader) + "\n1,2,a\n"),
                    std::runtime_error);
}

TEST_CASE("uncertainty records round trip through JSONL", "[io]") {
  std::vector<UncertaintyRecord> records;
  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    UncertaintyRecord r;
    r.id = i;
    r.probs.resize(6);
    double sum = 0.0;
    for (double& p : r.probs) {
      p = rng.uniform(0.01, 1.0);
      sum += p;
    }
    for (double& p : r.probs) p /= sum;
    r.entropy = predictive_entropy(r.probs);
    r.mutual_information = rng.uniform(0.0, 0.5);
    r.label = static_cast<std::int32_t>(i % 6);
    r.predicted = argmax_class(r.probs);
    r.correct = r.predicted == r.label;
    records.push_back(std::move(r));
  }

  const std::string jsonl = uncertainty_jsonl(records, 3, "ood");
  const auto lines = parse_uncertainty_jsonl(jsonl);
  REQUIRE(lines.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    REQUIRE(lines[i].epoch == 3);
    REQUIRE(lines[i].dataset == "ood");
    REQUIRE(lines[i].record.id == records[i].id);
    REQUIRE(same_bits(lines[i].record.entropy, records[i].entropy));
    REQUIRE(same_bits(lines[i].record.mutual_information,
                      records[i].mutual_information));
    REQUIRE(lines[i].record.probs.size() == 6);
    for (std::size_t c = 0; c < 6; ++c) {
      REQUIRE(same_bits(lines[i].record.probs[c], records[i].probs[c]));
    }
    REQUIRE(lines[i].record.label == records[i].label);
    REQUIRE(lines[i].record.predicted == records[i].predicted);
    REQUIRE(lines[i].record.correct == records[i].correct);
  }
}

TEST_CASE("histogram CSV enumerates the full grid and preserves totals", "[io]") {
  std::vector<UncertaintyRecord> records;
  Rng rng(13);
  for (int i = 0; i < 40; ++i) {
    UncertaintyRecord r;
    r.entropy = rng.uniform(0.0, std::log(6.0));
    r.mutual_information = rng.uniform(0.0, 0.6);
    r.correct = rng.bernoulli(0.7);
    records.push_back(r);
  }
  const auto ee = uniform_edges(0.0, std::log(6.0), 4);
  const auto me = uniform_edges(0.0, std::log(2.0), 3);
  const Histogram2D h = histogram2d(records, ee, me);
  const std::string csv = histogram_csv(h);

  REQUIRE(histogram_csv_total(csv) == 40);
  // 2 groups x 4 entropy bins x 3 MI bins data rows plus the header.
  std::size_t newlines = 0;
  for (char c : csv) newlines += c == '\n' ? 1 : 0;
  REQUIRE(newlines == 1 + 2 * 4 * 3);

  std::vector<SummaryRow> rows;
  append_summary_rows(rows, h, "val", 2);
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0].group == "correct");
  REQUIRE(rows[1].group == "incorrect");
  REQUIRE(rows[0].count + rows[1].count == 40);
  const std::string sum = summary_csv(rows);
  REQUIRE(sum.find("val,2,correct") != std::string::npos);
}

TEST_CASE("experiment config parsing and canonical hashing", "[io]") {
  SECTION("an empty object yields the defaults") {
    const ExperimentConfig cfg = parse_experiment_config("{}");
    REQUIRE(cfg.model.embed_dim == 64);
    REQUIRE(cfg.train.members == 5);
    REQUIRE(cfg.data.train_size == 2000);
    REQUIRE(cfg.eval_datasets == std::vector<std::string>{"val", "ood"});
  }

  SECTION("fields land where they should") {
    const ExperimentConfig cfg = parse_experiment_config(R"({
      "model": {"embed_dim": 32, "num_heads": 4},
      "train": {"members": 3, "lambda_half": 0.25, "learning_rate": 0.001},
      "data": {"train_size": 100, "seed": 77},
      "eval": {"datasets": ["ood"]},
      "output_root": "elsewhere"
    })");
    REQUIRE(cfg.model.embed_dim == 32);
    REQUIRE(cfg.train.members == 3);
    REQUIRE(cfg.train.lambda_half == 0.25);
    REQUIRE(cfg.train.adam.learning_rate == 0.001);
    REQUIRE(cfg.data.train_size == 100);
    REQUIRE(cfg.data_seed == 77);
    REQUIRE(cfg.eval_datasets == std::vector<std::string>{"ood"});
    REQUIRE(cfg.output_root == "elsewhere");
  }

  SECTION("unknown keys and unknown datasets are rejected") {
    REQUIRE_THROWS_AS(parse_experiment_config(R"({"trian": {}})"),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(parse_experiment_config(R"({"train": {"member": 5}})"),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(parse_experiment_config(R"({"eval": {"datasets": ["test"]}})"),
                      std::invalid_argument);
  }

  SECTION("the hash tracks content, not placement") {
    ExperimentConfig a;
    ExperimentConfig b;
    REQUIRE(config_hash(a) == config_hash(b));
    b.output_root = "/somewhere/else";
    REQUIRE(config_hash(a) == config_hash(b));  // root never renames a run
    b.train.lambda_half = 0.5;
    REQUIRE(config_hash(a) != config_hash(b));
    ExperimentConfig c;
    c.train.master_seed += 1;
    REQUIRE(config_hash(a) != config_hash(c));
    REQUIRE(hex12(config_hash(a)).size() == 12);
  }

  SECTION("parse of the canonical dump reproduces the hash") {
    ExperimentConfig cfg;
    cfg.train.members = 3;
    cfg.data_seed = 99;
    const ExperimentConfig back =
        parse_experiment_config(canonical_config_json(cfg).dump());
    REQUIRE(config_hash(back) == config_hash(cfg));
  }

  SECTION("the environment variable overrides the output root") {
    ExperimentConfig cfg;
    cfg.output_root = "configured";
    ::setenv("UQ_OUTPUT_ROOT", "/env/root", 1);
    const fs::path resolved = resolve_output_root(cfg);
    ::unsetenv("UQ_OUTPUT_ROOT");
    REQUIRE(resolved == fs::path("/env/root"));
    REQUIRE(resolve_output_root(cfg) == fs::path("configured"));
  }
}

TEST_CASE("pretrain command", "[io][pipeline]") {
  TempDir root;
  ExperimentConfig cfg = mini_experiment(root.path);

  SECTION("writes a base checkpoint and reuses it on rerun") {
    const PretrainOutcome first = cmd_pretrain(cfg);
    REQUIRE_FALSE(first.reused);
    REQUIRE(fs::exists(first.base_checkpoint));
    REQUIRE(first.held_out_perplexity == Catch::Approx(std::exp(first.held_out_loss)));

    const PretrainOutcome again = cmd_pretrain(cfg);
    REQUIRE(again.reused);
    REQUIRE(same_bits(again.final_train_loss, first.final_train_loss));
    REQUIRE(same_bits(again.held_out_loss, first.held_out_loss));
  }

  SECTION("fixed seed gives identical checkpoint bytes in a fresh root") {
    const PretrainOutcome first = cmd_pretrain(cfg);
    TempDir other;
    ExperimentConfig moved = cfg;
    moved.output_root = other.path.string();
    const PretrainOutcome second = cmd_pretrain(moved);
    REQUIRE(read_file(first.base_checkpoint) == read_file(second.base_checkpoint));
  }

  SECTION("zero epochs stores the random init; training beats it held-out") {
    ExperimentConfig untrained = cfg;
    untrained.pretrain.epochs = 0;
    const PretrainOutcome at_init = cmd_pretrain(untrained);
    const BaseCheckpointFile stored = load_base_checkpoint(at_init.base_checkpoint);
    BaseWeights fresh = init_base(cfg.model, cfg.pretrain.seed);
    const auto got = stored.weights.all_params();
    const auto want = fresh.all_params();
    for (std::size_t i = 0; i < want.size(); ++i) REQUIRE(got[i]->equals(*want[i]));

    const PretrainOutcome trained = cmd_pretrain(cfg);
    REQUIRE(trained.held_out_loss < at_init.held_out_loss);
  }
}

TEST_CASE("finetune, evaluate, and report commands", "[io][pipeline]") {
  TempDir root;
  ExperimentConfig cfg = mini_experiment(root.path);
  const PretrainOutcome pre = cmd_pretrain(cfg);

  SECTION("finetune writes logs and one checkpoint per member and epoch") {
    const FinetuneOutcome ft = cmd_finetune(cfg, pre.dir);
    const RunArtifacts& art = ft.artifacts;
    REQUIRE(fs::exists(art.train_log));
    REQUIRE(fs::exists(art.config_json));
    REQUIRE(art.checkpoints.size() == cfg.train.members * cfg.train.epochs);
    for (const fs::path& p : art.checkpoints) REQUIRE(fs::exists(p));
    REQUIRE(parse_manifest_csv(read_file(art.checkpoint_manifest)).size() ==
            art.checkpoints.size());
    REQUIRE(read_file(art.base_checkpoint) == read_file(pre.base_checkpoint));

    // The idempotence guard: same config refuses, --force redoes.
    REQUIRE_THROWS_AS(cmd_finetune(cfg, pre.dir), RunExists);
    REQUIRE_NOTHROW(cmd_finetune(cfg, pre.dir, /*force=*/true));

    // A missing base is an input error.
    ExperimentConfig homeless = cfg;
    homeless.train.master_seed = 999;
    REQUIRE_THROWS_WITH(cmd_finetune(homeless, root.path / "nowhere"),
                        Catch::Matchers::ContainsSubstring("base"));
  }

  SECTION("evaluate emits records, metrics, AUROC, and histograms per cell") {
    cmd_finetune(cfg, pre.dir);
    const fs::path run = run_directory(cfg);
    const RunArtifacts art = cmd_evaluate(run, {"val", "ood"});

    REQUIRE(art.record_files.size() == 2 * cfg.train.epochs);
    REQUIRE(art.histogram_files.size() == 2 * cfg.train.epochs);
    for (const fs::path& p : art.record_files) REQUIRE(fs::exists(p));

    const auto lines = parse_uncertainty_jsonl(read_file(art.record_files[0]));
    REQUIRE(lines.size() == cfg.data.validation_size);
    REQUIRE(lines[0].dataset == "val");
    for (const auto& l : lines) REQUIRE(l.record.probs.size() == kNumReducedClasses);

    const auto metrics = parse_metrics_csv(read_file(art.metrics_csv));
    REQUIRE(metrics.size() == 2 * cfg.train.epochs);
    for (const auto& m : metrics) {
      REQUIRE(m.accuracy >= 0.0);
      REQUIRE(m.accuracy <= 1.0);
      REQUIRE(m.nll > 0.0);
    }

    const auto aurocs = parse_auroc_csv(read_file(art.auroc_csv));
    REQUIRE(aurocs.size() == 2 * 2 * cfg.train.epochs);  // datasets x metrics x epochs
    for (const AurocRow& r : aurocs) {
      REQUIRE(r.reference == "val");
      if (r.dataset == "val") {
        REQUIRE(r.status == "skipped");
      } else {
        REQUIRE(r.status == "ok");
        REQUIRE(r.auroc >= 0.0);
        REQUIRE(r.auroc <= 1.0);
      }
    }

    // Histogram counts must account for every sample in the dataset.
    for (const fs::path& p : art.histogram_files) {
      const std::int64_t total = histogram_csv_total(read_file(p));
      const bool is_val = p.filename().string().find("val") != std::string::npos;
      REQUIRE(total == static_cast<std::int64_t>(is_val ? cfg.data.validation_size
                                                        : cfg.data.ood_size));
    }

    // Epoch filtering narrows the table; absent epochs are named errors.
    const RunArtifacts filtered = cmd_evaluate(run, {"ood"}, {1});
    REQUIRE(parse_metrics_csv(read_file(filtered.metrics_csv)).size() == 1);
    REQUIRE_THROWS_WITH(cmd_evaluate(run, {"ood"}, {7}),
                        Catch::Matchers::ContainsSubstring("7"));
  }

  SECTION("a single-member run has zero MI everywhere and MI-AUROC one half") {
    ExperimentConfig solo = mini_experiment(root.path);
    solo.train.members = 1;
    solo.train.epochs = 1;
    cmd_finetune(solo, pre.dir);
    const RunArtifacts art = cmd_evaluate(run_directory(solo), {"val", "ood"});
    for (const fs::path& p : art.record_files) {
      for (const auto& l : parse_uncertainty_jsonl(read_file(p))) {
        REQUIRE(l.record.mutual_information == 0.0);
      }
    }
    for (const AurocRow& r : parse_auroc_csv(read_file(art.auroc_csv))) {
      if (r.metric == "mi" && r.status == "ok") REQUIRE(r.auroc == 0.5);
    }
  }

  SECTION("report joins the tables and flags the early-stopped epoch") {
    cmd_finetune(cfg, pre.dir);
    const fs::path run = run_directory(cfg);
    cmd_evaluate(run, {"val", "ood"});
    const ReportOutcome rep = cmd_report(run);
    REQUIRE(rep.text == read_file(rep.report_csv));

    TrainLog log;
    log.rows = parse_train_log_csv(read_file(run / "train_log.csv"));
    REQUIRE(rep.best_epoch == early_stop_select(log));

    std::size_t data_rows = 0, best_rows = 0;
    std::size_t start = rep.text.find('\n') + 1;
    while (start < rep.text.size()) {
      std::size_t pos = rep.text.find('\n', start);
      if (pos == std::string::npos) pos = rep.text.size();
      const std::string line = rep.text.substr(start, pos - start);
      if (!line.empty()) {
        ++data_rows;
        if (line.back() == '1') ++best_rows;
        REQUIRE((line.back() == '0' || line.back() == '1'));
      }
      start = pos + 1;
    }
    REQUIRE(data_rows == 2 * cfg.train.epochs);  // datasets x epochs
    REQUIRE(best_rows == 2);                     // both datasets at the best epoch

    // Regeneration is a pure function of the artifacts.
    const ReportOutcome again = cmd_report(run);
    REQUIRE(again.text == rep.text);
    REQUIRE(read_file(again.report_csv) == rep.text);
  }
}

TEST_CASE("full pipeline is byte-identical across runs and roots", "[io][pipeline]") {
  TempDir root_a;
  ExperimentConfig cfg = mini_experiment(root_a.path);

  auto run_pipeline = [&cfg] {
    const PretrainOutcome pre = cmd_pretrain(cfg);
    cmd_finetune(cfg, pre.dir, /*force=*/true);
    const fs::path run = run_directory(cfg);
    cmd_evaluate(run, {"val", "ood"});
    cmd_report(run);
  };

  run_pipeline();
  const auto first = tree_bytes(root_a.path);

  // Second invocation lands in a different root purely via the environment;
  // every relative path and every byte must match.
  TempDir root_b;
  ::setenv("UQ_OUTPUT_ROOT", root_b.path.c_str(), 1);
  try {
    run_pipeline();
  } catch (...) {
    ::unsetenv("UQ_OUTPUT_ROOT");
    throw;
  }
  ::unsetenv("UQ_OUTPUT_ROOT");
  const auto second = tree_bytes(root_b.path);

  REQUIRE(first.size() == second.size());
  for (const auto& [rel, bytes] : first) {
    INFO("file " << rel);
    REQUIRE(second.count(rel) == 1);
    REQUIRE(second.at(rel) == bytes);
  }
}
