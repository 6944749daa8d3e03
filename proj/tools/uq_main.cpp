// Command-line front end for the ensemble uncertainty pipeline. Each stage
// is a subcommand so the expensive ones (pretrain, finetune) are cached in
// hash-named directories and the analyses re-run cheaply against them.
//
// Typical session:
//   uq pretrain --config desk.json
//   uq finetune --config desk.json --base runs/<pretrain-hash>
//   uq evaluate --run runs/<run-hash> --datasets val,ood
//   uq report   --run runs/<run-hash>
//
// UQ_OUTPUT_ROOT redirects all artifact trees without editing configs.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uq/experiment.hpp"

namespace {

uq::ExperimentConfig load_config(const std::string& path, const std::uint64_t* seed,
                                 const std::size_t* members,
                                 const double* lambda_half) {
  uq::ExperimentConfig cfg = uq::load_experiment_config(path);
  if (members != nullptr) cfg.train.members = *members;
  if (lambda_half != nullptr) cfg.train.lambda_half = *lambda_half;
  if (seed != nullptr) cfg.train.master_seed = *seed;
  cfg.validate();
  return cfg;
}

int run_pretrain(const std::string& config_path, const std::uint64_t* seed,
                 bool force) {
  uq::ExperimentConfig cfg = uq::load_experiment_config(config_path);
  if (seed != nullptr) cfg.pretrain.seed = *seed;
  cfg.validate();
  const uq::PretrainOutcome out = uq::cmd_pretrain(cfg, force);
  std::printf("%s base checkpoint: %s\n", out.reused ? "reusing" : "wrote",
              out.base_checkpoint.string().c_str());
  std::printf("final train loss %.4f, held-out loss %.4f (perplexity %.2f)\n",
              out.final_train_loss, out.held_out_loss, out.held_out_perplexity);
  return 0;
}

int run_finetune(const std::string& config_path, const std::string& base_dir,
                 const std::uint64_t* seed, const std::size_t* members,
                 const std::vector<double>& lambda_sweep, bool force) {
  // An explicit --lambda-half list fans out into one run per value; each
  // value changes the config hash and therefore the directory.
  std::vector<const double*> lambdas;
  if (lambda_sweep.empty()) {
    lambdas.push_back(nullptr);
  } else {
    for (const double& l : lambda_sweep) lambdas.push_back(&l);
  }
  for (const double* l : lambdas) {
    const uq::ExperimentConfig cfg = load_config(config_path, seed, members, l);
    const uq::FinetuneOutcome out = uq::cmd_finetune(cfg, base_dir, force);
    std::printf("run %s: best epoch %zu, %.1f s%s\n",
                out.artifacts.run_dir.string().c_str(), out.best_epoch,
                out.wall_seconds,
                l != nullptr ? (" (lambda_half " + uq::format_double(*l) + ")").c_str()
                             : "");
  }
  return 0;
}

int run_evaluate(const std::string& run_dir, const std::vector<std::string>& datasets,
                 const std::vector<std::int64_t>& epochs) {
  const uq::RunArtifacts art = uq::cmd_evaluate(run_dir, datasets, epochs);
  std::printf("evaluated %zu (dataset x epoch) cells\n", art.record_files.size());
  std::printf("metrics: %s\nauroc:   %s\nsummary: %s\n",
              art.metrics_csv.string().c_str(), art.auroc_csv.string().c_str(),
              art.summary_csv.string().c_str());
  return 0;
}

int run_report(const std::string& run_dir) {
  const uq::ReportOutcome out = uq::cmd_report(run_dir);
  std::fputs(out.text.c_str(), stdout);
  std::printf("# best epoch: %zu (written to %s)\n", out.best_epoch,
              out.report_csv.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA-ensemble uncertainty quantification pipeline"};
  app.require_subcommand(1);

  std::string config_path, base_dir, run_dir;
  std::uint64_t seed = 0;
  std::size_t members = 0;
  std::vector<double> lambda_sweep;
  std::vector<std::string> datasets{"val", "ood"};
  std::vector<std::int64_t> epochs;
  bool force = false;

  CLI::App* pre = app.add_subcommand("pretrain", "train the base model on the "
                                     "synthetic corpus and checkpoint it");
  pre->add_option("--config", config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  CLI::Option* pre_seed = pre->add_option("--seed", seed, "override pretrain seed");
  pre->add_flag("--force", force, "redo even if the checkpoint exists");

  CLI::App* fine = app.add_subcommand("finetune", "fine-tune the LoRA ensemble "
                                      "against a pretrained base");
  fine->add_option("--config", config_path, "experiment config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  fine->add_option("--base", base_dir, "directory holding base.ckpt")->required();
  CLI::Option* fine_seed = fine->add_option("--seed", seed, "override master seed");
  CLI::Option* fine_members =
      fine->add_option("--members", members, "override ensemble size");
  fine->add_option("--lambda-half", lambda_sweep,
                   "override the L2 coefficient; a comma list sweeps one run per value")
      ->delimiter(',');
  fine->add_flag("--force", force, "overwrite an existing run directory");

  CLI::App* eval = app.add_subcommand("evaluate", "score saved checkpoints and emit "
                                      "uncertainty artifacts");
  eval->add_option("--run", run_dir, "run directory from finetune")->required();
  eval->add_option("--datasets", datasets, "datasets to score (train, val, ood)")
      ->delimiter(',');
  eval->add_option("--epochs", epochs, "restrict to these epochs (default: all)")
      ->delimiter(',');

  CLI::App* rep = app.add_subcommand("report", "join evaluation tables into one "
                                     "summary and flag the early-stopped epoch");
  rep->add_option("--run", run_dir, "run directory from finetune")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) {
      return run_pretrain(config_path, pre_seed->count() > 0 ? &seed : nullptr, force);
    }
    if (*fine) {
      return run_finetune(config_path, base_dir,
                          fine_seed->count() > 0 ? &seed : nullptr,
                          fine_members->count() > 0 ? &members : nullptr,
                          lambda_sweep, force);
    }
    if (*eval) return run_evaluate(run_dir, datasets, epochs);
    if (*rep) return run_report(run_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
