// pretune: self-supervised pre-training / fine-tuning benchmark driver.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "pretune/config.hpp"
#include "pretune/runner.hpp"
#include "pretune/split.hpp"
#include "pretune/svol_io.hpp"

namespace fs = std::filesystem;
using namespace pretune;

namespace {

std::string default_out_root() {
  if (const char* env = std::getenv("PRETUNE_OUT")) {
    if (*env) return env;
  }
  return "runs";
}

// Shared flags that mirror ExperimentConfig fields; a config file provides
// the base and flags override it.
struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string manifest;
  uint64_t seed = 0;
  bool seed_set = false;
};

ExperimentConfig resolve_config(const CommonOpts& opts, bool desk_defaults) {
  ExperimentConfig cfg =
      opts.config_path.empty()
          ? (desk_defaults ? ExperimentConfig::desk_profile() : ExperimentConfig())
          : parse_config(opts.config_path);
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (!opts.manifest.empty()) cfg.data_manifest = opts.manifest;
  if (opts.seed_set) cfg.seed = opts.seed;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config file");
  cmd->add_option("--out", opts.out_dir, "output root (default $PRETUNE_OUT or ./runs)");
  cmd->add_option("--data", opts.manifest, "cohort manifest CSV (default: synthetic cohort)");
  cmd->add_option("--seed", opts.seed, "global seed")->each([&](const std::string&) {
    opts.seed_set = true;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pretune: pre-training and fine-tuning benchmark for 3D encoder-decoders"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a synthetic sulcal cohort");
  std::string synth_out = "cohort";
  int64_t synth_n = 30;
  std::vector<int64_t> synth_dims{32, 32, 32};
  uint64_t synth_seed = 0;
  std::vector<double> synth_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};
  bool synth_gzip = false;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--subjects", synth_n, "cohort size");
  synth->add_option("--dims", synth_dims, "volume dims d h w")->expected(3);
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--class-mix", synth_mix, "absent/present/small probabilities")->expected(3);
  synth->add_flag("--gzip", synth_gzip, "gzip the SVOL files");

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "run one self-supervised pre-training strategy");
  CommonOpts pre_opts;
  add_common(pre, pre_opts);
  std::string pre_strategy = "reconstruction";
  int64_t pre_epochs = -1;
  bool pre_desk = false;
  pre->add_option("--strategy", pre_strategy, "reconstruction|adversarial|contrastive|diffusion");
  pre->add_option("--epochs", pre_epochs, "override epoch budget");
  pre->add_flag("--desk", pre_desk, "desk-scale defaults (CPU-sized model)");

  // ---- finetune ----
  auto* fin = app.add_subcommand("finetune", "fine-tune a checkpoint with one tuning strategy");
  CommonOpts fin_opts;
  add_common(fin, fin_opts);
  std::string fin_strategy = "top";
  std::string fin_checkpoint;
  int64_t fin_epochs = -1;
  bool fin_desk = false;
  fin->add_option("--strategy", fin_strategy, "top|decoder|full|lora|scratch");
  fin->add_option("--checkpoint", fin_checkpoint, "pre-trained checkpoint (omit for scratch)");
  fin->add_option("--epochs", fin_epochs, "override epoch budget");
  int64_t fin_rank = -1;
  double fin_alpha = -1;
  double fin_top_fraction = -1;
  fin->add_option("--lora-rank", fin_rank, "LoRA rank r");
  fin->add_option("--lora-alpha", fin_alpha, "LoRA alpha");
  fin->add_option("--top-fraction", fin_top_fraction, "top-tuning parameter fraction");
  fin->add_flag("--desk", fin_desk, "desk-scale defaults");

  // ---- grid ----
  auto* grid = app.add_subcommand("grid", "run the pretrain x finetune comparison grid");
  CommonOpts grid_opts;
  add_common(grid, grid_opts);
  bool grid_force = false;
  bool grid_desk = false;
  grid->add_flag("--force", grid_force, "rerun even if this config digest already completed");
  grid->add_flag("--desk", grid_desk, "desk-scale defaults");

  // ---- report ----
  auto* rep = app.add_subcommand("report", "re-emit a consolidated report from report.csv files");
  std::vector<std::string> rep_inputs;
  std::string rep_out = ".";
  rep->add_option("--in", rep_inputs, "report.csv files to merge")->required();
  rep->add_option("--out", rep_out, "output directory");

  // ---- resume ----
  auto* res = app.add_subcommand("resume", "continue an interrupted run by id");
  std::string res_root = default_out_root();
  std::string res_id;
  res->add_option("--out", res_root, "output root");
  res->add_option("--run-id", res_id, "ledger run id")->required();

  // ---- ls ----
  auto* ls = app.add_subcommand("ls", "list ledger entries");
  std::string ls_root = default_out_root();
  ls->add_option("--out", ls_root, "output root");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SyntheticSpec spec;
      spec.dims = {synth_dims[0], synth_dims[1], synth_dims[2]};
      spec.class_mix = {synth_mix[0], synth_mix[1], synth_mix[2]};
      auto cohort = generate_synthetic_cohort(synth_seed, synth_n, spec);
      const std::string manifest = save_cohort(synth_out, cohort, synth_gzip);
      std::cout << "wrote " << cohort.size() << " subjects; manifest: " << manifest << "\n";
    } else if (*pre) {
      ExperimentConfig cfg = resolve_config(pre_opts, pre_desk);
      cfg.pretrain_strategies = {pretrain_strategy_from_string(pre_strategy)};
      if (pre_epochs > 0) cfg.pretrain.epochs = pre_epochs;
      cfg.tune_strategies.clear();
      const std::string root = cfg.resolved_out_dir();
      const auto cohort = load_or_generate_cohort(cfg);
      std::vector<std::string> ids;
      for (const auto& s : cohort) ids.push_back(s.id);
      const auto split = split_dataset(ids, cfg.split_fractions, seed_fanout(cfg.seed, "split"));
      std::vector<SubjectRecord> train, val;
      for (const auto& s : cohort) {
        if (std::count(split.train_ids.begin(), split.train_ids.end(), s.id)) train.push_back(s);
        if (std::count(split.val_ids.begin(), split.val_ids.end(), s.id)) val.push_back(s);
      }
      PretrainJob job;
      job.train = cfg.pretrain;
      job.train.strategy = pretrain_strategy_from_string(pre_strategy);
      job.train.seed = seed_fanout(cfg.seed, "pretrain-cli");
      job.encdec = cfg.encdec;
      job.encdec.feature_size = cfg.feature_sizes[0];
      job.ddunet = cfg.ddunet;
      job.disc = cfg.disc;
      auto result = run_pretrain(job, train, val, (fs::path(root) / "pretrain").string());
      std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    } else if (*fin) {
      ExperimentConfig cfg = resolve_config(fin_opts, fin_desk);
      if (fin_epochs > 0) cfg.finetune.epochs = fin_epochs;
      if (fin_rank > 0) cfg.tuning.lora_rank = fin_rank;
      if (fin_alpha > 0) cfg.tuning.lora_alpha = fin_alpha;
      if (fin_top_fraction > 0) cfg.tuning.top_fraction = fin_top_fraction;
      TuningStrategy strategy = cfg.tuning;
      strategy.kind = tune_kind_from_string(fin_strategy);
      const std::string root = cfg.resolved_out_dir();
      const auto cohort = load_or_generate_cohort(cfg);
      std::vector<std::string> ids;
      for (const auto& s : cohort) ids.push_back(s.id);
      const auto split = split_dataset(ids, cfg.split_fractions, seed_fanout(cfg.seed, "split"));
      std::vector<SubjectRecord> train, val, test;
      for (const auto& s : cohort) {
        if (std::count(split.train_ids.begin(), split.train_ids.end(), s.id)) train.push_back(s);
        if (std::count(split.val_ids.begin(), split.val_ids.end(), s.id)) val.push_back(s);
        if (std::count(split.test_ids.begin(), split.test_ids.end(), s.id)) test.push_back(s);
      }
      EncoderDecoderConfig scratch_cfg = cfg.encdec;
      scratch_cfg.feature_size = cfg.feature_sizes[0];
      FinetuneConfig fcfg = cfg.finetune;
      fcfg.seed = seed_fanout(cfg.seed, "finetune-cli");
      auto result = run_finetune(
          fin_checkpoint.empty() ? std::nullopt : std::make_optional(fin_checkpoint), scratch_cfg,
          strategy, fcfg, train, val, test, (fs::path(root) / "finetune").string());
      std::cout << "dice_avg=" << format_g6(result.metrics.dice_avg)
                << " hausdorff_avg_mm=" << format_g6(result.metrics.hausdorff_avg_mm)
                << " cls_accuracy=" << format_g6(result.metrics.cls_accuracy)
                << " trainable_fraction=" << format_g6(result.trainable_fraction) << "\n";
      std::cout << "manifest: " << result.run_manifest_path << "\n";
    } else if (*grid) {
      ExperimentConfig cfg = resolve_config(grid_opts, grid_desk);
      auto outcome = run_grid(cfg, grid_force);
      std::cout << "pretrain runs: " << outcome.pretrain_runs
                << ", finetune runs: " << outcome.finetune_runs
                << ", failed cells: " << outcome.failed_cells << "\n";
      std::cout << "report: " << outcome.report.csv_path << "\n";
    } else if (*rep) {
      std::vector<ReportRow> rows;
      for (const auto& path : rep_inputs) {
        for (auto& r : read_report_csv(path)) rows.push_back(std::move(r));
      }
      auto files = emit_report(rows, rep_out);
      std::cout << "report: " << files.csv_path << "\n";
    } else if (*res) {
      resume_run(res_root, res_id);
    } else if (*ls) {
      for (const auto& e : list_runs(ls_root)) {
        std::cout << e.timestamp << "  " << e.run_id << "  " << e.kind << "  " << e.status << "  "
                  << e.detail << "\n";
      }
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
