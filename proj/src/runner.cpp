#include "pretune/runner.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <mutex>

#include "pretune/split.hpp"
#include "pretune/svol_io.hpp"

namespace fs = std::filesystem;

namespace pretune {

namespace {

int64_t now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

nlohmann::json entry_to_json(const LedgerEntry& e) {
  return {{"run_id", e.run_id},   {"kind", e.kind},     {"config_digest", e.config_digest},
          {"status", e.status},   {"detail", e.detail}, {"path", e.path},
          {"version", e.version}, {"timestamp", e.timestamp}, {"meta", e.meta}};
}

LedgerEntry entry_from_json(const nlohmann::json& j) {
  LedgerEntry e;
  e.run_id = j.at("run_id");
  e.kind = j.at("kind");
  e.config_digest = j.at("config_digest");
  e.status = j.at("status");
  e.detail = j.at("detail");
  e.path = j.at("path");
  e.version = j.at("version");
  e.timestamp = j.at("timestamp");
  e.meta = j.value("meta", nlohmann::json::object());
  return e;
}

}  // namespace

RunLedger::RunLedger(std::string path) : path_(std::move(path)) {}

void RunLedger::append(const LedgerEntry& e) {
  std::ofstream f(path_, std::ios::app);
  if (!f) throw IoError("cannot append to ledger: " + path_);
  LedgerEntry stamped = e;
  if (stamped.timestamp == 0) stamped.timestamp = now_seconds();
  f << entry_to_json(stamped).dump() << '\n';
}

std::vector<LedgerEntry> RunLedger::entries() const {
  std::vector<LedgerEntry> out;
  std::ifstream f(path_);
  if (!f) return out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(entry_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

std::vector<SubjectRecord> load_or_generate_cohort(const ExperimentConfig& cfg) {
  if (!cfg.data_manifest.empty()) return load_cohort(cfg.data_manifest);
  return generate_synthetic_cohort(seed_fanout(cfg.seed, "cohort"), cfg.synth_subjects, cfg.synth);
}

namespace {

struct SplitSubjects {
  std::vector<SubjectRecord> train, val, test;
};

SplitSubjects split_cohort(const ExperimentConfig& cfg, const std::vector<SubjectRecord>& cohort) {
  std::vector<std::string> ids;
  ids.reserve(cohort.size());
  for (const auto& s : cohort) ids.push_back(s.id);
  const DatasetSplit split = split_dataset(ids, cfg.split_fractions, seed_fanout(cfg.seed, "split"));
  std::map<std::string, const SubjectRecord*> by_id;
  for (const auto& s : cohort) by_id[s.id] = &s;
  SplitSubjects out;
  for (const auto& id : split.train_ids) out.train.push_back(*by_id.at(id));
  for (const auto& id : split.val_ids) out.val.push_back(*by_id.at(id));
  for (const auto& id : split.test_ids) out.test.push_back(*by_id.at(id));
  return out;
}

PretrainJob make_pretrain_job(const ExperimentConfig& cfg, PretrainStrategy strategy, int64_t fs,
                              const std::string& cell_id) {
  PretrainJob job;
  job.train = cfg.pretrain;
  job.train.strategy = strategy;
  job.train.seed = seed_fanout(cfg.seed, cell_id);
  job.encdec = cfg.encdec;
  job.encdec.feature_size = fs;
  job.encdec.seed = seed_fanout(cfg.seed, "model:" + cell_id);
  job.ddunet = cfg.ddunet;
  job.ddunet.seed = seed_fanout(cfg.seed, "ddunet:" + cell_id);
  job.disc = cfg.disc;
  job.disc.seed = seed_fanout(cfg.seed, "disc:" + cell_id);
  return job;
}

std::string pretrain_cell_id(PretrainStrategy s, int64_t fs) {
  return "pt-" + to_string(s) + "-f" + std::to_string(fs);
}

std::string finetune_cell_id(const std::string& pretrain_name, TuneKind k, int64_t fs) {
  return "ft-" + pretrain_name + "-" + to_string(k) + "-f" + std::to_string(fs);
}

}  // namespace

GridOutcome run_grid(const ExperimentConfig& cfg, bool force) {
  cfg.validate();
  const std::string out_root = cfg.resolved_out_dir();
  fs::create_directories(out_root);
  RunLedger ledger((fs::path(out_root) / "ledger.jsonl").string());
  const std::string digest = config_digest(cfg);

  for (const auto& e : ledger.entries()) {
    if (e.kind == "grid" && e.config_digest == digest && e.status == "ok" && !force) {
      throw ConfigError("grid with config digest " + digest +
                        " already completed in this output root; pass --force to rerun");
    }
  }
  write_config(cfg, (fs::path(out_root) / "config.txt").string());

  LedgerEntry grid_entry;
  grid_entry.run_id = "grid-" + digest.substr(0, 8);
  grid_entry.kind = "grid";
  grid_entry.config_digest = digest;
  grid_entry.status = "running";
  grid_entry.path = out_root;
  ledger.append(grid_entry);

  const auto cohort = load_or_generate_cohort(cfg);
  const auto splits = split_cohort(cfg, cohort);

  GridOutcome outcome;
  std::mutex sink_mutex;  // rows + ledger when cells run in parallel

  auto record = [&](const LedgerEntry& e) {
    std::lock_guard<std::mutex> lock(sink_mutex);
    ledger.append(e);
  };
  auto push_row = [&](const ReportRow& r) {
    std::lock_guard<std::mutex> lock(sink_mutex);
    outcome.rows.push_back(r);
  };

  auto run_finetune_cell = [&](const std::string& cell, const std::string& pretrain_name,
                               TuneKind kind, int64_t fs,
                               const std::optional<std::string>& checkpoint) {
    const std::string dir = (fs::path(out_root) / "runs" / cell).string();
    LedgerEntry e;
    e.run_id = cell;
    e.kind = "finetune";
    e.config_digest = digest;
    e.status = "running";
    e.path = dir;
    e.meta = {{"pretrain_strategy", pretrain_name},
              {"tune_strategy", to_string(kind)},
              {"feature_size", fs},
              {"checkpoint", checkpoint ? *checkpoint : ""}};
    record(e);
    try {
      TuningStrategy strategy = cfg.tuning;
      strategy.kind = kind;
      FinetuneConfig fcfg = cfg.finetune;
      fcfg.seed = seed_fanout(cfg.seed, cell);
      EncoderDecoderConfig scratch_cfg = cfg.encdec;
      scratch_cfg.feature_size = fs;
      scratch_cfg.seed = seed_fanout(cfg.seed, "scratch:" + cell);
      auto result = run_finetune(checkpoint, scratch_cfg, strategy, fcfg, splits.train, splits.val,
                                 splits.test, dir);
      ReportRow row;
      row.pretrain_strategy = pretrain_name;
      row.tune_strategy = to_string(kind);
      row.feature_size = fs;
      row.metrics = result.metrics;
      row.resources = result.mean_profile;
      push_row(row);
      e.status = "ok";
      e.detail = result.run_manifest_path;
      record(e);
      {
        std::lock_guard<std::mutex> lock(sink_mutex);
        ++outcome.finetune_runs;
      }
    } catch (const std::exception& ex) {
      e.status = "failed";
      e.detail = ex.what();
      record(e);
      std::lock_guard<std::mutex> lock(sink_mutex);
      ++outcome.failed_cells;
    }
  };

  for (int64_t fs_size : cfg.feature_sizes) {
    for (PretrainStrategy strategy : cfg.pretrain_strategies) {
      const std::string cell = pretrain_cell_id(strategy, fs_size);
      const std::string dir = (fs::path(out_root) / "runs" / cell).string();
      LedgerEntry e;
      e.run_id = cell;
      e.kind = "pretrain";
      e.config_digest = digest;
      e.status = "running";
      e.path = dir;
      e.meta = {{"pretrain_strategy", to_string(strategy)}, {"feature_size", fs_size}};
      record(e);

      std::string checkpoint;
      try {
        const PretrainJob job = make_pretrain_job(cfg, strategy, fs_size, cell);
        auto result = run_pretrain(job, splits.train, splits.val, dir);
        checkpoint = result.checkpoint_path;

        auto loaded = load_checkpoint(checkpoint);
        auto ev = evaluate_pretrained(*loaded.model, splits.train, splits.test,
                                      job.resolved_patch(), job.train, cfg.linear_probe);
        ReportRow row;
        row.pretrain_strategy = to_string(strategy);
        row.tune_strategy = "-";
        row.feature_size = fs_size;
        row.metrics.ms_ssim = ev.ms_ssim;
        row.metrics.cls_accuracy = ev.cls_accuracy;
        row.metrics.cls_macro_f1 = ev.cls_macro_f1;
        row.resources = result.mean_profile;
        push_row(row);
        e.status = "ok";
        e.detail = checkpoint;
        record(e);
        ++outcome.pretrain_runs;
      } catch (const std::exception& ex) {
        e.status = "failed";
        e.detail = ex.what();
        record(e);
        ++outcome.failed_cells;
        continue;  // no checkpoint: skip this strategy's fine-tunes
      }

      std::vector<std::function<void()>> cells;
      for (TuneKind kind : cfg.tune_strategies) {
        if (kind == TuneKind::scratch) continue;  // strategy-independent, runs once per size
        const std::string ft_cell = finetune_cell_id(to_string(strategy), kind, fs_size);
        cells.push_back([=]() {
          run_finetune_cell(ft_cell, to_string(strategy), kind, fs_size, checkpoint);
        });
      }
      if (cfg.parallel_cells) {
        std::vector<std::future<void>> futs;
        for (auto& c : cells) futs.push_back(std::async(std::launch::async, c));
        for (auto& f : futs) f.get();
      } else {
        for (auto& c : cells) c();
      }
    }

    for (TuneKind kind : cfg.tune_strategies) {
      if (kind != TuneKind::scratch) continue;
      run_finetune_cell(finetune_cell_id("none", TuneKind::scratch, fs_size), "none",
                        TuneKind::scratch, fs_size, std::nullopt);
    }
  }

  outcome.report = emit_report(outcome.rows, out_root);
  grid_entry.status = "ok";
  grid_entry.detail = outcome.report.csv_path;
  grid_entry.timestamp = 0;
  ledger.append(grid_entry);
  return outcome;
}

void resume_run(const std::string& out_root, const std::string& run_id) {
  RunLedger ledger((fs::path(out_root) / "ledger.jsonl").string());
  const auto entries = ledger.entries();
  const LedgerEntry* last = nullptr;
  for (const auto& e : entries) {
    if (e.run_id == run_id) last = &e;
  }
  if (!last) throw ConfigError("run id not found in ledger: " + run_id);

  const std::string config_path = (fs::path(out_root) / "config.txt").string();
  const ExperimentConfig cfg = parse_config(config_path);
  if (config_digest(cfg) != last->config_digest) {
    throw ManifestError("config digest changed since run " + run_id + " was started; refusing");
  }
  if (last->status == "ok") {
    std::cout << "run " << run_id << " already completed; nothing to resume\n";
    return;
  }

  const auto cohort = load_or_generate_cohort(cfg);
  const auto splits = split_cohort(cfg, cohort);

  LedgerEntry e = *last;
  e.status = "running";
  e.timestamp = 0;
  ledger.append(e);

  try {
    if (last->kind == "pretrain") {
      const auto strategy = pretrain_strategy_from_string(last->meta.at("pretrain_strategy"));
      const int64_t fs_size = last->meta.at("feature_size");
      const PretrainJob job = make_pretrain_job(cfg, strategy, fs_size, run_id);
      auto result = run_pretrain(job, splits.train, splits.val, last->path, /*allow_resume=*/true);
      e.status = "ok";
      e.detail = result.checkpoint_path;
    } else if (last->kind == "finetune") {
      const auto kind = tune_kind_from_string(last->meta.at("tune_strategy"));
      const int64_t fs_size = last->meta.at("feature_size");
      const std::string ckpt = last->meta.at("checkpoint");
      TuningStrategy strategy = cfg.tuning;
      strategy.kind = kind;
      FinetuneConfig fcfg = cfg.finetune;
      fcfg.seed = seed_fanout(cfg.seed, run_id);
      EncoderDecoderConfig scratch_cfg = cfg.encdec;
      scratch_cfg.feature_size = fs_size;
      scratch_cfg.seed = seed_fanout(cfg.seed, "scratch:" + run_id);
      auto result = run_finetune(ckpt.empty() ? std::nullopt : std::make_optional(ckpt),
                                 scratch_cfg, strategy, fcfg, splits.train, splits.val, splits.test,
                                 last->path, /*allow_resume=*/true);
      e.status = "ok";
      e.detail = result.run_manifest_path;
    } else {
      throw ConfigError("run kind '" + last->kind + "' is not resumable");
    }
  } catch (const std::exception& ex) {
    e.status = "failed";
    e.detail = ex.what();
    e.timestamp = 0;
    ledger.append(e);
    throw;
  }
  e.timestamp = 0;
  ledger.append(e);
}

std::vector<LedgerEntry> list_runs(const std::string& out_root) {
  RunLedger ledger((fs::path(out_root) / "ledger.jsonl").string());
  return ledger.entries();
}

}  // namespace pretune
