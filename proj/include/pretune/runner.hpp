#pragma once

#include <string>
#include <vector>

#include "pretune/config.hpp"
#include "pretune/report.hpp"

namespace pretune {

struct LedgerEntry {
  std::string run_id;
  std::string kind;  // "pretrain" | "finetune" | "grid"
  std::string config_digest;
  std::string status;  // "running" | "ok" | "failed" | "resumed"
  std::string detail;  // artifact path or error text
  std::string path;    // run directory
  std::string version = "pretune-1";
  int64_t timestamp = 0;
  nlohmann::json meta;  // cell identity (strategy names, feature size, ...)
};

// Append-only JSONL ledger; rows are never rewritten, state changes append.
class RunLedger {
 public:
  explicit RunLedger(std::string path);

  void append(const LedgerEntry& e);
  std::vector<LedgerEntry> entries() const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct GridOutcome {
  std::vector<ReportRow> rows;
  ReportFiles report;
  int64_t pretrain_runs = 0;
  int64_t finetune_runs = 0;
  int64_t failed_cells = 0;
};

// Executes pre-training once per (strategy, feature size), then every
// checkpoint x tuning-strategy fine-tune plus one scratch baseline per
// feature size, and emits one consolidated report. A failed cell marks its
// ledger row failed and the grid continues. Reruns with an identical config
// digest are refused unless `force`.
GridOutcome run_grid(const ExperimentConfig& cfg, bool force = false);

// Continues an interrupted pretrain/finetune cell by run id. Completed runs
// are a no-op with a notice; a changed grid config digest is refused.
void resume_run(const std::string& out_root, const std::string& run_id);

std::vector<LedgerEntry> list_runs(const std::string& out_root);

// Cohort for a config: manifest if set, deterministic synthetic otherwise.
std::vector<SubjectRecord> load_or_generate_cohort(const ExperimentConfig& cfg);

}  // namespace pretune
