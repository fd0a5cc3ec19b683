#pragma once

#include <string>
#include <vector>

#include "pretune/metrics.hpp"
#include "pretune/profiler.hpp"

namespace pretune {

struct ReportRow {
  std::string pretrain_strategy;  // "reconstruction", ..., or "none"
  std::string tune_strategy;      // "top", ..., "scratch", or "-" for pretrain rows
  int64_t feature_size = 0;
  MetricReport metrics;
  ResourceProfile resources;
};

struct ReportFiles {
  std::string csv_path;
  std::string json_path;
  std::string txt_path;
};

// Writes report.csv / report.json / report.txt with the fixed column set
// {pretrain_strategy, tune_strategy, feature_size, dice_avg, hausdorff_avg_mm,
//  ms_ssim, cls_accuracy, cls_macro_f1, peak_mem_frac, avg_mem_frac,
//  power_frac, sec_per_epoch}. Rows are sorted by (pretrain, tune,
// feature_size); floats carry 6 significant digits, NaN prints as n/a.
ReportFiles emit_report(std::vector<ReportRow> rows, const std::string& out_dir);

// CSV reader for the same schema (round-trip checks, `report` subcommand).
std::vector<ReportRow> read_report_csv(const std::string& path);

extern const std::vector<std::string> kReportColumns;

}  // namespace pretune
