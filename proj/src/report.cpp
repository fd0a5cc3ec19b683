#include "pretune/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace pretune {

const std::vector<std::string> kReportColumns = {
    "pretrain_strategy", "tune_strategy", "feature_size",  "dice_avg",
    "hausdorff_avg_mm",  "ms_ssim",       "cls_accuracy",  "cls_macro_f1",
    "peak_mem_frac",     "avg_mem_frac",  "power_frac",    "sec_per_epoch"};

namespace {

std::vector<std::string> row_cells(const ReportRow& r) {
  return {r.pretrain_strategy,
          r.tune_strategy,
          std::to_string(r.feature_size),
          format_g6(r.metrics.dice_avg),
          format_g6(r.metrics.hausdorff_avg_mm),
          format_g6(r.metrics.ms_ssim),
          format_g6(r.metrics.cls_accuracy),
          format_g6(r.metrics.cls_macro_f1),
          format_g6(r.resources.peak_mem_frac),
          format_g6(r.resources.avg_mem_frac),
          format_g6(r.resources.power_frac),
          format_g6(r.resources.seconds)};
}

void sort_rows(std::vector<ReportRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.pretrain_strategy != b.pretrain_strategy) return a.pretrain_strategy < b.pretrain_strategy;
    if (a.tune_strategy != b.tune_strategy) return a.tune_strategy < b.tune_strategy;
    return a.feature_size < b.feature_size;
  });
}

double parse_cell(const std::string& s) {
  if (s == "n/a") return std::nan("");
  return std::stod(s);
}

}  // namespace

ReportFiles emit_report(std::vector<ReportRow> rows, const std::string& out_dir) {
  fs::create_directories(out_dir);
  sort_rows(rows);

  ReportFiles files;
  files.csv_path = (fs::path(out_dir) / "report.csv").string();
  files.json_path = (fs::path(out_dir) / "report.json").string();
  files.txt_path = (fs::path(out_dir) / "report.txt").string();

  // CSV
  {
    std::ofstream f(files.csv_path);
    if (!f) throw IoError("cannot write " + files.csv_path);
    for (size_t i = 0; i < kReportColumns.size(); ++i) {
      f << (i ? "," : "") << kReportColumns[i];
    }
    f << '\n';
    for (const auto& r : rows) {
      const auto cells = row_cells(r);
      for (size_t i = 0; i < cells.size(); ++i) f << (i ? "," : "") << cells[i];
      f << '\n';
    }
  }

  // JSON
  {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      const auto cells = row_cells(r);
      nlohmann::json o;
      for (size_t i = 0; i < kReportColumns.size(); ++i) o[kReportColumns[i]] = cells[i];
      j.push_back(std::move(o));
    }
    std::ofstream f(files.json_path);
    if (!f) throw IoError("cannot write " + files.json_path);
    f << j.dump(2) << '\n';
  }

  // plain-text table
  {
    std::vector<std::vector<std::string>> table;
    table.push_back(kReportColumns);
    for (const auto& r : rows) table.push_back(row_cells(r));
    std::vector<size_t> widths(kReportColumns.size(), 0);
    for (const auto& row : table) {
      for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
    }
    std::ofstream f(files.txt_path);
    if (!f) throw IoError("cannot write " + files.txt_path);
    for (size_t ri = 0; ri < table.size(); ++ri) {
      std::ostringstream line;
      for (size_t i = 0; i < table[ri].size(); ++i) {
        if (i) line << "  ";
        line << table[ri][i];
        for (size_t pad = table[ri][i].size(); pad < widths[i]; ++pad) line << ' ';
      }
      f << line.str() << '\n';
      if (ri == 0) {
        std::string rule;
        for (size_t i = 0; i < widths.size(); ++i) {
          if (i) rule += "  ";
          rule.append(widths[i], '-');
        }
        f << rule << '\n';
      }
    }
  }
  return files;
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open report: " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty report: " + path);
  {
    std::string expect;
    for (size_t i = 0; i < kReportColumns.size(); ++i) {
      expect += (i ? "," : "");
      expect += kReportColumns[i];
    }
    if (line != expect) throw IoError("report header mismatch in " + path);
  }
  std::vector<ReportRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != kReportColumns.size()) throw IoError("malformed report row: " + line);
    ReportRow r;
    r.pretrain_strategy = cells[0];
    r.tune_strategy = cells[1];
    r.feature_size = std::stoll(cells[2]);
    r.metrics.dice_avg = parse_cell(cells[3]);
    r.metrics.hausdorff_avg_mm = parse_cell(cells[4]);
    r.metrics.ms_ssim = parse_cell(cells[5]);
    r.metrics.cls_accuracy = parse_cell(cells[6]);
    r.metrics.cls_macro_f1 = parse_cell(cells[7]);
    r.resources.peak_mem_frac = parse_cell(cells[8]);
    r.resources.avg_mem_frac = parse_cell(cells[9]);
    r.resources.power_frac = parse_cell(cells[10]);
    r.resources.seconds = parse_cell(cells[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace pretune
