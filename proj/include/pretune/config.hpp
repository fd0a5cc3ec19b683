#pragma once

#include <array>
#include <string>
#include <vector>

#include "pretune/finetune.hpp"
#include "pretune/models.hpp"
#include "pretune/pretrain.hpp"
#include "pretune/synthetic.hpp"

namespace pretune {

// Whole-experiment configuration: data source, split, both training phases,
// the tuning-strategy grid and the feature-size ablation. Defaults are the
// source-faithful values (600 epochs, 5e-3 -> 5e-4 at 300, weight decay 1e-4,
// beta 5e-3..2e-2 with 25 inference steps, task weights 0.85/0.15,
// top fraction 0.10, split 70/20/10).
struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir;        // empty: $PRETUNE_OUT or "runs"
  std::string data_manifest;  // empty: synthetic cohort
  int64_t synth_subjects = 30;
  SyntheticSpec synth;
  std::array<double, 3> split_fractions{0.70, 0.20, 0.10};

  std::vector<PretrainStrategy> pretrain_strategies{
      PretrainStrategy::reconstruction, PretrainStrategy::adversarial,
      PretrainStrategy::contrastive, PretrainStrategy::diffusion};
  PretrainConfig pretrain;

  std::vector<TuneKind> tune_strategies{TuneKind::top, TuneKind::decoder, TuneKind::full,
                                        TuneKind::lora, TuneKind::scratch};
  FinetuneConfig finetune;
  TuningStrategy tuning;

  std::vector<int64_t> feature_sizes{24};
  EncoderDecoderConfig encdec;
  DiffusionUNetConfig ddunet;
  DiscriminatorConfig disc;

  bool linear_probe = true;
  bool parallel_cells = false;  // profiling fidelity caveat applies when on

  std::string resolved_out_dir() const;
  void validate() const;

  // Small everything-on-CPU profile used across the test suites.
  static ExperimentConfig desk_profile();
};

// Strict parser for the hierarchical `section.key = value...` text format:
// unknown keys and malformed values are errors naming the exact key.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);

// Canonical emission (schema order, shortest round-trip floats). Feeding the
// emission back through the parser yields an identical digest.
std::string emit_config(const ExperimentConfig& cfg);
void write_config(const ExperimentConfig& cfg, const std::string& path);

std::string config_digest(const ExperimentConfig& cfg);

}  // namespace pretune
