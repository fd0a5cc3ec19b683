#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pretune/checkpoint.hpp"
#include "pretune/losses.hpp"
#include "pretune/metrics.hpp"
#include "pretune/models.hpp"
#include "pretune/pretrain.hpp"

namespace pretune {

enum class TuneKind { top, decoder, full, lora, scratch };

std::string to_string(TuneKind k);
TuneKind tune_kind_from_string(const std::string& s);

struct TuningStrategy {
  TuneKind kind = TuneKind::top;
  double top_fraction = 0.10;
  int64_t lora_rank = 8;
  double lora_alpha = 8.0;

  void validate() const;
};

// Resolves which parameters train under a strategy:
//   top     - minimal suffix of the dataflow-ordered non-head inventory whose
//             cumulative count reaches top_fraction of the non-head total,
//             plus all head entries (new heads are always trainable and sit
//             outside the 10% budget)
//   decoder - every decoder- or head-stage entry
//   full    - everything (scratch likewise, from random init)
//   lora    - adapter entries plus heads; requires injected adapters
std::set<std::string> select_trainable(const ParameterInventory& inv, const TuningStrategy& s);

// Applies the selection to the live parameter table.
void apply_trainable(Model& model, const std::set<std::string>& names);

// Wraps every linear layer with a rank-r adapter (B zero-initialized, so the
// adapted forward equals the base forward at injection) and freezes base
// weights. Throws StrategyError when the model has no linear targets.
void inject_lora(Model& model, const TuningStrategy& s, uint64_t seed = 0);

// Folds W + scale * B * A into each wrapped layer and removes the adapters.
// Merging twice is a state error; merging a never-adapted model is a no-op.
void merge_lora(Model& model);

// Total adapter parameter count: sum of r * (fan_in + fan_out) over targets.
int64_t lora_parameter_count(const Model& model);

struct FinetuneConfig {
  int64_t epochs = 100;
  double lr_start = 5e-3;
  double lr_decay_factor = 0.1;
  int64_t lr_decay_epoch = -1;  // -1 -> epochs/2
  double weight_decay = 1e-4;
  MultiTaskWeights weights;
  int64_t batch_size = 8;
  Dims patch_size{0, 0, 0};  // 0 -> backbone's input patch
  int64_t patches_per_subject = 4;
  int64_t ssim_window = 7;
  HeadConfig heads;
  int64_t val_interval = 1;
  uint64_t seed = 0;

  int64_t resolved_decay_epoch() const { return lr_decay_epoch >= 0 ? lr_decay_epoch : epochs / 2; }
  void validate() const;
  nlohmann::json to_json() const;
};

struct FinetuneResult {
  std::shared_ptr<Model> model;
  MetricReport metrics;
  TrainingHistory history;
  ResourceProfile mean_profile;
  double trainable_fraction = 0.0;  // trainable / total parameters after selection
  std::string run_manifest_path;
  bool resumed = false;
};

// Fine-tunes a pre-trained checkpoint (or a fresh model for scratch) on the
// Eq-style multi-task objective, verifying afterwards that frozen parameters
// are bit-identical, then evaluates on `test`.
FinetuneResult run_finetune(const std::optional<std::string>& checkpoint_path,
                            const EncoderDecoderConfig& scratch_cfg, const TuningStrategy& strategy,
                            const FinetuneConfig& cfg, const std::vector<SubjectRecord>& train,
                            const std::vector<SubjectRecord>& val,
                            const std::vector<SubjectRecord>& test, const std::string& out_dir,
                            bool allow_resume = true);

// Grid-patch inference + reassembly + metrics over a cohort.
MetricReport evaluate_multitask(Model& model, const std::vector<SubjectRecord>& subjects,
                                Dims patch, int64_t ssim_window);

}  // namespace pretune
