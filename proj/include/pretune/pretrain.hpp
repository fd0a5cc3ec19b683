#pragma once

#include <string>
#include <vector>

#include "pretune/augment.hpp"
#include "pretune/checkpoint.hpp"
#include "pretune/losses.hpp"
#include "pretune/models.hpp"
#include "pretune/patches.hpp"
#include "pretune/profiler.hpp"
#include "pretune/schedule.hpp"

namespace pretune {

enum class PretrainStrategy { reconstruction, adversarial, contrastive, diffusion };

std::string to_string(PretrainStrategy s);
PretrainStrategy pretrain_strategy_from_string(const std::string& s);

struct PretrainConfig {
  PretrainStrategy strategy = PretrainStrategy::reconstruction;
  int64_t epochs = 600;
  double lr_start = 5e-3;
  double lr_decay_factor = 0.1;
  int64_t lr_decay_epoch = -1;  // -1: epochs/2, which lands on 300 for the default budget
  double weight_decay = 1e-4;
  int64_t batch_size = 8;
  int64_t contrastive_batch_size = 4;  // memory-bound reduction for the two-view batch
  int64_t adversarial_period = 1;      // n: generator every n epochs, discriminator every n+1
  double temperature = 0.5;
  int64_t projection_dim = 32;
  AugmentationConfig augment;
  int64_t patches_per_subject = 4;
  int64_t ssim_window = 7;
  // diffusion
  int64_t diffusion_train_steps = 1000;
  double beta_start = 5e-3;
  double beta_end = 2e-2;
  int64_t inference_steps = 25;
  // bookkeeping
  int64_t val_interval = 1;
  uint64_t seed = 0;

  int64_t resolved_decay_epoch() const { return lr_decay_epoch >= 0 ? lr_decay_epoch : epochs / 2; }
  int64_t resolved_batch_size() const {
    return strategy == PretrainStrategy::contrastive ? contrastive_batch_size : batch_size;
  }
  SsimParams ssim_params() const;
  void validate() const;
  nlohmann::json to_json() const;
};

// Step learning rate: lr_start before the decay epoch, times decay_factor at
// and after it.
double lr_at(int64_t epoch, const PretrainConfig& cfg);

struct LossRecord {
  double total = 0.0;
  std::vector<std::pair<std::string, double>> components;

  double component(const std::string& name) const;
};

struct EpochRecord {
  int64_t epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::vector<std::pair<std::string, double>> components;
  double sec_epoch = 0.0;
  double mem_frac = std::nan("");
  double power_frac = std::nan("");
};

struct TrainingHistory {
  std::vector<EpochRecord> rows;

  // CSV: epoch,lr,loss_total,<components...>,sec_epoch,mem_frac,power_frac
  void save_csv(const std::string& path) const;
  static TrainingHistory load_csv(const std::string& path);
};

// ---- single optimization steps ----

LossRecord step_reconstruction(EncoderDecoder& model, nn::Adam& opt, const Tensor& batch,
                               const SsimParams& p, double lr);

// Generator updates when epoch % n == 0 (reconstruction + adversarial terms);
// discriminator updates when epoch % (n+1) == 0. Components carry
// gen_updated/disc_updated flags so cadence is auditable from history.
LossRecord step_adversarial(EncoderDecoder& gen, Discriminator& disc, nn::Adam& gen_opt,
                            nn::Adam& disc_opt, const Tensor& batch, int64_t epoch,
                            const PretrainConfig& cfg, double lr);

LossRecord step_contrastive(EncoderDecoder& model, MlpHead& projection, nn::Adam& model_opt,
                            nn::Adam& proj_opt, const std::vector<Volume>& patches,
                            const PretrainConfig& cfg, Rng& aug_rng, double lr);

LossRecord step_diffusion(DiffusionUNet& model, nn::Adam& opt, const Tensor& batch,
                          const DiffusionSchedule& sched, const SsimParams& p, Rng& noise_rng,
                          double lr);

// Ancestral sampling over exactly T_infer evenly spaced schedule indices.
// Returns a (1,1,d,h,w) tensor; samples follow the prior scale, not [0,1].
Tensor sample_diffusion(const DiffusionUNet& model, const DiffusionSchedule& sched, Dims shape,
                        uint64_t seed);

// Partial-noise reconstruction: noise a patch to the inference index nearest
// `noise_fraction * T`, then denoise down the subsampled schedule.
Tensor denoise_reconstruct(const DiffusionUNet& model, const DiffusionSchedule& sched,
                           const Tensor& x0, double noise_fraction, uint64_t seed);

// ---- full pre-training runs ----

struct PretrainJob {
  PretrainConfig train;
  EncoderDecoderConfig encdec;
  DiffusionUNetConfig ddunet;
  DiscriminatorConfig disc;
  Dims patch_size{0, 0, 0};  // 0 -> the strategy's model input_patch

  Dims resolved_patch() const;
  std::string digest() const;  // stable over the full job configuration
};

struct PretrainResult {
  std::string checkpoint_path;
  TrainingHistory history;
  ResourceProfile mean_profile;
  bool resumed = false;
};

// Executes the strategy's epoch loop with the step schedule, per-epoch
// resource profiling, per-epoch checkpointing (resumable), and a validation
// reconstruction metric. Re-invoking on a partially run out_dir continues
// from the latest checkpoint when the job digest matches.
PretrainResult run_pretrain(const PretrainJob& job, const std::vector<SubjectRecord>& train_subjects,
                            const std::vector<SubjectRecord>& val_subjects,
                            const std::string& out_dir, bool allow_resume = true);

// ---- evaluation of a pre-trained backbone ----

struct PretrainEvaluation {
  double ms_ssim = std::nan("");
  double cls_accuracy = std::nan("");
  double cls_macro_f1 = std::nan("");
};

// MS-SSIM of reassembled reconstructions over `test`, plus an optional
// frozen-encoder linear probe for the classification columns (the probe is
// an artifact-side evaluation aid, not a claim about the source procedure).
PretrainEvaluation evaluate_pretrained(Model& model, const std::vector<SubjectRecord>& probe_train,
                                       const std::vector<SubjectRecord>& test, Dims patch,
                                       const PretrainConfig& cfg, bool linear_probe);

// MS-SSIM between a reassembled prediction and its reference volume, with as
// many dyadic levels as the window allows (capped at 3).
double reassembled_ms_ssim(const std::vector<std::vector<float>>& patch_bufs,
                           const std::vector<PatchOrigin>& origins, Dims patch,
                           const Volume& reference, int64_t window);

}  // namespace pretune
