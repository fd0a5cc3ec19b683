#include "pretune/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace pretune {

std::string to_string(TuneKind k) {
  switch (k) {
    case TuneKind::top: return "top";
    case TuneKind::decoder: return "decoder";
    case TuneKind::full: return "full";
    case TuneKind::lora: return "lora";
    case TuneKind::scratch: return "scratch";
  }
  return "top";
}

TuneKind tune_kind_from_string(const std::string& s) {
  if (s == "top") return TuneKind::top;
  if (s == "decoder") return TuneKind::decoder;
  if (s == "full") return TuneKind::full;
  if (s == "lora") return TuneKind::lora;
  if (s == "scratch") return TuneKind::scratch;
  throw ConfigError("unknown tuning strategy: " + s);
}

void TuningStrategy::validate() const {
  if (top_fraction <= 0 || top_fraction > 1) {
    throw ConfigError("tuning: top_fraction must be in (0,1]");
  }
  if (lora_rank < 1) throw ConfigError("tuning: lora_rank must be >= 1");
  if (lora_alpha <= 0) throw ConfigError("tuning: lora_alpha must be positive");
}

std::set<std::string> select_trainable(const ParameterInventory& inv, const TuningStrategy& s) {
  s.validate();
  if (inv.entries.empty()) throw StrategyError("select_trainable: empty inventory");
  std::set<std::string> out;

  auto add_heads = [&]() {
    for (const auto& e : inv.entries) {
      if (e.stage == nn::Stage::head) out.insert(e.name);
    }
  };

  switch (s.kind) {
    case TuneKind::full:
    case TuneKind::scratch:
      for (const auto& e : inv.entries) out.insert(e.name);
      break;
    case TuneKind::decoder:
      for (const auto& e : inv.entries) {
        if (e.stage == nn::Stage::decoder || e.stage == nn::Stage::head) out.insert(e.name);
      }
      break;
    case TuneKind::top: {
      int64_t backbone_total = 0;
      for (const auto& e : inv.entries) {
        if (e.stage != nn::Stage::head) backbone_total += e.count;
      }
      const double threshold = s.top_fraction * static_cast<double>(backbone_total);
      int64_t cum = 0;
      for (auto it = inv.entries.rbegin(); it != inv.entries.rend(); ++it) {
        if (it->stage == nn::Stage::head) continue;
        out.insert(it->name);
        cum += it->count;
        if (static_cast<double>(cum) >= threshold) break;
      }
      add_heads();
      break;
    }
    case TuneKind::lora:
      for (const auto& e : inv.entries) {
        if (e.name.ends_with(".lora_a") || e.name.ends_with(".lora_b")) out.insert(e.name);
      }
      add_heads();
      break;
  }
  if (out.empty()) throw StrategyError("select_trainable: strategy selected no parameters");
  return out;
}

void apply_trainable(Model& model, const std::set<std::string>& names) {
  for (auto& p : model.params()) p.trainable = names.count(p.name) > 0;
}

void inject_lora(Model& model, const TuningStrategy& s, uint64_t seed) {
  s.validate();
  if (model.lora_state != LoraState::none) {
    throw StrategyError("inject_lora: model already carries adapters or merged state");
  }
  auto layers = model.linear_layers();
  if (layers.empty()) throw StrategyError("inject_lora: no eligible linear targets");
  Rng rng(seed_fanout(seed, "lora"));
  for (auto& [name, lin] : layers) {
    lin->lora_rank = s.lora_rank;
    lin->lora_scale = s.lora_alpha / static_cast<double>(s.lora_rank);
    lin->lora_a = Tensor::randn({s.lora_rank, lin->fan_in()}, rng, 0.02, /*leaf_param=*/true);
    lin->lora_b = Tensor::zeros({lin->fan_out(), s.lora_rank}, /*leaf_param=*/true);
  }
  model.lora_state = LoraState::active;
  model.rebuild_params();
  apply_trainable(model, select_trainable(model.inventory(), s));
}

void merge_lora(Model& model) {
  if (model.lora_state == LoraState::merged) throw StrategyError("merge_lora: already merged");
  if (model.lora_state == LoraState::none) return;  // zero adapters: no-op
  for (auto& [name, lin] : model.linear_layers()) {
    if (lin->lora_rank == 0) continue;
    const int64_t out_dim = lin->fan_out(), in_dim = lin->fan_in(), r = lin->lora_rank;
    // W += scale * B(out,r) * A(r,in)
    std::vector<double> delta(static_cast<size_t>(out_dim * in_dim), 0.0);
    gemm_accumulate(out_dim, in_dim, r, lin->lora_b.values().data(), lin->lora_a.values().data(),
                    delta.data());
    auto& w = lin->weight.mutable_values();
    for (size_t i = 0; i < w.size(); ++i) w[i] += lin->lora_scale * delta[i];
    lin->lora_rank = 0;
    lin->lora_scale = 0.0;
    lin->lora_a = Tensor();
    lin->lora_b = Tensor();
  }
  model.lora_state = LoraState::merged;
  model.rebuild_params();
}

int64_t lora_parameter_count(const Model& model) {
  int64_t count = 0;
  for (auto& [name, lin] : const_cast<Model&>(model).linear_layers()) {
    if (lin->lora_rank > 0) count += lin->lora_rank * (lin->fan_in() + lin->fan_out());
  }
  return count;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  if (lr_start <= 0) throw ConfigError("finetune: lr_start must be positive");
  if (lr_decay_factor <= 0 || lr_decay_factor > 1) {
    throw ConfigError("finetune: lr_decay_factor must be in (0,1]");
  }
  if (weight_decay < 0) throw ConfigError("finetune: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  if (patches_per_subject < 1) throw ConfigError("finetune: patches_per_subject must be >= 1");
  weights.validate();
  heads.validate();
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr_start", lr_start},
          {"lr_decay_factor", lr_decay_factor},
          {"lr_decay_epoch", resolved_decay_epoch()},
          {"weight_decay", weight_decay},
          {"l1", weights.l1},
          {"l2", weights.l2},
          {"batch_size", batch_size},
          {"patch_size", {patch_size.d, patch_size.h, patch_size.w}},
          {"patches_per_subject", patches_per_subject},
          {"ssim_window", ssim_window},
          {"heads", heads.to_json()},
          {"val_interval", val_interval},
          {"seed", seed}};
}

namespace {

struct TrainingItem {
  Volume patch;
  SegmentationMask mask_patch;
  int64_t label;
};

std::vector<TrainingItem> sample_epoch_items(const std::vector<SubjectRecord>& subjects, Dims patch,
                                             int64_t per_subject, uint64_t seed, int64_t epoch) {
  std::vector<TrainingItem> out;
  out.reserve(subjects.size() * per_subject);
  for (size_t si = 0; si < subjects.size(); ++si) {
    PatchSpec spec;
    spec.size = patch;
    spec.sampling = PatchSampling::random_k;
    spec.count = per_subject;
    spec.seed = seed_fanout(seed_fanout(seed, "ft_patches", epoch), "subject", si);
    auto extracted = extract_patches(subjects[si].volume, spec);
    std::vector<PatchOrigin> origins;
    for (const auto& e : extracted) origins.push_back(e.origin);
    auto mask_patches = extract_mask_patches(subjects[si].mask, patch, origins);
    for (size_t i = 0; i < extracted.size(); ++i) {
      out.push_back({std::move(extracted[i].patch), std::move(mask_patches[i]),
                     static_cast<int64_t>(subjects[si].class_label)});
    }
  }
  Rng order(seed_fanout(seed, "ft_order", epoch));
  order.shuffle(out);
  return out;
}

Dims resolve_patch(const FinetuneConfig& cfg, const Model& model) {
  if (cfg.patch_size.d > 0) return cfg.patch_size;
  if (const auto* ed = dynamic_cast<const EncoderDecoder*>(&model)) return ed->config().input_patch;
  if (const auto* du = dynamic_cast<const DiffusionUNet*>(&model)) return du->config().input_patch;
  throw ConfigError("finetune: cannot resolve patch size for model kind " + model.kind());
}

MultiTaskResult multitask_forward_loss(Model& model, const std::vector<TrainingItem>& chunk,
                                       const MultiTaskWeights& weights) {
  std::vector<Volume> vols;
  std::vector<SegmentationMask> masks;
  std::vector<int64_t> labels;
  for (const auto& item : chunk) {
    vols.push_back(item.patch);
    masks.push_back(item.mask_patch);
    labels.push_back(item.label);
  }
  auto out = model.forward_multitask(volumes_to_tensor(vols));
  Tensor probs = softmax_axis(out.seg_logits, 1);
  return multitask_loss(probs, masks_to_onehot(masks), out.cls_logits, labels, weights);
}

}  // namespace

MetricReport evaluate_multitask(Model& model, const std::vector<SubjectRecord>& subjects,
                                Dims patch, int64_t ssim_window) {
  NoGradGuard guard;
  MetricReport report;
  if (subjects.empty()) return report;

  SsimParams ssim_p;
  ssim_p.window = ssim_window;
  auto* ed = dynamic_cast<EncoderDecoder*>(&model);

  double dice_sum[2] = {0, 0}, dice_avg_sum = 0;
  double haus_sum[2] = {0, 0};
  int64_t haus_count[2] = {0, 0};
  double haus_avg_sum = 0;
  int64_t haus_avg_count = 0;
  double ms_sum = 0;
  int64_t ms_count = 0;
  std::vector<std::array<double, 3>> subject_logits;
  std::vector<int64_t> subject_labels;

  for (const auto& subject : subjects) {
    PatchSpec spec;
    spec.size = patch;
    spec.sampling = PatchSampling::grid;
    auto extracted = extract_patches(subject.volume, spec);
    std::vector<Volume> vols;
    std::vector<PatchOrigin> origins;
    for (auto& e : extracted) {
      vols.push_back(std::move(e.patch));
      origins.push_back(e.origin);
    }
    Tensor batch = volumes_to_tensor(vols);
    auto out = model.forward_multitask(batch);
    Tensor probs = softmax_axis(out.seg_logits, 1);

    // reassemble per-class probability volumes, then argmax
    const int64_t n = probs.shape()[0], classes = probs.shape()[1];
    const int64_t voxels = patch.voxels();
    std::vector<std::vector<float>> class_vols;
    for (int64_t c = 0; c < classes; ++c) {
      std::vector<std::vector<float>> bufs;
      for (int64_t i = 0; i < n; ++i) {
        std::vector<float> b(voxels);
        const double* src = probs.values().data() + (i * classes + c) * voxels;
        for (int64_t k = 0; k < voxels; ++k) b[k] = static_cast<float>(src[k]);
        bufs.push_back(std::move(b));
      }
      class_vols.push_back(reassemble_buffers(bufs, origins, patch, subject.volume.dims));
    }
    SegmentationMask pred = SegmentationMask::create(subject.volume.dims, subject.volume.spacing);
    for (size_t v = 0; v < pred.labels.size(); ++v) {
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (class_vols[c][v] > class_vols[best][v]) best = c;
      }
      pred.labels[v] = static_cast<uint8_t>(best);
    }

    const auto dice = dice_score(pred, subject.mask);
    dice_sum[0] += dice.per_label[0];
    dice_sum[1] += dice.per_label[1];
    dice_avg_sum += dice.average;

    const auto haus = hausdorff_distance(pred, subject.mask, subject.volume.spacing);
    for (int l = 0; l < 2; ++l) {
      if (haus.per_label_mm[l]) {
        haus_sum[l] += *haus.per_label_mm[l];
        ++haus_count[l];
      }
    }
    if (haus.average_mm) {
      haus_avg_sum += *haus.average_mm;
      ++haus_avg_count;
    }

    // subject-level classification: mean logits over patches
    std::array<double, 3> mean_logits{0, 0, 0};
    for (int64_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) mean_logits[k] += out.cls_logits.values()[i * 3 + k];
    }
    for (auto& v : mean_logits) v /= static_cast<double>(n);
    subject_logits.push_back(mean_logits);
    subject_labels.push_back(static_cast<int64_t>(subject.class_label));

    // reconstruction quality (models that kept a reconstruction path)
    if (ed) {
      Tensor recon = ed->forward(batch).recon;
      std::vector<std::vector<float>> bufs;
      for (int64_t i = 0; i < n; ++i) {
        std::vector<float> b(voxels);
        const double* src = recon.values().data() + i * voxels;
        for (int64_t k = 0; k < voxels; ++k) b[k] = static_cast<float>(src[k]);
        bufs.push_back(std::move(b));
      }
      ms_sum += reassembled_ms_ssim(bufs, origins, patch, subject.volume, ssim_p.window);
      ++ms_count;
    }
  }

  const auto n_subj = static_cast<double>(subjects.size());
  report.dice_per_label = {dice_sum[0] / n_subj, dice_sum[1] / n_subj};
  report.dice_avg = dice_avg_sum / n_subj;
  for (int l = 0; l < 2; ++l) {
    report.hausdorff_mm[l] = haus_count[l] ? haus_sum[l] / haus_count[l] : std::nan("");
  }
  report.hausdorff_avg_mm = haus_avg_count ? haus_avg_sum / haus_avg_count : std::nan("");
  if (ms_count > 0) report.ms_ssim = ms_sum / ms_count;

  const auto cm = classification_metrics(subject_logits, subject_labels);
  report.cls_accuracy = cm.accuracy;
  report.cls_macro_f1 = cm.macro_f1;
  report.confusion = cm.confusion;
  return report;
}

FinetuneResult run_finetune(const std::optional<std::string>& checkpoint_path,
                            const EncoderDecoderConfig& scratch_cfg, const TuningStrategy& strategy,
                            const FinetuneConfig& cfg, const std::vector<SubjectRecord>& train,
                            const std::vector<SubjectRecord>& val,
                            const std::vector<SubjectRecord>& test, const std::string& out_dir,
                            bool allow_resume) {
  cfg.validate();
  strategy.validate();
  if (train.empty()) throw ConfigError("finetune: empty training cohort");
  if (strategy.kind == TuneKind::scratch && checkpoint_path) {
    throw ConfigError("finetune: scratch strategy takes no checkpoint");
  }
  if (strategy.kind != TuneKind::scratch && !checkpoint_path) {
    throw ConfigError("finetune: strategy " + to_string(strategy.kind) + " requires a checkpoint");
  }
  fs::create_directories(out_dir);

  // build the model: pre-trained backbone or randomized scratch twin
  std::shared_ptr<Model> model;
  std::string base_checkpoint_digest = "scratch";
  std::string base_provenance = "scratch";
  if (checkpoint_path) {
    auto loaded = load_checkpoint(*checkpoint_path);
    model = loaded.model;
    base_checkpoint_digest = loaded.manifest.inventory_digest;
    base_provenance = loaded.manifest.provenance;
  } else {
    model = build_encoder_decoder(scratch_cfg);
  }
  model->attach_heads(cfg.heads, seed_fanout(cfg.seed, "ft_heads"));
  if (strategy.kind == TuneKind::lora) {
    inject_lora(*model, strategy, seed_fanout(cfg.seed, "ft_lora"));
  }
  const auto selected = select_trainable(model->inventory(), strategy);
  apply_trainable(*model, selected);

  // budget-style fraction: selected backbone parameters over backbone total
  int64_t backbone_total = 0, backbone_selected = 0;
  for (const auto& e : model->inventory().entries) {
    if (e.stage == nn::Stage::head) continue;
    backbone_total += e.count;
    if (selected.count(e.name)) backbone_selected += e.count;
  }
  const double trainable_fraction =
      backbone_total > 0 ? static_cast<double>(backbone_selected) / backbone_total : 0.0;

  const std::string frozen_before = parameter_digest(model->params(), false);
  const Dims patch = resolve_patch(cfg, *model);

  nlohmann::json run_manifest = {
      {"strategy", to_string(strategy.kind)},
      {"top_fraction", strategy.top_fraction},
      {"lora_rank", strategy.kind == TuneKind::lora ? strategy.lora_rank : 0},
      {"lora_alpha", strategy.kind == TuneKind::lora ? strategy.lora_alpha : 0.0},
      {"lora_parameters", strategy.kind == TuneKind::lora ? lora_parameter_count(*model) : 0},
      {"trainable_fraction", trainable_fraction},
      {"seed", cfg.seed},
      {"config", cfg.to_json()},
      {"checkpoint_digest", base_checkpoint_digest},
      {"base_provenance", base_provenance},
      {"init", checkpoint_path ? "pretrained" : "random"},
  };
  const std::string job_digest = hex64(fnv1a64(run_manifest.dump()));
  run_manifest["job_digest"] = job_digest;

  nn::Adam opt(&model->params(), nn::AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::string latest_path = (fs::path(out_dir) / "checkpoint_latest.ptck").string();
  const std::string history_path = (fs::path(out_dir) / "history.csv").string();
  const std::string provenance = "finetune:" + to_string(strategy.kind);

  TrainingHistory history;
  int64_t start_epoch = 0;
  bool resumed = false;
  if (allow_resume && fs::exists(latest_path)) {
    auto raw = load_checkpoint_raw(latest_path);
    if (raw.manifest.provenance != provenance ||
        raw.manifest.extra.value("job_digest", "") != job_digest) {
      throw ManifestError("out_dir holds a checkpoint from a different fine-tune job");
    }
    overlay_parameters(*model, raw);
    if (raw.optimizer) opt.restore_state(raw.optimizer->step_count, raw.optimizer->m, raw.optimizer->v);
    start_epoch = raw.manifest.epoch + 1;
    resumed = true;
    if (fs::exists(history_path)) {
      history = TrainingHistory::load_csv(history_path);
      std::erase_if(history.rows, [&](const EpochRecord& r) { return r.epoch > raw.manifest.epoch; });
    }
  }

  // fixed validation batch
  std::vector<TrainingItem> val_items;
  if (!val.empty()) {
    val_items = sample_epoch_items({val[0]}, patch, std::min<int64_t>(cfg.batch_size, 4),
                                   seed_fanout(cfg.seed, "ft_val"), 0);
  }

  PretrainConfig lr_proxy;  // reuse the step schedule
  lr_proxy.epochs = cfg.epochs;
  lr_proxy.lr_start = cfg.lr_start;
  lr_proxy.lr_decay_factor = cfg.lr_decay_factor;
  lr_proxy.lr_decay_epoch = cfg.lr_decay_epoch;

  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, lr_proxy);
    auto items = sample_epoch_items(train, patch, cfg.patches_per_subject, cfg.seed, epoch);

    double seg_sum = 0, cls_sum = 0, total_sum = 0;
    int64_t batches = 0;
    ResourceProfile profile = profile_epoch([&]() {
      for (size_t off = 0; off < items.size(); off += cfg.batch_size) {
        const size_t end = std::min(items.size(), off + cfg.batch_size);
        std::vector<TrainingItem> chunk(items.begin() + off, items.begin() + end);
        auto loss = multitask_forward_loss(*model, chunk, cfg.weights);
        opt.zero_grad();
        loss.total.backward();
        opt.step(lr);
        seg_sum += loss.seg.item();
        cls_sum += loss.cls.item();
        total_sum += loss.total.item();
        ++batches;
      }
    });

    double val_loss = std::nan("");
    if (!val_items.empty() && (epoch % cfg.val_interval) == 0) {
      NoGradGuard guard;
      val_loss = multitask_forward_loss(*model, val_items, cfg.weights).total.item();
    }

    EpochRecord row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss_total = batches ? total_sum / batches : std::nan("");
    row.components = {{"loss_seg", batches ? seg_sum / batches : std::nan("")},
                      {"loss_cls", batches ? cls_sum / batches : std::nan("")},
                      {"val_loss", val_loss}};
    row.sec_epoch = profile.seconds;
    row.mem_frac = profile.avg_mem_frac;
    row.power_frac = profile.power_frac;
    history.rows.push_back(std::move(row));
    history.save_csv(history_path);

    CheckpointManifest manifest;
    manifest.seed = cfg.seed;
    manifest.epoch = epoch;
    manifest.provenance = provenance;
    manifest.extra = {{"job_digest", job_digest}};
    OptimizerState st;
    st.step_count = opt.step_count();
    for (const auto& p : model->params()) {
      const auto& m = opt.first_moment(p.name);
      if (m.empty()) continue;
      st.m[p.name] = m;
      st.v[p.name] = opt.second_moment(p.name);
    }
    save_checkpoint(latest_path, *model, manifest, &st);
  }

  // freeze soundness: everything outside the selection must be bit-identical
  const std::string frozen_after = parameter_digest(model->params(), false);
  if (frozen_before != frozen_after) {
    throw Error("finetune: frozen parameters changed during training (freeze soundness violated)");
  }

  MetricReport metrics = evaluate_multitask(*model, test, patch, cfg.ssim_window);

  run_manifest["frozen_digest_before"] = frozen_before;
  run_manifest["frozen_digest_after"] = frozen_after;
  run_manifest["freeze_verified"] = true;

  // deployment copy: adapters folded back into plain weights
  if (model->lora_state == LoraState::active) merge_lora(*model);
  CheckpointManifest final_manifest;
  final_manifest.seed = cfg.seed;
  final_manifest.epoch = cfg.epochs - 1;
  final_manifest.provenance = provenance;
  final_manifest.extra = {{"job_digest", job_digest}};
  save_checkpoint((fs::path(out_dir) / "checkpoint.ptck").string(), *model, final_manifest, nullptr);

  const std::string manifest_path = (fs::path(out_dir) / "run_manifest.json").string();
  {
    std::ofstream f(manifest_path);
    if (!f) throw IoError("cannot write " + manifest_path);
    f << run_manifest.dump(2) << '\n';
  }

  FinetuneResult result;
  result.model = model;
  result.metrics = metrics;
  result.history = std::move(history);
  result.trainable_fraction = trainable_fraction;
  result.run_manifest_path = manifest_path;
  result.resumed = resumed;
  double sec = 0, mem = 0, peak = 0;
  int64_t n_prof = 0;
  for (const auto& r : result.history.rows) {
    if (!std::isnan(r.sec_epoch)) {
      sec += r.sec_epoch;
      ++n_prof;
    }
    if (!std::isnan(r.mem_frac)) {
      mem += r.mem_frac;
      peak = std::max(peak, r.mem_frac);
    }
  }
  if (n_prof > 0) {
    result.mean_profile.seconds = sec / n_prof;
    result.mean_profile.avg_mem_frac = mem / n_prof;
    result.mean_profile.peak_mem_frac = peak;
  }
  return result;
}

}  // namespace pretune
