#include "pretune/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pretune/metrics.hpp"

namespace fs = std::filesystem;

namespace pretune {

std::string to_string(PretrainStrategy s) {
  switch (s) {
    case PretrainStrategy::reconstruction: return "reconstruction";
    case PretrainStrategy::adversarial: return "adversarial";
    case PretrainStrategy::contrastive: return "contrastive";
    case PretrainStrategy::diffusion: return "diffusion";
  }
  return "reconstruction";
}

PretrainStrategy pretrain_strategy_from_string(const std::string& s) {
  if (s == "reconstruction") return PretrainStrategy::reconstruction;
  if (s == "adversarial") return PretrainStrategy::adversarial;
  if (s == "contrastive") return PretrainStrategy::contrastive;
  if (s == "diffusion") return PretrainStrategy::diffusion;
  throw ConfigError("unknown pre-training strategy: " + s);
}

SsimParams PretrainConfig::ssim_params() const {
  SsimParams p;
  p.window = ssim_window;
  return p;
}

void PretrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (lr_start <= 0) throw ConfigError("pretrain: lr_start must be positive");
  if (lr_decay_factor <= 0 || lr_decay_factor > 1) {
    throw ConfigError("pretrain: lr_decay_factor must be in (0,1]");
  }
  if (weight_decay < 0) throw ConfigError("pretrain: weight_decay must be >= 0");
  if (batch_size < 1 || contrastive_batch_size < 2) {
    throw ConfigError("pretrain: batch sizes too small");
  }
  if (adversarial_period < 1) throw ConfigError("pretrain: adversarial period n must be >= 1");
  if (temperature <= 0) throw ConfigError("pretrain: temperature must be positive");
  if (patches_per_subject < 1) throw ConfigError("pretrain: patches_per_subject must be >= 1");
  ssim_params().validate();
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"strategy", to_string(strategy)},
          {"epochs", epochs},
          {"lr_start", lr_start},
          {"lr_decay_factor", lr_decay_factor},
          {"lr_decay_epoch", resolved_decay_epoch()},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"contrastive_batch_size", contrastive_batch_size},
          {"adversarial_period", adversarial_period},
          {"temperature", temperature},
          {"projection_dim", projection_dim},
          {"patches_per_subject", patches_per_subject},
          {"ssim_window", ssim_window},
          {"diffusion_train_steps", diffusion_train_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"inference_steps", inference_steps},
          {"val_interval", val_interval},
          {"seed", seed}};
}

double lr_at(int64_t epoch, const PretrainConfig& cfg) {
  if (epoch < 0) throw RangeError("lr_at: negative epoch");
  return epoch < cfg.resolved_decay_epoch() ? cfg.lr_start : cfg.lr_start * cfg.lr_decay_factor;
}

double LossRecord::component(const std::string& name) const {
  for (const auto& [k, v] : components) {
    if (k == name) return v;
  }
  throw ConfigError("loss record has no component " + name);
}

// ---- history CSV ----

void TrainingHistory::save_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write history: " + path);
  f << "epoch,lr,loss_total";
  if (!rows.empty()) {
    for (const auto& [k, v] : rows[0].components) f << ',' << k;
  }
  f << ",sec_epoch,mem_frac,power_frac\n";
  for (const auto& r : rows) {
    f << r.epoch << ',' << format_g6(r.lr) << ',' << format_g6(r.loss_total);
    for (const auto& [k, v] : r.components) f << ',' << format_g6(v);
    f << ',' << format_g6(r.sec_epoch) << ',' << format_g6(r.mem_frac) << ','
      << format_g6(r.power_frac) << '\n';
  }
}

TrainingHistory TrainingHistory::load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open history: " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty history: " + path);
  std::vector<std::string> headers;
  {
    std::stringstream ss(line);
    std::string h;
    while (std::getline(ss, h, ',')) headers.push_back(h);
  }
  if (headers.size() < 6 || headers[0] != "epoch" || headers[1] != "lr" ||
      headers[2] != "loss_total" || headers[headers.size() - 3] != "sec_epoch") {
    throw IoError("history header mismatch in " + path);
  }
  const size_t n_components = headers.size() - 6;
  TrainingHistory hist;
  auto parse = [](const std::string& s) { return s == "n/a" ? std::nan("") : std::stod(s); };
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != headers.size()) throw IoError("malformed history row: " + line);
    EpochRecord r;
    r.epoch = std::stoll(cells[0]);
    r.lr = parse(cells[1]);
    r.loss_total = parse(cells[2]);
    for (size_t i = 0; i < n_components; ++i) {
      r.components.emplace_back(headers[3 + i], parse(cells[3 + i]));
    }
    r.sec_epoch = parse(cells[cells.size() - 3]);
    r.mem_frac = parse(cells[cells.size() - 2]);
    r.power_frac = parse(cells[cells.size() - 1]);
    hist.rows.push_back(std::move(r));
  }
  return hist;
}

// ---- steps ----

LossRecord step_reconstruction(EncoderDecoder& model, nn::Adam& opt, const Tensor& batch,
                               const SsimParams& p, double lr) {
  Tensor recon = model.forward(batch).recon;
  Tensor loss = loss_rec(recon, batch, p);
  opt.zero_grad();
  loss.backward();
  opt.step(lr);
  LossRecord r;
  r.total = loss.item();
  r.components = {{"loss_rec", r.total}};
  return r;
}

LossRecord step_adversarial(EncoderDecoder& gen, Discriminator& disc, nn::Adam& gen_opt,
                            nn::Adam& disc_opt, const Tensor& batch, int64_t epoch,
                            const PretrainConfig& cfg, double lr) {
  const int64_t n = cfg.adversarial_period;
  const bool gen_update = (epoch % n) == 0;
  const bool disc_update = (epoch % (n + 1)) == 0;
  const SsimParams p = cfg.ssim_params();

  double d_loss = std::nan(""), g_rec = std::nan(""), g_adv = std::nan("");

  if (disc_update) {
    Tensor fake;
    {
      NoGradGuard guard;  // generator provides detached fakes
      fake = gen.forward(batch).recon;
    }
    Tensor loss = disc_loss(disc.forward(fake), disc.forward(batch));
    disc_opt.zero_grad();
    loss.backward();
    disc_opt.step(lr);
    d_loss = loss.item();
  }

  if (gen_update) {
    Tensor recon = gen.forward(batch).recon;
    Tensor rec_term = loss_rec(recon, batch, p);
    Tensor adv_term = gen_loss(disc.forward(recon));
    Tensor total = add(rec_term, adv_term);
    gen_opt.zero_grad();
    disc_opt.zero_grad();  // generator backward spills into disc grads; clear them
    total.backward();
    gen_opt.step(lr);
    g_rec = rec_term.item();
    g_adv = adv_term.item();
  }

  LossRecord r;
  r.total = gen_update ? g_rec + g_adv : (disc_update ? d_loss : 0.0);
  r.components = {{"loss_rec", g_rec},
                  {"loss_gen", g_adv},
                  {"loss_disc", d_loss},
                  {"gen_updated", gen_update ? 1.0 : 0.0},
                  {"disc_updated", disc_update ? 1.0 : 0.0}};
  return r;
}

LossRecord step_contrastive(EncoderDecoder& model, MlpHead& projection, nn::Adam& model_opt,
                            nn::Adam& proj_opt, const std::vector<Volume>& patches,
                            const PretrainConfig& cfg, Rng& aug_rng, double lr) {
  const auto b = static_cast<int64_t>(patches.size());
  if (b < 2) throw ConfigError("contrastive step needs at least 2 patches");
  std::vector<Volume> views;
  views.reserve(2 * b);
  for (const auto& p : patches) views.push_back(augment_view(p, cfg.augment, aug_rng));
  for (const auto& p : patches) views.push_back(augment_view(p, cfg.augment, aug_rng));

  Tensor input = volumes_to_tensor(views);  // (2B,1,...)
  auto out = model.forward(input);

  ContrastiveBatch cb;
  cb.embeddings = projection.forward(mean(out.bottleneck, {2, 3, 4}, false));
  cb.temperature = cfg.temperature;
  cb.partner.resize(2 * b);
  for (int64_t i = 0; i < b; ++i) {
    cb.partner[i] = i + b;
    cb.partner[i + b] = i;
  }

  auto result = contrastive_total(out.recon, input, cfg.ssim_params(), cb);
  model_opt.zero_grad();
  proj_opt.zero_grad();
  result.total.backward();
  model_opt.step(lr);
  proj_opt.step(lr);

  LossRecord r;
  r.total = result.total.item();
  r.components = {{"loss_rec", result.rec.item()}, {"loss_con", result.con.item()}};
  return r;
}

LossRecord step_diffusion(DiffusionUNet& model, nn::Adam& opt, const Tensor& batch,
                          const DiffusionSchedule& sched, const SsimParams& p, Rng& noise_rng,
                          double lr) {
  const int64_t n = batch.shape()[0];
  std::vector<int64_t> timesteps(n);
  for (auto& t : timesteps) t = static_cast<int64_t>(noise_rng.uniform_int(sched.T_train));
  Tensor noise = Tensor::randn(batch.shape(), noise_rng);
  Tensor noisy = forward_diffuse(batch, timesteps, noise, sched);
  Tensor pred = model.forward(noisy, timesteps);
  Tensor loss = loss_rec(pred, noise, p);  // SSIM-form objective on the noise fields
  opt.zero_grad();
  loss.backward();
  opt.step(lr);
  LossRecord r;
  r.total = loss.item();
  r.components = {{"loss_rec", r.total}};
  return r;
}

// ---- sampling ----

namespace {

// One ancestral update x_t -> x_{t_prev} on the subsampled schedule.
void ancestral_step(std::vector<double>& x, const std::vector<double>& eps, double alpha_bar_t,
                    double alpha_bar_prev, bool add_noise, Rng& rng) {
  const double beta_eff = 1.0 - alpha_bar_t / alpha_bar_prev;
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta_eff);
  const double eps_coef = beta_eff / std::sqrt(1.0 - alpha_bar_t);
  const double sigma =
      add_noise ? std::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * beta_eff) : 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    x[i] = inv_sqrt_alpha * (x[i] - eps_coef * eps[i]);
    if (add_noise) x[i] += sigma * rng.normal();
  }
}

Tensor denoise_from(const DiffusionUNet& model, const DiffusionSchedule& sched, Tensor x,
                    int64_t start_index, Rng& rng) {
  NoGradGuard guard;
  const auto indices = sched.inference_indices();
  const int64_t n = x.shape()[0];
  for (int64_t i = start_index; i >= 0; --i) {
    const int64_t t = indices[i];
    const double bar_t = sched.alpha_bars[t];
    const double bar_prev = i > 0 ? sched.alpha_bars[indices[i - 1]] : 1.0;
    const std::vector<int64_t> ts(n, t);
    Tensor eps = model.forward(x, ts);
    auto xv = x.values();
    ancestral_step(xv, eps.values(), bar_t, bar_prev, /*add_noise=*/i > 0, rng);
    x = Tensor::from_data(x.shape(), std::move(xv));
  }
  return x;
}

}  // namespace

Tensor sample_diffusion(const DiffusionUNet& model, const DiffusionSchedule& sched, Dims shape,
                        uint64_t seed) {
  Rng rng(seed);
  Tensor x = Tensor::randn({1, 1, shape.d, shape.h, shape.w}, rng);
  x = denoise_from(model, sched, x, sched.T_infer - 1, rng);
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw Error("diffusion sample diverged to non-finite values");
  }
  return x;
}

Tensor denoise_reconstruct(const DiffusionUNet& model, const DiffusionSchedule& sched,
                           const Tensor& x0, double noise_fraction, uint64_t seed) {
  Rng rng(seed);
  const auto indices = sched.inference_indices();
  int64_t k = static_cast<int64_t>(std::lround(noise_fraction * (sched.T_infer - 1)));
  k = std::clamp<int64_t>(k, 0, sched.T_infer - 1);
  const int64_t n = x0.shape()[0];
  Tensor noise = Tensor::randn(x0.shape(), rng);
  Tensor x = forward_diffuse(x0, std::vector<int64_t>(n, indices[k]), noise, sched);
  return denoise_from(model, sched, x, k, rng);
}

// ---- run_pretrain ----

Dims PretrainJob::resolved_patch() const {
  if (patch_size.d > 0) return patch_size;
  return train.strategy == PretrainStrategy::diffusion ? ddunet.input_patch : encdec.input_patch;
}

std::string PretrainJob::digest() const {
  nlohmann::json j = {{"train", train.to_json()},
                      {"encdec", encdec.to_json()},
                      {"ddunet", ddunet.to_json()},
                      {"disc", disc.to_json()},
                      {"patch", {resolved_patch().d, resolved_patch().h, resolved_patch().w}}};
  return hex64(fnv1a64(j.dump()));
}

namespace {

std::vector<Volume> sample_epoch_patches(const std::vector<SubjectRecord>& subjects, Dims patch,
                                         int64_t per_subject, uint64_t seed, int64_t epoch) {
  std::vector<Volume> out;
  out.reserve(subjects.size() * per_subject);
  for (size_t si = 0; si < subjects.size(); ++si) {
    PatchSpec spec;
    spec.size = patch;
    spec.sampling = PatchSampling::random_k;
    spec.count = per_subject;
    spec.seed = seed_fanout(seed_fanout(seed, "patches", epoch), "subject", si);
    for (auto& p : extract_patches(subjects[si].volume, spec)) out.push_back(std::move(p.patch));
  }
  Rng order(seed_fanout(seed, "order", epoch));
  order.shuffle(out);
  return out;
}

LossRecord average_records(const std::vector<LossRecord>& records) {
  LossRecord avg;
  if (records.empty()) return avg;
  avg.components = records[0].components;
  for (auto& [k, v] : avg.components) v = 0;
  std::vector<int64_t> counts(avg.components.size(), 0);
  double total = 0;
  int64_t total_count = 0;
  for (const auto& r : records) {
    if (!std::isnan(r.total)) {
      total += r.total;
      ++total_count;
    }
    for (size_t i = 0; i < r.components.size(); ++i) {
      if (!std::isnan(r.components[i].second)) {
        avg.components[i].second += r.components[i].second;
        ++counts[i];
      }
    }
  }
  avg.total = total_count ? total / total_count : std::nan("");
  for (size_t i = 0; i < avg.components.size(); ++i) {
    avg.components[i].second = counts[i] ? avg.components[i].second / counts[i] : std::nan("");
  }
  return avg;
}

OptimizerState export_optimizer(const nn::Adam& opt, const std::vector<nn::ParamEntry>& params) {
  OptimizerState st;
  st.step_count = opt.step_count();
  for (const auto& p : params) {
    const auto& m = opt.first_moment(p.name);
    if (m.empty()) continue;
    st.m[p.name] = m;
    st.v[p.name] = opt.second_moment(p.name);
  }
  return st;
}

struct AuxCheckpointPaths {
  std::string primary;
  std::string aux_model;  // discriminator or projection head
  std::string final_path;
  std::string history;
};

AuxCheckpointPaths run_paths(const std::string& out_dir) {
  AuxCheckpointPaths p;
  p.primary = (fs::path(out_dir) / "checkpoint_latest.ptck").string();
  p.aux_model = (fs::path(out_dir) / "aux_latest.ptck").string();
  p.final_path = (fs::path(out_dir) / "checkpoint.ptck").string();
  p.history = (fs::path(out_dir) / "history.csv").string();
  return p;
}

}  // namespace

PretrainResult run_pretrain(const PretrainJob& job, const std::vector<SubjectRecord>& train_subjects,
                            const std::vector<SubjectRecord>& val_subjects,
                            const std::string& out_dir, bool allow_resume) {
  const PretrainConfig& cfg = job.train;
  cfg.validate();
  if (train_subjects.empty()) throw ConfigError("pretrain: empty training cohort");
  fs::create_directories(out_dir);
  const auto paths = run_paths(out_dir);
  const Dims patch = job.resolved_patch();
  const std::string job_digest = job.digest();
  const std::string provenance = "pretrain:" + to_string(cfg.strategy);

  // models + optimizers for the active strategy
  std::shared_ptr<EncoderDecoder> encdec;
  std::shared_ptr<Discriminator> disc;
  std::shared_ptr<MlpHead> proj;
  std::shared_ptr<DiffusionUNet> ddunet;
  DiffusionSchedule sched;
  Model* primary = nullptr;

  const nn::AdamConfig adam_cfg{0.9, 0.999, 1e-8, cfg.weight_decay};
  std::unique_ptr<nn::Adam> primary_opt, aux_opt;

  switch (cfg.strategy) {
    case PretrainStrategy::reconstruction:
      encdec = build_encoder_decoder(job.encdec);
      primary = encdec.get();
      break;
    case PretrainStrategy::adversarial:
      encdec = build_encoder_decoder(job.encdec);
      disc = build_discriminator(job.disc);
      primary = encdec.get();
      aux_opt = std::make_unique<nn::Adam>(&disc->params(), adam_cfg);
      break;
    case PretrainStrategy::contrastive: {
      encdec = build_encoder_decoder(job.encdec);
      MlpHeadConfig pc;
      pc.in = 4 * job.encdec.feature_size;
      pc.hidden = 4 * job.encdec.feature_size;
      pc.out = cfg.projection_dim;
      pc.seed = seed_fanout(cfg.seed, "projection");
      proj = build_mlp_head(pc);
      primary = encdec.get();
      aux_opt = std::make_unique<nn::Adam>(&proj->params(), adam_cfg);
      break;
    }
    case PretrainStrategy::diffusion:
      ddunet = build_diffusion_unet(job.ddunet);
      sched = DiffusionSchedule::scaled_linear(cfg.diffusion_train_steps, cfg.beta_start,
                                               cfg.beta_end, cfg.inference_steps);
      primary = ddunet.get();
      break;
  }
  primary_opt = std::make_unique<nn::Adam>(&primary->params(), adam_cfg);

  Model* aux_model = disc ? static_cast<Model*>(disc.get())
                          : (proj ? static_cast<Model*>(proj.get()) : nullptr);

  // resume from the latest checkpoint when the job matches
  TrainingHistory history;
  int64_t start_epoch = 0;
  bool resumed = false;
  if (allow_resume && fs::exists(paths.primary)) {
    auto loaded = load_checkpoint(paths.primary);
    if (loaded.manifest.provenance != provenance ||
        loaded.manifest.extra.value("job_digest", "") != job_digest) {
      throw ManifestError("out_dir holds a checkpoint from a different job; refusing to resume");
    }
    auto& params = primary->params();
    auto& src = loaded.model->params();
    for (size_t i = 0; i < params.size(); ++i) {
      params[i].tensor.mutable_values() = src[i].tensor.values();
    }
    if (loaded.optimizer) {
      primary_opt->restore_state(loaded.optimizer->step_count, loaded.optimizer->m,
                                 loaded.optimizer->v);
    }
    if (aux_model && fs::exists(paths.aux_model)) {
      auto aux_loaded = load_checkpoint(paths.aux_model);
      auto& ap = aux_model->params();
      auto& as = aux_loaded.model->params();
      for (size_t i = 0; i < ap.size(); ++i) ap[i].tensor.mutable_values() = as[i].tensor.values();
      if (aux_loaded.optimizer && aux_opt) {
        aux_opt->restore_state(aux_loaded.optimizer->step_count, aux_loaded.optimizer->m,
                               aux_loaded.optimizer->v);
      }
    }
    start_epoch = loaded.manifest.epoch + 1;
    resumed = true;
    if (fs::exists(paths.history)) {
      history = TrainingHistory::load_csv(paths.history);
      // drop any rows past the checkpointed epoch so resumed history stays contiguous
      std::erase_if(history.rows,
                    [&](const EpochRecord& r) { return r.epoch > loaded.manifest.epoch; });
    }
  }

  const SsimParams ssim_p = cfg.ssim_params();

  // fixed validation batch, deterministic across epochs and resumes
  Tensor val_batch;
  if (!val_subjects.empty()) {
    PatchSpec spec;
    spec.size = patch;
    spec.sampling = PatchSampling::random_k;
    spec.count = std::min<int64_t>(cfg.resolved_batch_size(), 4);
    spec.seed = seed_fanout(cfg.seed, "val");
    std::vector<Volume> vols;
    for (auto& p : extract_patches(val_subjects[0].volume, spec)) vols.push_back(std::move(p.patch));
    val_batch = volumes_to_tensor(vols);
  }

  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    auto patches =
        sample_epoch_patches(train_subjects, patch, cfg.patches_per_subject, cfg.seed, epoch);
    const int64_t bs = cfg.resolved_batch_size();

    std::vector<LossRecord> records;
    Rng aug_rng(seed_fanout(cfg.seed, "augment", epoch));
    Rng noise_rng(seed_fanout(cfg.seed, "noise", epoch));

    ResourceProfile profile = profile_epoch([&]() {
      for (size_t off = 0; off < patches.size(); off += bs) {
        const size_t end = std::min(patches.size(), off + bs);
        std::vector<Volume> chunk(patches.begin() + off, patches.begin() + end);
        switch (cfg.strategy) {
          case PretrainStrategy::reconstruction:
            records.push_back(
                step_reconstruction(*encdec, *primary_opt, volumes_to_tensor(chunk), ssim_p, lr));
            break;
          case PretrainStrategy::adversarial:
            records.push_back(step_adversarial(*encdec, *disc, *primary_opt, *aux_opt,
                                               volumes_to_tensor(chunk), epoch, cfg, lr));
            break;
          case PretrainStrategy::contrastive:
            if (chunk.size() < 2) continue;  // NT-Xent needs at least two positives
            records.push_back(
                step_contrastive(*encdec, *proj, *primary_opt, *aux_opt, chunk, cfg, aug_rng, lr));
            break;
          case PretrainStrategy::diffusion:
            records.push_back(step_diffusion(*ddunet, *primary_opt, volumes_to_tensor(chunk), sched,
                                             ssim_p, noise_rng, lr));
            break;
        }
      }
    });

    LossRecord avg = average_records(records);

    // periodic validation reconstruction metric
    double val_metric = std::nan("");
    if (val_batch.defined() && (epoch % cfg.val_interval) == 0) {
      NoGradGuard guard;
      if (cfg.strategy == PretrainStrategy::diffusion) {
        Rng vr(seed_fanout(cfg.seed, "val_noise"));
        std::vector<int64_t> ts(val_batch.shape()[0]);
        for (auto& t : ts) t = static_cast<int64_t>(vr.uniform_int(sched.T_train));
        Tensor noise = Tensor::randn(val_batch.shape(), vr);
        Tensor pred = ddunet->forward(forward_diffuse(val_batch, ts, noise, sched), ts);
        val_metric = ssim(pred, noise, ssim_p).item();
      } else {
        val_metric = ssim(encdec->forward(val_batch).recon, val_batch, ssim_p).item();
      }
    }
    avg.components.emplace_back("val_ssim", val_metric);

    EpochRecord row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss_total = avg.total;
    row.components = avg.components;
    row.sec_epoch = profile.seconds;
    row.mem_frac = profile.avg_mem_frac;
    row.power_frac = profile.power_frac;
    history.rows.push_back(std::move(row));
    history.save_csv(paths.history);

    CheckpointManifest manifest;
    manifest.seed = cfg.seed;
    manifest.epoch = epoch;
    manifest.provenance = provenance;
    manifest.extra = {{"job_digest", job_digest}};
    const OptimizerState st = export_optimizer(*primary_opt, primary->params());
    save_checkpoint(paths.primary, *primary, manifest, &st);
    if (aux_model && aux_opt) {
      const OptimizerState aux_st = export_optimizer(*aux_opt, aux_model->params());
      save_checkpoint(paths.aux_model, *aux_model, manifest, &aux_st);
    }
  }

  // final slim checkpoint (no optimizer state)
  CheckpointManifest final_manifest;
  final_manifest.seed = cfg.seed;
  final_manifest.epoch = cfg.epochs - 1;
  final_manifest.provenance = provenance;
  final_manifest.extra = {{"job_digest", job_digest}};
  save_checkpoint(paths.final_path, *primary, final_manifest, nullptr);

  PretrainResult result;
  result.checkpoint_path = paths.final_path;
  result.history = std::move(history);
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

// ---- evaluation ----

namespace {

Tensor model_embedding(Model& m, const Tensor& batch) {
  if (auto* ed = dynamic_cast<EncoderDecoder*>(&m)) return ed->encode(batch);
  if (auto* du = dynamic_cast<DiffusionUNet*>(&m)) return du->encode(batch);
  throw ConfigError("model kind " + m.kind() + " has no embedding path");
}

int64_t msssim_levels_for(Dims dims, int64_t window) {
  int64_t levels = 1;
  int64_t m = std::min({dims.d, dims.h, dims.w});
  while (levels < 3 && m / 2 >= window) {
    m /= 2;
    ++levels;
  }
  return levels;
}

std::vector<Volume> grid_patches(const Volume& v, Dims patch, std::vector<PatchOrigin>* origins) {
  PatchSpec spec;
  spec.size = patch;
  spec.sampling = PatchSampling::grid;
  std::vector<Volume> out;
  for (auto& p : extract_patches(v, spec)) {
    if (origins) origins->push_back(p.origin);
    out.push_back(std::move(p.patch));
  }
  return out;
}

}  // namespace

double reassembled_ms_ssim(const std::vector<std::vector<float>>& patch_bufs,
                           const std::vector<PatchOrigin>& origins, Dims patch,
                           const Volume& reference, int64_t window) {
  NoGradGuard guard;
  auto full = reassemble_buffers(patch_bufs, origins, patch, reference.dims);
  std::vector<double> rec_d(full.begin(), full.end());
  std::vector<double> ref_d(reference.data.begin(), reference.data.end());
  const Dims vd = reference.dims;
  Tensor rec_t = Tensor::from_data({vd.d, vd.h, vd.w}, std::move(rec_d));
  Tensor ref_t = Tensor::from_data({vd.d, vd.h, vd.w}, std::move(ref_d));
  SsimParams p;
  p.window = window;
  return ms_ssim(rec_t, ref_t, p, msssim_levels_for(vd, window)).item();
}

PretrainEvaluation evaluate_pretrained(Model& model, const std::vector<SubjectRecord>& probe_train,
                                       const std::vector<SubjectRecord>& test, Dims patch,
                                       const PretrainConfig& cfg, bool linear_probe) {
  PretrainEvaluation ev;
  if (test.empty()) return ev;
  auto* ed = dynamic_cast<EncoderDecoder*>(&model);
  auto* du = dynamic_cast<DiffusionUNet*>(&model);
  const SsimParams ssim_p = cfg.ssim_params();
  DiffusionSchedule sched;
  if (du) {
    sched = DiffusionSchedule::scaled_linear(cfg.diffusion_train_steps, cfg.beta_start,
                                             cfg.beta_end, cfg.inference_steps);
  }

  // ms-ssim of reassembled reconstructions (forward passes only)
  {
    NoGradGuard guard;
    double ms_sum = 0;
    int64_t ms_count = 0;
    for (const auto& subject : test) {
      std::vector<PatchOrigin> origins;
      auto patches = grid_patches(subject.volume, patch, &origins);
      Tensor batch = volumes_to_tensor(patches);
      Tensor recon;
      if (ed) {
        recon = ed->forward(batch).recon;
      } else if (du) {
        recon = denoise_reconstruct(*du, sched, batch, 0.25, seed_fanout(cfg.seed, "eval"));
      } else {
        break;
      }
      std::vector<std::vector<float>> bufs;
      const int64_t voxels = patch.voxels();
      for (int64_t i = 0; i < batch.shape()[0]; ++i) {
        std::vector<float> b(voxels);
        for (int64_t k = 0; k < voxels; ++k) {
          b[k] = static_cast<float>(recon.values()[i * voxels + k]);
        }
        bufs.push_back(std::move(b));
      }
      ms_sum += reassembled_ms_ssim(bufs, origins, patch, subject.volume, ssim_p.window);
      ++ms_count;
    }
    if (ms_count > 0) ev.ms_ssim = ms_sum / ms_count;
  }

  if (linear_probe && !probe_train.empty()) {
    // embeddings are extracted without a graph; the probe itself trains with one
    std::vector<double> train_flat, test_flat;
    std::vector<int64_t> train_labels, test_labels;
    int64_t dim = 0;
    {
      NoGradGuard guard;
      auto subject_embedding = [&](const SubjectRecord& s) {
        auto patches = grid_patches(s.volume, patch, nullptr);
        Tensor emb = model_embedding(model, volumes_to_tensor(patches));
        return mean(emb, {0}, false);  // (dim)
      };
      for (const auto& s : probe_train) {
        Tensor e = subject_embedding(s);
        dim = e.numel();
        train_flat.insert(train_flat.end(), e.values().begin(), e.values().end());
        train_labels.push_back(static_cast<int64_t>(s.class_label));
      }
      for (const auto& s : test) {
        Tensor e = subject_embedding(s);
        test_flat.insert(test_flat.end(), e.values().begin(), e.values().end());
        test_labels.push_back(static_cast<int64_t>(s.class_label));
      }
    }
    Tensor train_x = Tensor::from_data({static_cast<int64_t>(train_labels.size()), dim}, train_flat);
    Tensor test_x = Tensor::from_data({static_cast<int64_t>(test_labels.size()), dim}, test_flat);

    MlpHeadConfig pc;
    pc.in = dim;
    pc.hidden = 0;
    pc.out = 3;
    pc.seed = seed_fanout(cfg.seed, "probe");
    MlpHead probe(pc);
    nn::Adam opt(&probe.params(), nn::AdamConfig{});
    for (int step = 0; step < 200; ++step) {
      Tensor loss = cross_entropy_logits(probe.forward(train_x), train_labels);
      opt.zero_grad();
      loss.backward();
      opt.step(0.05);
    }
    NoGradGuard guard;
    Tensor logits = probe.forward(test_x);
    std::vector<std::array<double, 3>> rows(test_labels.size());
    for (size_t i = 0; i < test_labels.size(); ++i) {
      for (int k = 0; k < 3; ++k) rows[i][k] = logits.values()[i * 3 + k];
    }
    auto cm = classification_metrics(rows, test_labels);
    ev.cls_accuracy = cm.accuracy;
    ev.cls_macro_f1 = cm.macro_f1;
  }
  return ev;
}

}  // namespace pretune
