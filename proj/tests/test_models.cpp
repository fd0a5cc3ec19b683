#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "pretune/checkpoint.hpp"
#include "pretune/models.hpp"

using namespace pretune;
namespace fs = std::filesystem;

namespace {

EncoderDecoderConfig tiny_encdec(uint64_t seed = 0) {
  EncoderDecoderConfig cfg;
  cfg.feature_size = 4;
  cfg.input_patch = {8, 8, 8};
  cfg.depths = {2, 1, 1};
  cfg.seed = seed;
  return cfg;
}

DiffusionUNetConfig tiny_ddunet(uint64_t seed = 0) {
  DiffusionUNetConfig cfg;
  cfg.channels = {4, 4, 8};
  cfg.attention_heads = 2;
  cfg.cross_attention_dim = 4;
  cfg.residual_blocks_per_level = 1;
  cfg.input_patch = {8, 8, 8};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("models");

TEST_CASE("encoder-decoder: reconstruction preserves shape, including odd dims") {
  auto model = build_encoder_decoder(tiny_encdec());
  Rng rng(1);
  for (const Shape s : {Shape{1, 1, 8, 8, 8}, Shape{1, 1, 8, 8, 7}, Shape{2, 1, 12, 8, 10}}) {
    Tensor x = Tensor::rand_uniform(s, rng, 0, 1);
    Tensor y = model->reconstruct(x);
    CHECK(y.shape() == s);
  }
  CHECK_THROWS_AS(model->reconstruct(Tensor::zeros({1, 1, 2, 8, 8})), ShapeError);
}

TEST_CASE("encoder-decoder: deterministic init and width scaling") {
  auto a = build_encoder_decoder(tiny_encdec(5));
  auto b = build_encoder_decoder(tiny_encdec(5));
  REQUIRE(a->params().size() == b->params().size());
  for (size_t i = 0; i < a->params().size(); ++i) {
    CHECK(a->params()[i].tensor.values() == b->params()[i].tensor.values());
  }

  auto wide_cfg = tiny_encdec(5);
  wide_cfg.feature_size = 8;
  auto wide = build_encoder_decoder(wide_cfg);
  // doubling feature size at least doubles encoder parameter count
  auto count_stage = [](const Model& m, nn::Stage st) {
    int64_t n = 0;
    for (const auto& e : m.inventory().entries) {
      if (e.stage == st) n += e.count;
    }
    return n;
  };
  CHECK(count_stage(*wide, nn::Stage::encoder) >= 2 * count_stage(*a, nn::Stage::encoder));
  CHECK(wide->inventory().total_count() > a->inventory().total_count());
}

TEST_CASE("inventory: dataflow order, counts, digest stability") {
  auto model = build_encoder_decoder(tiny_encdec());
  auto inv = model->inventory();
  int64_t total = 0;
  bool seen_decoder = false;
  for (const auto& e : inv.entries) {
    total += e.count;
    if (e.stage == nn::Stage::decoder) seen_decoder = true;
    // every decoder entry appears after every encoder entry
    if (seen_decoder) CHECK(e.stage != nn::Stage::encoder);
  }
  int64_t by_params = 0;
  for (const auto& p : model->params()) by_params += p.tensor.numel();
  CHECK(total == by_params);
  CHECK(inv.digest() == model->inventory().digest());

  std::set<std::string> names;
  for (const auto& e : inv.entries) names.insert(e.name);
  CHECK(names.size() == inv.entries.size());
}

TEST_CASE("attach_heads: shapes and untouched base weights") {
  auto model = build_encoder_decoder(tiny_encdec(2));
  const std::string before = parameter_digest(model->params());
  const auto base_names = model->params().size();
  model->attach_heads(HeadConfig{}, 9);

  // base parameters bit-identical, only new entries appended
  int64_t matched = 0;
  for (const auto& p : model->params()) {
    if (p.stage != nn::Stage::head) ++matched;
  }
  CHECK(static_cast<size_t>(matched) == base_names);
  std::vector<nn::ParamEntry> base_only;
  for (const auto& p : model->params()) {
    if (p.stage != nn::Stage::head) base_only.push_back(p);
  }
  CHECK(parameter_digest(base_only) == before);

  Rng rng(3);
  Tensor x = Tensor::rand_uniform({2, 1, 8, 8, 8}, rng, 0, 1);
  auto out = model->forward_multitask(x);
  CHECK(out.seg_logits.shape() == Shape{2, 3, 8, 8, 8});
  CHECK(out.cls_logits.shape() == Shape{2, 3});

  CHECK_THROWS_AS(model->attach_heads(HeadConfig{}, 1), ConfigError);  // double attach
}

TEST_CASE("ddunet: noise prediction shape and conditioning sensitivity") {
  auto model = build_diffusion_unet(tiny_ddunet(4));
  Rng rng(5);
  Tensor x = Tensor::rand_uniform({2, 1, 8, 8, 8}, rng, -1, 1);
  std::vector<int64_t> ts{3, 17};
  Tensor eps = model->forward(x, ts);
  CHECK(eps.shape() == x.shape());

  // zeroed conditioning differs from the learned null token: cross-attention wired
  Tensor zero_ctx = Tensor::zeros({2, 4});
  Tensor eps_zero = model->forward(x, ts, zero_ctx);
  bool differs = false;
  for (int64_t i = 0; i < eps.numel(); ++i) {
    differs |= std::fabs(eps.values()[i] - eps_zero.values()[i]) > 1e-12;
  }
  CHECK(differs);

  // timesteps must be one per item and non-negative
  CHECK_THROWS_AS(model->forward(x, {1}), ShapeError);
  CHECK_THROWS_AS(model->forward(x, {-1, 2}), RangeError);

  auto again = build_diffusion_unet(tiny_ddunet(4));
  for (size_t i = 0; i < model->params().size(); ++i) {
    CHECK(model->params()[i].tensor.values() == again->params()[i].tensor.values());
  }
}

TEST_CASE("ddunet: verbatim 64-heads-on-64-channels warns but builds") {
  DiffusionUNetConfig cfg;  // the source-faithful default
  auto warnings = cfg.validate();
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("head_dim=1") != std::string::npos);

  DiffusionUNetConfig bad = tiny_ddunet();
  bad.attention_heads = 3;  // does not divide 8
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("discriminator: scalar logit per item and gradient to input") {
  DiscriminatorConfig cfg = DiscriminatorConfig::desk_profile();
  cfg.seed = 6;
  auto disc = build_discriminator(cfg);
  Rng rng(7);
  Tensor x = Tensor::rand_uniform({3, 1, 16, 16, 16}, rng, 0, 1, true);
  Tensor logits = disc->forward(x);
  CHECK(logits.shape() == Shape{3});
  sum(square(logits)).backward();
  double gnorm = 0;
  for (double g : x.grad()) gnorm += g * g;
  CHECK(gnorm > 0);

  auto again = build_discriminator(cfg);
  for (size_t i = 0; i < disc->params().size(); ++i) {
    CHECK(disc->params()[i].tensor.values() == again->params()[i].tensor.values());
  }
}

TEST_CASE("checkpoint: save/load round trip and digest refusal") {
  auto model = build_encoder_decoder(tiny_encdec(8));
  const auto dir = fs::temp_directory_path() / "pretune_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "m.ptck").string();

  CheckpointManifest manifest;
  manifest.seed = 8;
  manifest.epoch = 12;
  manifest.provenance = "pretrain:reconstruction";
  save_checkpoint(path, *model, manifest);

  auto loaded = load_checkpoint(path);
  CHECK(loaded.manifest.epoch == 12);
  CHECK(loaded.manifest.model_kind == "encoder_decoder");
  CHECK(parameter_digest(loaded.model->params()) == parameter_digest(model->params()));

  // tamper with the stored digest -> refused
  auto raw = load_checkpoint_raw(path);
  CHECK(raw.manifest.inventory_digest == model->inventory().digest());
  {
    // a model with different architecture cannot absorb this payload
    auto other = build_encoder_decoder(tiny_encdec(1));
    other->attach_heads(HeadConfig{}, 2);
    CHECK_THROWS_AS(overlay_parameters(*other, raw), ManifestError);
  }
  fs::remove_all(dir);
}

TEST_CASE("checkpoint with optimizer state round trips") {
  auto model = build_encoder_decoder(tiny_encdec(9));
  nn::Adam opt(&model->params(), nn::AdamConfig{});
  Rng rng(10);
  Tensor x = Tensor::rand_uniform({1, 1, 8, 8, 8}, rng, 0, 1);
  Tensor loss = sum(square(model->reconstruct(x)));
  opt.zero_grad();
  loss.backward();
  opt.step(1e-3);

  OptimizerState st;
  st.step_count = opt.step_count();
  for (const auto& p : model->params()) {
    if (!opt.first_moment(p.name).empty()) {
      st.m[p.name] = opt.first_moment(p.name);
      st.v[p.name] = opt.second_moment(p.name);
    }
  }
  const auto dir = fs::temp_directory_path() / "pretune_ckpt_opt";
  fs::create_directories(dir);
  const std::string path = (dir / "m.ptck").string();
  CheckpointManifest manifest;
  save_checkpoint(path, *model, manifest, &st);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.optimizer.has_value());
  CHECK(loaded.optimizer->step_count == 1);
  CHECK(loaded.optimizer->m.size() == st.m.size());
  fs::remove_all(dir);
}

TEST_CASE("mlp head: single-linear mode and factory round trip") {
  MlpHeadConfig cfg;
  cfg.in = 6;
  cfg.hidden = 0;
  cfg.out = 3;
  cfg.seed = 3;
  auto head = build_mlp_head(cfg);
  Rng rng(4);
  Tensor x = Tensor::rand_uniform({5, 6}, rng, -1, 1);
  CHECK(head->forward(x).shape() == Shape{5, 3});

  auto rebuilt = model_from_arch(head->kind(), head->arch_json());
  CHECK(rebuilt->inventory().digest() == head->inventory().digest());
}

TEST_SUITE_END();
