#include "pretune/models.hpp"

#include <cmath>
#include <iostream>
#include <map>

namespace pretune {

using nn::ParamCollector;
using nn::ParamKind;
using nn::Stage;

// ---- inventory ----

int64_t ParameterInventory::total_count() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.count;
  return n;
}

int64_t ParameterInventory::trainable_count() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.trainable ? e.count : 0;
  return n;
}

std::string ParameterInventory::digest() const {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries) {
    h = fnv1a64(e.name, h);
    h = fnv1a64(nn::to_string(e.kind), h);
    h = fnv1a64(nn::to_string(e.stage), h);
    h = fnv1a64(&e.count, sizeof(e.count), h);
  }
  return hex64(h);
}

ParameterInventory parameter_inventory(const std::vector<nn::ParamEntry>& params) {
  ParameterInventory inv;
  inv.entries.reserve(params.size());
  for (const auto& p : params) {
    inv.entries.push_back({p.name, p.kind, p.stage, p.tensor.numel(), p.trainable});
  }
  return inv;
}

// ---- config plumbing ----

void HeadConfig::validate() const {
  if (seg_labels < 2 || cls_classes < 2) throw ConfigError("head: class counts must be >= 2");
}

nlohmann::json HeadConfig::to_json() const {
  return {{"seg_labels", seg_labels}, {"cls_classes", cls_classes}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.seg_labels = j.at("seg_labels");
  c.cls_classes = j.at("cls_classes");
  return c;
}

std::array<int64_t, 3> EncoderDecoderConfig::resolved_heads() const {
  std::array<int64_t, 3> h = heads;
  if (h[0] == 0) h[0] = std::max<int64_t>(1, feature_size / 8);
  if (h[1] == 0) h[1] = std::max<int64_t>(1, feature_size / 4);
  if (h[2] == 0) h[2] = std::max<int64_t>(1, feature_size / 2);
  return h;
}

void EncoderDecoderConfig::validate() const {
  if (feature_size < 2) throw ConfigError("encoder-decoder: feature_size must be >= 2");
  if (in_channels < 1) throw ConfigError("encoder-decoder: in_channels must be >= 1");
  if (window < 1) throw ConfigError("encoder-decoder: window must be >= 1");
  for (int64_t d : depths) {
    if (d < 1) throw ConfigError("encoder-decoder: stage depths must be >= 1");
  }
  // total downsampling factor is 4 (two stride-2 merges); smaller inputs are
  // a patch/downsampling incompatibility. Inputs not divisible by 4 are
  // padded internally and cropped back (the 64x64x63 default relies on it).
  if (input_patch.d < 4 || input_patch.h < 4 || input_patch.w < 4) {
    throw ConfigError("encoder-decoder: input_patch incompatible with downsampling factor 4");
  }
  const auto h = resolved_heads();
  const int64_t ch[3] = {feature_size, 2 * feature_size, 4 * feature_size};
  for (int i = 0; i < 3; ++i) {
    if (ch[i] % h[i] != 0) {
      throw ConfigError("encoder-decoder: heads must divide stage channels (stage " +
                        std::to_string(i + 1) + ")");
    }
  }
  if (mlp_ratio <= 0) throw ConfigError("encoder-decoder: mlp_ratio must be positive");
}

nlohmann::json EncoderDecoderConfig::to_json() const {
  return {{"feature_size", feature_size},
          {"input_patch", {input_patch.d, input_patch.h, input_patch.w}},
          {"in_channels", in_channels},
          {"window", window},
          {"depths", depths},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"seed", seed}};
}

EncoderDecoderConfig EncoderDecoderConfig::from_json(const nlohmann::json& j) {
  EncoderDecoderConfig c;
  c.feature_size = j.at("feature_size");
  const auto& p = j.at("input_patch");
  c.input_patch = {p.at(0), p.at(1), p.at(2)};
  c.in_channels = j.at("in_channels");
  c.window = j.at("window");
  for (int i = 0; i < 3; ++i) {
    c.depths[i] = j.at("depths").at(i);
    c.heads[i] = j.at("heads").at(i);
  }
  c.mlp_ratio = j.at("mlp_ratio");
  c.seed = j.at("seed");
  return c;
}

EncoderDecoderConfig EncoderDecoderConfig::desk_profile() {
  EncoderDecoderConfig c;
  c.feature_size = 6;
  c.input_patch = {16, 16, 16};
  return c;
}

std::vector<std::string> DiffusionUNetConfig::validate() const {
  std::vector<std::string> warnings;
  if (levels < 2) throw ConfigError("ddunet: levels must be >= 2");
  if (static_cast<int64_t>(channels.size()) != levels ||
      static_cast<int64_t>(attention_levels.size()) != levels) {
    throw ConfigError("ddunet: channels/attention_levels must have one entry per level");
  }
  for (int64_t c : channels) {
    if (c < 2) throw ConfigError("ddunet: channels must be >= 2");
  }
  if (channels[0] % 2 != 0) throw ConfigError("ddunet: first level channels must be even");
  if (attention_heads < 1) throw ConfigError("ddunet: attention_heads must be >= 1");
  if (residual_blocks_per_level < 1) throw ConfigError("ddunet: need >= 1 residual block");
  if (cross_attention_dim < 1) throw ConfigError("ddunet: cross_attention_dim must be >= 1");
  const int64_t factor = int64_t{1} << (levels - 1);
  if (input_patch.d < factor || input_patch.h < factor || input_patch.w < factor) {
    throw ConfigError("ddunet: input_patch incompatible with downsampling factor");
  }
  for (int64_t i = 0; i < levels; ++i) {
    if (!attention_levels[i]) continue;
    if (channels[i] % attention_heads != 0) {
      throw ConfigError("ddunet: heads must divide channels on attended level " +
                        std::to_string(i + 1));
    }
    if (channels[i] / attention_heads == 1) {
      warnings.push_back("ddunet: " + std::to_string(attention_heads) + " heads on " +
                         std::to_string(channels[i]) +
                         " channels leaves head_dim=1; override attention_heads to change");
    }
  }
  return warnings;
}

nlohmann::json DiffusionUNetConfig::to_json() const {
  return {{"levels", levels},
          {"channels", channels},
          {"attention_levels", attention_levels},
          {"attention_heads", attention_heads},
          {"residual_blocks_per_level", residual_blocks_per_level},
          {"cross_attention_dim", cross_attention_dim},
          {"input_patch", {input_patch.d, input_patch.h, input_patch.w}},
          {"in_channels", in_channels},
          {"seed", seed}};
}

DiffusionUNetConfig DiffusionUNetConfig::from_json(const nlohmann::json& j) {
  DiffusionUNetConfig c;
  c.levels = j.at("levels");
  c.channels = j.at("channels").get<std::vector<int64_t>>();
  c.attention_levels = j.at("attention_levels").get<std::vector<bool>>();
  c.attention_heads = j.at("attention_heads");
  c.residual_blocks_per_level = j.at("residual_blocks_per_level");
  c.cross_attention_dim = j.at("cross_attention_dim");
  const auto& p = j.at("input_patch");
  c.input_patch = {p.at(0), p.at(1), p.at(2)};
  c.in_channels = j.at("in_channels");
  c.seed = j.at("seed");
  return c;
}

DiffusionUNetConfig DiffusionUNetConfig::desk_profile() {
  DiffusionUNetConfig c;
  c.channels = {8, 8, 16};
  c.attention_heads = 4;
  c.cross_attention_dim = 8;
  c.input_patch = {16, 16, 16};
  return c;
}

void DiscriminatorConfig::validate() const {
  if (base_width < 2) throw ConfigError("discriminator: base_width must be >= 2");
  if (blocks < 1 || blocks > 8) throw ConfigError("discriminator: blocks must be in [1,8]");
  if (in_channels < 1) throw ConfigError("discriminator: in_channels must be >= 1");
}

nlohmann::json DiscriminatorConfig::to_json() const {
  return {{"base_width", base_width}, {"blocks", blocks}, {"in_channels", in_channels}, {"seed", seed}};
}

DiscriminatorConfig DiscriminatorConfig::from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  c.base_width = j.at("base_width");
  c.blocks = j.at("blocks");
  c.in_channels = j.at("in_channels");
  c.seed = j.at("seed");
  return c;
}

DiscriminatorConfig DiscriminatorConfig::desk_profile() {
  DiscriminatorConfig c;
  c.base_width = 6;
  c.blocks = 3;
  return c;
}

// ---- Model defaults ----

Tensor Model::reconstruct(const Tensor&) const {
  throw ConfigError(kind() + " has no reconstruction path");
}

MultiTaskOutput Model::forward_multitask(const Tensor&) const {
  throw ConfigError(kind() + " has no task heads attached");
}

void Model::attach_heads(const HeadConfig&, uint64_t) {
  throw ConfigError(kind() + " does not support task heads");
}

// ---- shared spatial helpers ----

namespace {

int64_t ceil_to(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

// pad (N,C,D,H,W) on the high side so every spatial dim is a multiple of m
Tensor pad_to_multiple(const Tensor& x, int64_t m) {
  const auto& s = x.shape();
  const std::array<int64_t, 3> hi{ceil_to(s[2], m) - s[2], ceil_to(s[3], m) - s[3],
                                  ceil_to(s[4], m) - s[4]};
  if (hi[0] == 0 && hi[1] == 0 && hi[2] == 0) return x;
  return pad3d(x, {0, 0, 0}, hi);
}

// (N,C,D,H,W) -> (N*nW, T, C) window tokens, windows ordered (z,y,x) within batch
Tensor window_partition(const Tensor& x, int64_t e) {
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1], dz = s[2] / e, hy = s[3] / e, wx = s[4] / e;
  Tensor r = reshape(x, {n, c, dz, e, hy, e, wx, e});
  r = permute(r, {0, 2, 4, 6, 3, 5, 7, 1});  // (N,dz,hy,wx,e,e,e,C)
  return reshape(r, {n * dz * hy * wx, e * e * e, c});
}

Tensor window_unpartition(const Tensor& t, int64_t e, int64_t n, int64_t c, int64_t d, int64_t h,
                          int64_t w) {
  const int64_t dz = d / e, hy = h / e, wx = w / e;
  Tensor r = reshape(t, {n, dz, hy, wx, e, e, e, c});
  r = permute(r, {0, 7, 1, 4, 2, 5, 3, 6});  // (N,C,dz,e,hy,e,wx,e)
  return reshape(r, {n, c, d, h, w});
}

// (N,C,D,H,W) <-> (N, D*H*W, C) full-volume tokens
Tensor to_tokens(const Tensor& x) {
  const auto& s = x.shape();
  return permute(reshape(x, {s[0], s[1], s[2] * s[3] * s[4]}), {0, 2, 1});
}

Tensor from_tokens(const Tensor& t, const Shape& like) {
  return reshape(permute(t, {0, 2, 1}), like);
}

// Swin shifted-window attention mask: 0 within same region, -1e9 across.
Tensor make_shift_mask(int64_t d, int64_t h, int64_t w, int64_t e,
                       const std::array<int64_t, 3>& shift) {
  auto zone = [e](int64_t pos, int64_t dim, int64_t s) -> int {
    if (s == 0) return 0;
    if (pos < dim - e) return 0;
    if (pos < dim - s) return 1;
    return 2;
  };
  const int64_t dz = d / e, hy = h / e, wx = w / e;
  const int64_t n_w = dz * hy * wx, t = e * e * e;
  std::vector<int> ids(static_cast<size_t>(n_w * t));
  int64_t wi = 0;
  for (int64_t bz = 0; bz < dz; ++bz) {
    for (int64_t by = 0; by < hy; ++by) {
      for (int64_t bx = 0; bx < wx; ++bx, ++wi) {
        int64_t ti = 0;
        for (int64_t tz = 0; tz < e; ++tz) {
          for (int64_t ty = 0; ty < e; ++ty) {
            for (int64_t tx = 0; tx < e; ++tx, ++ti) {
              const int id = zone(bz * e + tz, d, shift[0]) * 9 +
                             zone(by * e + ty, h, shift[1]) * 3 + zone(bx * e + tx, w, shift[2]);
              ids[wi * t + ti] = id;
            }
          }
        }
      }
    }
  }
  std::vector<double> mask(static_cast<size_t>(n_w * t * t), 0.0);
  for (int64_t widx = 0; widx < n_w; ++widx) {
    const int* row = ids.data() + widx * t;
    double* m = mask.data() + widx * t * t;
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t j = 0; j < t; ++j) {
        if (row[i] != row[j]) m[i * t + j] = -1e9;
      }
    }
  }
  return Tensor::from_data({n_w, t, t}, std::move(mask));
}

Tensor spatial_mean(const Tensor& x) {  // (N,C,D,H,W) -> (N,C)
  return mean(x, {2, 3, 4}, false);
}

}  // namespace

// ---- EncoderDecoder ----

Tensor EncoderDecoder::SwinBlock::forward(const Tensor& x) const {
  const auto& s = x.shape();
  const int64_t n = s[0], c = s[1];
  const int64_t e = std::min({window, s[2], s[3], s[4]});
  Tensor xp = pad_to_multiple(x, e);
  const auto& sp = xp.shape();
  const int64_t d = sp[2], h = sp[3], w = sp[4];

  // shift only along axes with more than one window
  std::array<int64_t, 3> shift{0, 0, 0};
  if (shifted && e >= 2) {
    if (d > e) shift[0] = e / 2;
    if (h > e) shift[1] = e / 2;
    if (w > e) shift[2] = e / 2;
  }
  const bool do_shift = shift[0] || shift[1] || shift[2];
  if (do_shift) xp = roll3d(xp, {-shift[0], -shift[1], -shift[2]});

  Tensor tokens = window_partition(xp, e);
  Tensor mask = do_shift ? make_shift_mask(d, h, w, e, shift) : Tensor();
  tokens = add(tokens, attn.forward(ln1.forward(tokens), mask));
  tokens = add(tokens, mlp.forward(ln2.forward(tokens)));
  Tensor out = window_unpartition(tokens, e, n, c, d, h, w);
  if (do_shift) out = roll3d(out, {shift[0], shift[1], shift[2]});
  if (d != s[2] || h != s[3] || w != s[4]) out = crop3d(out, {0, 0, 0}, {s[2], s[3], s[4]});
  return out;
}

void EncoderDecoder::SwinBlock::collect(ParamCollector& c, const std::string& name) const {
  nn::ParamScope scope(c, name);
  ln1.collect(c, "ln1");
  attn.collect(c, "attn");
  ln2.collect(c, "ln2");
  mlp.collect(c, "mlp");
}

Tensor EncoderDecoder::ConvBlock::forward(const Tensor& x) const {
  Tensor h = silu(norm1.forward(conv1.forward(x)));
  return silu(norm2.forward(conv2.forward(h)));
}

void EncoderDecoder::ConvBlock::collect(ParamCollector& c, const std::string& name) const {
  nn::ParamScope scope(c, name);
  conv1.collect(c, "conv1");
  norm1.collect(c, "norm1");
  conv2.collect(c, "conv2");
  norm2.collect(c, "norm2");
}

EncoderDecoder::EncoderDecoder(const EncoderDecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed_fanout(cfg.seed, "encoder_decoder"));
  const int64_t f = cfg.feature_size;
  const auto heads = cfg.resolved_heads();

  auto make_stage = [&](int64_t channels, int64_t depth, int64_t n_heads) {
    std::vector<SwinBlock> blocks;
    for (int64_t i = 0; i < depth; ++i) {
      SwinBlock b;
      b.ln1 = nn::LayerNorm::create(channels);
      b.attn = nn::MultiHeadSelfAttention::create(channels, n_heads, rng);
      b.ln2 = nn::LayerNorm::create(channels);
      b.mlp = nn::Mlp::create(
          channels, std::max<int64_t>(1, static_cast<int64_t>(channels * cfg.mlp_ratio)), rng);
      b.window = cfg.window;
      b.shifted = (i % 2 == 1);
      blocks.push_back(std::move(b));
    }
    return blocks;
  };

  stem_ = nn::Conv3dLayer::create(cfg.in_channels, f, 3, 1, 1, rng);
  stage1_ = make_stage(f, cfg.depths[0], heads[0]);
  down1_ = nn::Conv3dLayer::create(f, 2 * f, 2, 2, 0, rng);
  stage2_ = make_stage(2 * f, cfg.depths[1], heads[1]);
  down2_ = nn::Conv3dLayer::create(2 * f, 4 * f, 2, 2, 0, rng);
  bottleneck_ = make_stage(4 * f, cfg.depths[2], heads[2]);

  up2_ = nn::Conv3dLayer::create(4 * f, 2 * f, 3, 1, 1, rng);
  fuse2_.conv1 = nn::Conv3dLayer::create(4 * f, 2 * f, 3, 1, 1, rng);
  fuse2_.norm1 = nn::InstanceNorm3d::create(2 * f);
  fuse2_.conv2 = nn::Conv3dLayer::create(2 * f, 2 * f, 3, 1, 1, rng);
  fuse2_.norm2 = nn::InstanceNorm3d::create(2 * f);
  up1_ = nn::Conv3dLayer::create(2 * f, f, 3, 1, 1, rng);
  fuse1_.conv1 = nn::Conv3dLayer::create(2 * f, f, 3, 1, 1, rng);
  fuse1_.norm1 = nn::InstanceNorm3d::create(f);
  fuse1_.conv2 = nn::Conv3dLayer::create(f, f, 3, 1, 1, rng);
  fuse1_.norm2 = nn::InstanceNorm3d::create(f);
  recon_ = nn::Conv3dLayer::create(f, cfg.in_channels, 1, 1, 0, rng);

  rebuild_params();
}

void EncoderDecoder::rebuild_params() {
  ParamCollector c;
  c.set_stage(Stage::encoder);
  stem_.collect(c, "stem");
  for (size_t i = 0; i < stage1_.size(); ++i) {
    stage1_[i].collect(c, "stage1.block" + std::to_string(i));
  }
  down1_.collect(c, "down1");
  for (size_t i = 0; i < stage2_.size(); ++i) {
    stage2_[i].collect(c, "stage2.block" + std::to_string(i));
  }
  down2_.collect(c, "down2");
  c.set_stage(Stage::bottleneck);
  for (size_t i = 0; i < bottleneck_.size(); ++i) {
    bottleneck_[i].collect(c, "bottleneck.block" + std::to_string(i));
  }
  c.set_stage(Stage::decoder);
  up2_.collect(c, "up2");
  fuse2_.collect(c, "fuse2");
  up1_.collect(c, "up1");
  fuse1_.collect(c, "fuse1");
  recon_.collect(c, "recon");
  if (heads_) {
    c.set_stage(Stage::head);
    heads_->seg1.collect(c, "head.seg1");
    heads_->seg2.collect(c, "head.seg2");
    heads_->cls.collect(c, "head.cls");
  }
  // preserve trainable flags across rebuilds
  std::map<std::string, bool> flags;
  for (const auto& p : params_) flags[p.name] = p.trainable;
  params_ = c.take();
  for (auto& p : params_) {
    auto it = flags.find(p.name);
    if (it != flags.end()) p.trainable = it->second;
  }
}

EncoderDecoder::Output EncoderDecoder::forward(const Tensor& x) const {
  if (x.dim() != 5 || x.shape()[1] != cfg_.in_channels) {
    throw ShapeError("encoder_decoder: expected (N," + std::to_string(cfg_.in_channels) +
                     ",D,H,W), got " + shape_str(x.shape()));
  }
  const auto s = x.shape();
  if (s[2] < 4 || s[3] < 4 || s[4] < 4) {
    throw ShapeError("encoder_decoder: input smaller than downsampling factor");
  }
  Tensor xp = pad_to_multiple(x, 4);

  Tensor h = stem_.forward(xp);
  for (const auto& b : stage1_) h = b.forward(h);
  Tensor skip1 = h;
  h = down1_.forward(h);
  for (const auto& b : stage2_) h = b.forward(h);
  Tensor skip2 = h;
  h = down2_.forward(h);
  for (const auto& b : bottleneck_) h = b.forward(h);
  Tensor bottleneck = h;

  Tensor u = up2_.forward(upsample_nearest2x(h));
  u = fuse2_.forward(concat({u, skip2}, 1));
  u = up1_.forward(upsample_nearest2x(u));
  u = fuse1_.forward(concat({u, skip1}, 1));

  Output out;
  Tensor features = u;
  Tensor recon = recon_.forward(u);
  if (!(xp.shape() == s)) {
    const std::array<int64_t, 3> size{s[2], s[3], s[4]};
    features = crop3d(features, {0, 0, 0}, size);
    recon = crop3d(recon, {0, 0, 0}, size);
  }
  out.recon = recon;
  out.features = features;
  out.bottleneck = bottleneck;
  return out;
}

Tensor EncoderDecoder::reconstruct(const Tensor& x) const { return forward(x).recon; }

Tensor EncoderDecoder::encode(const Tensor& x) const { return spatial_mean(forward(x).bottleneck); }

MultiTaskOutput EncoderDecoder::forward_multitask(const Tensor& x) const {
  if (!heads_) throw ConfigError("encoder_decoder: no task heads attached");
  Output base = forward(x);
  MultiTaskOutput out;
  out.seg_logits = heads_->seg2.forward(silu(heads_->seg1.forward(base.features)));
  out.cls_logits = heads_->cls.forward(spatial_mean(base.bottleneck));
  return out;
}

void EncoderDecoder::attach_heads(const HeadConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (heads_) throw ConfigError("encoder_decoder: heads already attached");
  Rng rng(seed_fanout(seed, "heads"));
  Heads h;
  h.cfg = cfg;
  const int64_t f = cfg_.feature_size;
  h.seg1 = nn::Conv3dLayer::create(f, f, 3, 1, 1, rng);
  h.seg2 = nn::Conv3dLayer::create(f, cfg.seg_labels, 1, 1, 0, rng);
  h.cls = nn::Linear::create(4 * f, cfg.cls_classes, rng);
  heads_ = std::move(h);
  rebuild_params();
}

std::vector<std::pair<std::string, nn::Linear*>> EncoderDecoder::linear_layers() {
  std::vector<std::pair<std::string, nn::Linear*>> out;
  auto add_stage = [&](std::vector<SwinBlock>& blocks, const std::string& prefix) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string base = prefix + ".block" + std::to_string(i);
      out.emplace_back(base + ".attn.qkv", &blocks[i].attn.qkv);
      out.emplace_back(base + ".attn.proj", &blocks[i].attn.proj);
      out.emplace_back(base + ".mlp.fc1", &blocks[i].mlp.fc1);
      out.emplace_back(base + ".mlp.fc2", &blocks[i].mlp.fc2);
    }
  };
  add_stage(stage1_, "stage1");
  add_stage(stage2_, "stage2");
  add_stage(bottleneck_, "bottleneck");
  return out;
}

nlohmann::json EncoderDecoder::arch_json() const {
  nlohmann::json j = {{"config", cfg_.to_json()}};
  if (heads_) j["heads"] = heads_->cfg.to_json();
  return j;
}

// ---- DiffusionUNet ----

namespace {

int64_t norm_groups_for(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Tensor sinusoidal_embedding(const std::vector<int64_t>& timesteps, int64_t dim) {
  const auto n = static_cast<int64_t>(timesteps.size());
  const int64_t half = dim / 2;
  std::vector<double> data(static_cast<size_t>(n * dim));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < half; ++k) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      data[i * dim + k] = std::sin(static_cast<double>(timesteps[i]) * freq);
      data[i * dim + half + k] = std::cos(static_cast<double>(timesteps[i]) * freq);
    }
  }
  return Tensor::from_data({n, dim}, std::move(data));
}

}  // namespace

Tensor DiffusionUNet::ResBlock::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1.forward(silu(gn1.forward(x)));
  const int64_t ch = h.shape()[1];
  Tensor t = temb_proj.forward(silu(temb));  // (N, C)
  h = add(h, reshape(t, {t.shape()[0], ch, 1, 1, 1}));
  h = conv2.forward(silu(gn2.forward(h)));
  return add(h, skip ? skip->forward(x) : x);
}

void DiffusionUNet::ResBlock::collect(ParamCollector& c, const std::string& name) const {
  nn::ParamScope scope(c, name);
  gn1.collect(c, "gn1");
  conv1.collect(c, "conv1");
  temb_proj.collect(c, "temb_proj");
  gn2.collect(c, "gn2");
  conv2.collect(c, "conv2");
  if (skip) skip->collect(c, "skip");
}

Tensor DiffusionUNet::AttnBlock::forward(const Tensor& x, const Tensor& context) const {
  Tensor t = to_tokens(norm_self.forward(x));
  Tensor h = add(x, from_tokens(self_attn.forward(t), x.shape()));
  Tensor u = to_tokens(norm_cross.forward(h));
  return add(h, from_tokens(cross_attn.forward(u, context), x.shape()));
}

void DiffusionUNet::AttnBlock::collect(ParamCollector& c, const std::string& name) const {
  nn::ParamScope scope(c, name);
  norm_self.collect(c, "norm_self");
  self_attn.collect(c, "self_attn");
  norm_cross.collect(c, "norm_cross");
  cross_attn.collect(c, "cross_attn");
}

DiffusionUNet::DiffusionUNet(const DiffusionUNetConfig& cfg) : cfg_(cfg) {
  warnings_ = cfg_.validate();
  for (const auto& w : warnings_) std::cerr << "[pretune] warning: " << w << "\n";

  Rng rng(seed_fanout(cfg.seed, "ddunet"));
  const int64_t c0 = cfg.channels[0];
  const int64_t temb_dim = 4 * c0;

  time_fc1_ = nn::Linear::create(c0, temb_dim, rng);
  time_fc2_ = nn::Linear::create(temb_dim, temb_dim, rng);
  null_token_ = Tensor::randn({1, 1, cfg.cross_attention_dim}, rng, 0.02, true);
  stem_ = nn::Conv3dLayer::create(cfg.in_channels, c0, 3, 1, 1, rng);

  auto make_resblock = [&](int64_t cin, int64_t cout) {
    ResBlock b;
    b.gn1 = nn::GroupNorm3d::create(cin, norm_groups_for(cin));
    b.conv1 = nn::Conv3dLayer::create(cin, cout, 3, 1, 1, rng);
    b.temb_proj = nn::Linear::create(temb_dim, cout, rng);
    b.gn2 = nn::GroupNorm3d::create(cout, norm_groups_for(cout));
    b.conv2 = nn::Conv3dLayer::create(cout, cout, 3, 1, 1, rng);
    if (cin != cout) b.skip = nn::Conv3dLayer::create(cin, cout, 1, 1, 0, rng);
    return b;
  };
  auto make_attn = [&](int64_t ch) {
    AttnBlock a;
    a.norm_self = nn::GroupNorm3d::create(ch, norm_groups_for(ch));
    a.self_attn = nn::MultiHeadSelfAttention::create(ch, cfg.attention_heads, rng);
    a.norm_cross = nn::GroupNorm3d::create(ch, norm_groups_for(ch));
    a.cross_attn =
        nn::CrossAttention::create(ch, cfg.cross_attention_dim, cfg.attention_heads, rng);
    return a;
  };

  int64_t ch = c0;
  for (int64_t i = 0; i < cfg.levels; ++i) {
    Level lvl;
    for (int64_t b = 0; b < cfg.residual_blocks_per_level; ++b) {
      lvl.blocks.push_back(make_resblock(ch, cfg.channels[i]));
      ch = cfg.channels[i];
    }
    if (cfg.attention_levels[i]) lvl.attn = make_attn(ch);
    if (i + 1 < cfg.levels) {
      lvl.down = nn::Conv3dLayer::create(ch, cfg.channels[i + 1], 2, 2, 0, rng);
      ch = cfg.channels[i + 1];
    }
    down_.push_back(std::move(lvl));
  }

  const int64_t cd = cfg.channels[cfg.levels - 1];
  mid1_ = make_resblock(cd, cd);
  if (cfg.attention_levels[cfg.levels - 1]) mid_attn_ = make_attn(cd);
  mid2_ = make_resblock(cd, cd);

  // up path, deepest level first
  ch = cd;
  for (int64_t i = cfg.levels - 1; i >= 0; --i) {
    UpLevel lvl;
    int64_t cin = ch + cfg.channels[i];  // concat with the level skip
    for (int64_t b = 0; b < cfg.residual_blocks_per_level; ++b) {
      lvl.blocks.push_back(make_resblock(cin, cfg.channels[i]));
      cin = cfg.channels[i];
    }
    if (cfg.attention_levels[i]) lvl.attn = make_attn(cfg.channels[i]);
    if (i > 0) {
      lvl.up_conv = nn::Conv3dLayer::create(cfg.channels[i], cfg.channels[i - 1], 3, 1, 1, rng);
      ch = cfg.channels[i - 1];
    }
    up_.push_back(std::move(lvl));
  }

  out_norm_ = nn::GroupNorm3d::create(c0, norm_groups_for(c0));
  out_conv_ = nn::Conv3dLayer::create(c0, cfg.in_channels, 3, 1, 1, rng);

  rebuild_params();
}

void DiffusionUNet::rebuild_params() {
  ParamCollector c;
  c.set_stage(Stage::encoder);
  time_fc1_.collect(c, "time.fc1");
  time_fc2_.collect(c, "time.fc2");
  c.add("null_token", null_token_, ParamKind::embedding);
  stem_.collect(c, "stem");
  for (size_t i = 0; i < down_.size(); ++i) {
    const std::string base = "down" + std::to_string(i);
    for (size_t b = 0; b < down_[i].blocks.size(); ++b) {
      down_[i].blocks[b].collect(c, base + ".block" + std::to_string(b));
    }
    if (down_[i].attn) down_[i].attn->collect(c, base + ".attn");
    if (down_[i].down) down_[i].down->collect(c, base + ".downsample");
  }
  c.set_stage(Stage::bottleneck);
  mid1_.collect(c, "mid.block0");
  if (mid_attn_) mid_attn_->collect(c, "mid.attn");
  mid2_.collect(c, "mid.block1");
  c.set_stage(Stage::decoder);
  for (size_t i = 0; i < up_.size(); ++i) {
    const std::string base = "up" + std::to_string(i);
    for (size_t b = 0; b < up_[i].blocks.size(); ++b) {
      up_[i].blocks[b].collect(c, base + ".block" + std::to_string(b));
    }
    if (up_[i].attn) up_[i].attn->collect(c, base + ".attn");
    if (up_[i].up_conv) up_[i].up_conv->collect(c, base + ".upsample");
  }
  out_norm_.collect(c, "out.norm");
  out_conv_.collect(c, "out.conv");
  if (heads_) {
    c.set_stage(Stage::head);
    heads_->seg1.collect(c, "head.seg1");
    heads_->seg2.collect(c, "head.seg2");
    heads_->cls.collect(c, "head.cls");
  }
  std::map<std::string, bool> flags;
  for (const auto& p : params_) flags[p.name] = p.trainable;
  params_ = c.take();
  for (auto& p : params_) {
    auto it = flags.find(p.name);
    if (it != flags.end()) p.trainable = it->second;
  }
}

DiffusionUNet::FeatureOutput DiffusionUNet::forward_features(const Tensor& x,
                                                             const std::vector<int64_t>& timesteps,
                                                             const Tensor& conditioning) const {
  if (x.dim() != 5 || x.shape()[1] != cfg_.in_channels) {
    throw ShapeError("ddunet: expected (N," + std::to_string(cfg_.in_channels) + ",D,H,W)");
  }
  const int64_t n = x.shape()[0];
  if (static_cast<int64_t>(timesteps.size()) != n) {
    throw ShapeError("ddunet: one timestep per batch item required");
  }
  for (int64_t t : timesteps) {
    if (t < 0) throw RangeError("ddunet: negative timestep");
  }
  const int64_t factor = int64_t{1} << (cfg_.levels - 1);
  const auto& s = x.shape();
  if (s[2] % factor || s[3] % factor || s[4] % factor) {
    throw ShapeError("ddunet: input dims must be divisible by " + std::to_string(factor));
  }

  Tensor temb = time_fc2_.forward(
      silu(time_fc1_.forward(sinusoidal_embedding(timesteps, cfg_.channels[0]))));
  Tensor ctx;
  if (conditioning.defined()) {
    if (conditioning.dim() != 2 || conditioning.shape()[0] != n ||
        conditioning.shape()[1] != cfg_.cross_attention_dim) {
      throw ShapeError("ddunet: conditioning must be (N, cross_attention_dim)");
    }
    ctx = reshape(conditioning, {n, 1, cfg_.cross_attention_dim});
  } else {
    ctx = add(null_token_, Tensor::zeros({n, 1, cfg_.cross_attention_dim}));
  }

  Tensor h = stem_.forward(x);
  std::vector<Tensor> skips;
  for (const auto& lvl : down_) {
    for (const auto& b : lvl.blocks) h = b.forward(h, temb);
    if (lvl.attn) h = lvl.attn->forward(h, ctx);
    skips.push_back(h);
    if (lvl.down) h = lvl.down->forward(h);
  }

  h = mid1_.forward(h, temb);
  if (mid_attn_) h = mid_attn_->forward(h, ctx);
  h = mid2_.forward(h, temb);
  Tensor mid = h;

  for (size_t i = 0; i < up_.size(); ++i) {
    h = concat({h, skips[skips.size() - 1 - i]}, 1);
    for (const auto& b : up_[i].blocks) h = b.forward(h, temb);
    if (up_[i].attn) h = up_[i].attn->forward(h, ctx);
    if (up_[i].up_conv) h = up_[i].up_conv->forward(upsample_nearest2x(h));
  }

  return {h, mid};
}

Tensor DiffusionUNet::forward(const Tensor& x, const std::vector<int64_t>& timesteps,
                              const Tensor& conditioning) const {
  auto f = forward_features(x, timesteps, conditioning);
  return out_conv_.forward(silu(out_norm_.forward(f.features)));
}

MultiTaskOutput DiffusionUNet::forward_multitask(const Tensor& x) const {
  if (!heads_) throw ConfigError("ddunet: no task heads attached");
  const std::vector<int64_t> t0(x.shape()[0], 0);
  auto f = forward_features(x, t0, Tensor());
  MultiTaskOutput out;
  out.seg_logits = heads_->seg2.forward(silu(heads_->seg1.forward(f.features)));
  out.cls_logits = heads_->cls.forward(spatial_mean(f.mid));
  return out;
}

Tensor DiffusionUNet::encode(const Tensor& x) const {
  const std::vector<int64_t> t0(x.shape()[0], 0);
  return spatial_mean(forward_features(x, t0, Tensor()).mid);
}

void DiffusionUNet::attach_heads(const HeadConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (heads_) throw ConfigError("ddunet: heads already attached");
  Rng rng(seed_fanout(seed, "heads"));
  Heads h;
  h.cfg = cfg;
  const int64_t c0 = cfg_.channels[0];
  h.seg1 = nn::Conv3dLayer::create(c0, c0, 3, 1, 1, rng);
  h.seg2 = nn::Conv3dLayer::create(c0, cfg.seg_labels, 1, 1, 0, rng);
  h.cls = nn::Linear::create(cfg_.channels[cfg_.levels - 1], cfg.cls_classes, rng);
  heads_ = std::move(h);
  rebuild_params();
}

std::vector<std::pair<std::string, nn::Linear*>> DiffusionUNet::linear_layers() {
  std::vector<std::pair<std::string, nn::Linear*>> out;
  out.emplace_back("time.fc1", &time_fc1_);
  out.emplace_back("time.fc2", &time_fc2_);
  auto add_res = [&](ResBlock& b, const std::string& base) {
    out.emplace_back(base + ".temb_proj", &b.temb_proj);
  };
  auto add_attn = [&](AttnBlock& a, const std::string& base) {
    out.emplace_back(base + ".self_attn.qkv", &a.self_attn.qkv);
    out.emplace_back(base + ".self_attn.proj", &a.self_attn.proj);
    out.emplace_back(base + ".cross_attn.to_q", &a.cross_attn.to_q);
    out.emplace_back(base + ".cross_attn.to_k", &a.cross_attn.to_k);
    out.emplace_back(base + ".cross_attn.to_v", &a.cross_attn.to_v);
    out.emplace_back(base + ".cross_attn.proj", &a.cross_attn.proj);
  };
  for (size_t i = 0; i < down_.size(); ++i) {
    const std::string base = "down" + std::to_string(i);
    for (size_t b = 0; b < down_[i].blocks.size(); ++b) {
      add_res(down_[i].blocks[b], base + ".block" + std::to_string(b));
    }
    if (down_[i].attn) add_attn(*down_[i].attn, base + ".attn");
  }
  add_res(mid1_, "mid.block0");
  if (mid_attn_) add_attn(*mid_attn_, "mid.attn");
  add_res(mid2_, "mid.block1");
  for (size_t i = 0; i < up_.size(); ++i) {
    const std::string base = "up" + std::to_string(i);
    for (size_t b = 0; b < up_[i].blocks.size(); ++b) {
      add_res(up_[i].blocks[b], base + ".block" + std::to_string(b));
    }
    if (up_[i].attn) add_attn(*up_[i].attn, base + ".attn");
  }
  return out;
}

nlohmann::json DiffusionUNet::arch_json() const {
  nlohmann::json j = {{"config", cfg_.to_json()}};
  if (heads_) j["heads"] = heads_->cfg.to_json();
  return j;
}

// ---- MlpHead ----

void MlpHeadConfig::validate() const {
  if (in < 1 || out < 1 || hidden < 0) throw ConfigError("mlp_head: bad layer sizes");
}

nlohmann::json MlpHeadConfig::to_json() const {
  return {{"in", in}, {"hidden", hidden}, {"out", out}, {"seed", seed}};
}

MlpHeadConfig MlpHeadConfig::from_json(const nlohmann::json& j) {
  MlpHeadConfig c;
  c.in = j.at("in");
  c.hidden = j.at("hidden");
  c.out = j.at("out");
  c.seed = j.at("seed");
  return c;
}

MlpHead::MlpHead(const MlpHeadConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed_fanout(cfg.seed, "mlp_head"));
  if (cfg.hidden > 0) {
    fc1_ = nn::Linear::create(cfg.in, cfg.hidden, rng);
    fc2_ = nn::Linear::create(cfg.hidden, cfg.out, rng);
  } else {
    fc1_ = nn::Linear::create(cfg.in, cfg.out, rng);
  }
  rebuild_params();
}

void MlpHead::rebuild_params() {
  ParamCollector c;
  c.set_stage(Stage::head);
  fc1_.collect(c, "fc1");
  if (fc2_) fc2_->collect(c, "fc2");
  params_ = c.take();
}

Tensor MlpHead::forward(const Tensor& x) const {
  if (!fc2_) return fc1_.forward(x);
  return fc2_->forward(relu(fc1_.forward(x)));
}

nlohmann::json MlpHead::arch_json() const { return {{"config", cfg_.to_json()}}; }

std::shared_ptr<MlpHead> build_mlp_head(const MlpHeadConfig& cfg) {
  return std::make_shared<MlpHead>(cfg);
}

// ---- Discriminator ----

Discriminator::Discriminator(const DiscriminatorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed_fanout(cfg.seed, "discriminator"));
  int64_t ch = cfg.in_channels;
  for (int64_t i = 0; i < cfg.blocks; ++i) {
    const int64_t next = std::min<int64_t>(cfg.base_width << i, cfg.base_width * 8);
    convs_.push_back(nn::Conv3dLayer::create(ch, next, 3, 2, 1, rng));
    if (i > 0) norms_.push_back(nn::InstanceNorm3d::create(next));
    ch = next;
  }
  out_ = nn::Linear::create(ch, 1, rng);
  rebuild_params();
}

void Discriminator::rebuild_params() {
  ParamCollector c;
  c.set_stage(Stage::encoder);
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(c, "conv" + std::to_string(i));
    if (i > 0) norms_[i - 1].collect(c, "norm" + std::to_string(i));
  }
  out_.collect(c, "out");
  params_ = c.take();
}

Tensor Discriminator::forward(const Tensor& x) const {
  if (x.dim() != 5) throw ShapeError("discriminator: (N,C,D,H,W) required");
  Tensor h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i].forward(h);
    if (i > 0) h = norms_[i - 1].forward(h);
    h = leaky_relu(h, 0.2);
  }
  Tensor pooled = spatial_mean(h);
  return reshape(out_.forward(pooled), {x.shape()[0]});
}

nlohmann::json Discriminator::arch_json() const { return {{"config", cfg_.to_json()}}; }

// ---- factories ----

std::shared_ptr<EncoderDecoder> build_encoder_decoder(const EncoderDecoderConfig& cfg) {
  return std::make_shared<EncoderDecoder>(cfg);
}

std::shared_ptr<DiffusionUNet> build_diffusion_unet(const DiffusionUNetConfig& cfg) {
  return std::make_shared<DiffusionUNet>(cfg);
}

std::shared_ptr<Discriminator> build_discriminator(const DiscriminatorConfig& cfg) {
  return std::make_shared<Discriminator>(cfg);
}

std::shared_ptr<Model> model_from_arch(const std::string& kind, const nlohmann::json& arch) {
  std::shared_ptr<Model> model;
  if (kind == "encoder_decoder") {
    model = build_encoder_decoder(EncoderDecoderConfig::from_json(arch.at("config")));
  } else if (kind == "ddunet") {
    model = build_diffusion_unet(DiffusionUNetConfig::from_json(arch.at("config")));
  } else if (kind == "discriminator") {
    model = build_discriminator(DiscriminatorConfig::from_json(arch.at("config")));
  } else if (kind == "mlp_head") {
    model = build_mlp_head(MlpHeadConfig::from_json(arch.at("config")));
  } else {
    throw ManifestError("unknown model kind: " + kind);
  }
  if (arch.contains("heads")) {
    // head parameters are overwritten by the checkpoint payload right after
    model->attach_heads(HeadConfig::from_json(arch.at("heads")), 0);
  }
  return model;
}

}  // namespace pretune
