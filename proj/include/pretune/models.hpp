#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pretune/nn.hpp"
#include "pretune/volume.hpp"

namespace pretune {

// ---- parameter inventory ----

struct InventoryEntry {
  std::string name;
  nn::ParamKind kind;
  nn::Stage stage;
  int64_t count;
  bool trainable;
};

struct ParameterInventory {
  std::vector<InventoryEntry> entries;

  int64_t total_count() const;
  int64_t trainable_count() const;
  // Stable digest over (name, kind, stage, count); checkpoint loads refuse
  // on mismatch.
  std::string digest() const;
};

ParameterInventory parameter_inventory(const std::vector<nn::ParamEntry>& params);

// ---- configs ----

struct HeadConfig {
  int64_t seg_labels = 3;   // background + skeleton + PCS
  int64_t cls_classes = 3;  // absent / present / small

  void validate() const;
  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
};

struct EncoderDecoderConfig {
  int64_t feature_size = 24;
  Dims input_patch{64, 64, 63};
  int64_t in_channels = 1;
  int64_t window = 4;
  std::array<int64_t, 3> depths{2, 2, 2};
  std::array<int64_t, 3> heads{0, 0, 0};  // 0 -> derived from feature_size
  double mlp_ratio = 2.0;
  uint64_t seed = 0;

  std::array<int64_t, 3> resolved_heads() const;
  void validate() const;
  nlohmann::json to_json() const;
  static EncoderDecoderConfig from_json(const nlohmann::json& j);

  // Desk-scale profile so every test runs on CPU.
  static EncoderDecoderConfig desk_profile();
};

struct DiffusionUNetConfig {
  int64_t levels = 3;
  std::vector<int64_t> channels{32, 32, 64};
  std::vector<bool> attention_levels{false, false, true};
  int64_t attention_heads = 64;
  int64_t residual_blocks_per_level = 2;
  int64_t cross_attention_dim = 32;
  Dims input_patch{32, 32, 32};
  int64_t in_channels = 1;
  uint64_t seed = 0;

  // Returns human-readable warnings (e.g. head_dim == 1 when reproducing the
  // verbatim 64-heads-on-64-channels setting); throws ConfigError on hard
  // violations.
  std::vector<std::string> validate() const;
  nlohmann::json to_json() const;
  static DiffusionUNetConfig from_json(const nlohmann::json& j);

  static DiffusionUNetConfig desk_profile();
};

struct DiscriminatorConfig {
  int64_t base_width = 16;
  int64_t blocks = 4;
  int64_t in_channels = 1;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DiscriminatorConfig from_json(const nlohmann::json& j);

  static DiscriminatorConfig desk_profile();
};

// ---- models ----

struct MultiTaskOutput {
  Tensor seg_logits;  // (N, seg_labels, D, H, W)
  Tensor cls_logits;  // (N, cls_classes)
};

enum class LoraState { none, active, merged };

// Common surface for the three network kinds: parameter table, inventory,
// checkpointing, head attachment and LoRA targeting.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  virtual nlohmann::json arch_json() const = 0;

  std::vector<nn::ParamEntry>& params() { return params_; }
  const std::vector<nn::ParamEntry>& params() const { return params_; }
  ParameterInventory inventory() const { return parameter_inventory(params_); }

  virtual Tensor reconstruct(const Tensor& x) const;
  virtual MultiTaskOutput forward_multitask(const Tensor& x) const;
  virtual void attach_heads(const HeadConfig& cfg, uint64_t seed);
  virtual bool has_heads() const { return false; }

  // Linear layers in dataflow order (LoRA targets).
  virtual std::vector<std::pair<std::string, nn::Linear*>> linear_layers() { return {}; }
  virtual void rebuild_params() = 0;

  LoraState lora_state = LoraState::none;

 protected:
  std::vector<nn::ParamEntry> params_;
};

// Hierarchical shifted-window attention encoder with a convolutional
// skip-connected decoder and reconstruction head.
class EncoderDecoder;
class DiffusionUNet;
class Discriminator;

std::shared_ptr<EncoderDecoder> build_encoder_decoder(const EncoderDecoderConfig& cfg);
std::shared_ptr<DiffusionUNet> build_diffusion_unet(const DiffusionUNetConfig& cfg);
std::shared_ptr<Discriminator> build_discriminator(const DiscriminatorConfig& cfg);

// Rebuild a model of the named kind from its arch_json (checkpoint loads).
std::shared_ptr<Model> model_from_arch(const std::string& kind, const nlohmann::json& arch);

class EncoderDecoder : public Model {
 public:
  explicit EncoderDecoder(const EncoderDecoderConfig& cfg);

  struct Output {
    Tensor recon;
    Tensor bottleneck;  // (N, 4F, D/4, H/4, W/4)
    Tensor features;    // final decoder features (N, F, D, H, W)
  };
  Output forward(const Tensor& x) const;

  std::string kind() const override { return "encoder_decoder"; }
  nlohmann::json arch_json() const override;
  Tensor reconstruct(const Tensor& x) const override;
  MultiTaskOutput forward_multitask(const Tensor& x) const override;
  void attach_heads(const HeadConfig& cfg, uint64_t seed) override;
  bool has_heads() const override { return heads_.has_value(); }
  std::vector<std::pair<std::string, nn::Linear*>> linear_layers() override;
  void rebuild_params() override;

  const EncoderDecoderConfig& config() const { return cfg_; }

  // Encoder-only embedding for contrastive learning: pooled bottleneck (N, 4F).
  Tensor encode(const Tensor& x) const;

 private:
  struct SwinBlock {
    nn::LayerNorm ln1, ln2;
    nn::MultiHeadSelfAttention attn;
    nn::Mlp mlp;
    int64_t window = 4;
    bool shifted = false;

    Tensor forward(const Tensor& x) const;
    void collect(nn::ParamCollector& c, const std::string& name) const;
  };
  struct ConvBlock {
    nn::Conv3dLayer conv1, conv2;
    nn::InstanceNorm3d norm1, norm2;

    Tensor forward(const Tensor& x) const;
    void collect(nn::ParamCollector& c, const std::string& name) const;
  };
  struct Heads {
    nn::Conv3dLayer seg1, seg2;
    nn::Linear cls;
    HeadConfig cfg;
  };

  EncoderDecoderConfig cfg_;
  nn::Conv3dLayer stem_;
  std::vector<SwinBlock> stage1_, stage2_, bottleneck_;
  nn::Conv3dLayer down1_, down2_;
  nn::Conv3dLayer up2_, up1_;
  ConvBlock fuse2_, fuse1_;
  nn::Conv3dLayer recon_;
  std::optional<Heads> heads_;

  friend class ModelAccess;
};

class DiffusionUNet : public Model {
 public:
  explicit DiffusionUNet(const DiffusionUNetConfig& cfg);

  // Predicts the noise field for a batch of noisy patches at integer
  // timesteps; conditioning defaults to the learned null token.
  Tensor forward(const Tensor& x, const std::vector<int64_t>& timesteps,
                 const Tensor& conditioning = Tensor()) const;

  std::string kind() const override { return "ddunet"; }
  nlohmann::json arch_json() const override;
  MultiTaskOutput forward_multitask(const Tensor& x) const override;
  void attach_heads(const HeadConfig& cfg, uint64_t seed) override;
  bool has_heads() const override { return heads_.has_value(); }
  std::vector<std::pair<std::string, nn::Linear*>> linear_layers() override;
  void rebuild_params() override;

  const DiffusionUNetConfig& config() const { return cfg_; }
  const std::vector<std::string>& build_warnings() const { return warnings_; }

  // Pooled deepest features at t=0 (probe/contrastive embedding).
  Tensor encode(const Tensor& x) const;

 private:
  struct ResBlock {
    nn::GroupNorm3d gn1, gn2;
    nn::Conv3dLayer conv1, conv2;
    nn::Linear temb_proj;
    std::optional<nn::Conv3dLayer> skip;

    Tensor forward(const Tensor& x, const Tensor& temb) const;
    void collect(nn::ParamCollector& c, const std::string& name) const;
  };
  struct AttnBlock {
    nn::GroupNorm3d norm_self, norm_cross;
    nn::MultiHeadSelfAttention self_attn;
    nn::CrossAttention cross_attn;

    Tensor forward(const Tensor& x, const Tensor& context) const;
    void collect(nn::ParamCollector& c, const std::string& name) const;
  };
  struct Level {
    std::vector<ResBlock> blocks;
    std::optional<AttnBlock> attn;
    std::optional<nn::Conv3dLayer> down;  // stride-2 between levels
  };
  struct UpLevel {
    std::vector<ResBlock> blocks;
    std::optional<AttnBlock> attn;
    std::optional<nn::Conv3dLayer> up_conv;  // nearest upsample + conv between levels
  };
  struct Heads {
    nn::Conv3dLayer seg1, seg2;
    nn::Linear cls;
    HeadConfig cfg;
  };

  struct FeatureOutput {
    Tensor features;  // (N, c0, D, H, W)
    Tensor mid;       // deepest features
  };
  FeatureOutput forward_features(const Tensor& x, const std::vector<int64_t>& timesteps,
                                 const Tensor& conditioning) const;

  DiffusionUNetConfig cfg_;
  std::vector<std::string> warnings_;
  nn::Linear time_fc1_, time_fc2_;
  Tensor null_token_;  // (1, 1, cross_attention_dim), learned
  nn::Conv3dLayer stem_;
  std::vector<Level> down_;
  ResBlock mid1_, mid2_;
  std::optional<AttnBlock> mid_attn_;
  std::vector<UpLevel> up_;
  nn::GroupNorm3d out_norm_;
  nn::Conv3dLayer out_conv_;
  std::optional<Heads> heads_;
};

// Small dense head used for the contrastive projection and the frozen-encoder
// linear probe; hidden == 0 collapses it to a single linear layer.
struct MlpHeadConfig {
  int64_t in = 0;
  int64_t hidden = 0;
  int64_t out = 0;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MlpHeadConfig from_json(const nlohmann::json& j);
};

class MlpHead : public Model {
 public:
  explicit MlpHead(const MlpHeadConfig& cfg);

  Tensor forward(const Tensor& x) const;  // (N, in) -> (N, out)

  std::string kind() const override { return "mlp_head"; }
  nlohmann::json arch_json() const override;
  void rebuild_params() override;

  const MlpHeadConfig& config() const { return cfg_; }

 private:
  MlpHeadConfig cfg_;
  nn::Linear fc1_;
  std::optional<nn::Linear> fc2_;
};

std::shared_ptr<MlpHead> build_mlp_head(const MlpHeadConfig& cfg);

class Discriminator : public Model {
 public:
  explicit Discriminator(const DiscriminatorConfig& cfg);

  // (N,1,D,H,W) -> (N) real/fake logits.
  Tensor forward(const Tensor& x) const;

  std::string kind() const override { return "discriminator"; }
  nlohmann::json arch_json() const override;
  void rebuild_params() override;

  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<nn::Conv3dLayer> convs_;
  std::vector<nn::InstanceNorm3d> norms_;  // from the second block on
  nn::Linear out_;
};

}  // namespace pretune
