#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pretune/tensor.hpp"

namespace pretune::nn {

enum class ParamKind { linear, conv, norm, embedding, other };
enum class Stage { encoder, bottleneck, decoder, head };

std::string to_string(ParamKind k);
std::string to_string(Stage s);

// One registered parameter. The Tensor is a shared handle: layers hold the
// same impl, so optimizer updates are visible to forward passes.
struct ParamEntry {
  std::string name;
  Tensor tensor;
  ParamKind kind = ParamKind::other;
  Stage stage = Stage::encoder;
  bool trainable = true;
};

// Collects parameters in forward-dataflow order while a model wires itself
// up. Name prefixes and stage tags are pushed by the assembling model.
class ParamCollector {
 public:
  void push_prefix(const std::string& p) { prefix_.push_back(p); }
  void pop_prefix() { prefix_.pop_back(); }
  void set_stage(Stage s) { stage_ = s; }
  Stage stage() const { return stage_; }

  void add(const std::string& local_name, const Tensor& t, ParamKind kind);

  std::vector<ParamEntry> take() { return std::move(entries_); }

 private:
  std::vector<std::string> prefix_;
  Stage stage_ = Stage::encoder;
  std::vector<ParamEntry> entries_;
};

// RAII prefix scope.
class ParamScope {
 public:
  ParamScope(ParamCollector& c, const std::string& name) : c_(c) { c_.push_prefix(name); }
  ~ParamScope() { c_.pop_prefix(); }

 private:
  ParamCollector& c_;
};

// ---- layers ----

struct Linear {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out); undefined when bias disabled

  // LoRA adapter; active when lora_rank > 0.
  int64_t lora_rank = 0;
  double lora_scale = 0.0;
  Tensor lora_a;  // (r, in)
  Tensor lora_b;  // (out, r)

  static Linear create(int64_t in, int64_t out, Rng& rng, bool with_bias = true);
  Tensor forward(const Tensor& x) const;  // (..., in) -> (..., out)
  void collect(ParamCollector& c, const std::string& name) const;
  int64_t fan_in() const { return weight.shape()[1]; }
  int64_t fan_out() const { return weight.shape()[0]; }
};

struct Conv3dLayer {
  Tensor weight;  // (out, in, k, k, k)
  Tensor bias;
  int64_t stride = 1;
  int64_t pad = 0;

  static Conv3dLayer create(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t pad,
                            Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

// LayerNorm over the trailing feature axis of (..., C) token layouts.
struct LayerNorm {
  Tensor gamma;  // (C)
  Tensor beta;   // (C)
  double eps = 1e-5;

  static LayerNorm create(int64_t channels);
  Tensor forward(const Tensor& x) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

// InstanceNorm over spatial dims of (N,C,D,H,W), affine.
struct InstanceNorm3d {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static InstanceNorm3d create(int64_t channels);
  Tensor forward(const Tensor& x) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

// GroupNorm on (N,C,D,H,W).
struct GroupNorm3d {
  Tensor gamma;
  Tensor beta;
  int64_t groups = 1;
  double eps = 1e-5;

  static GroupNorm3d create(int64_t channels, int64_t groups);
  Tensor forward(const Tensor& x) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

// Multi-head self-attention over (B, T, C) tokens. An optional additive mask
// (nW, T, T) is broadcast over batch groups and heads (Swin-style shifted
// window masking); pass batch_groups = B / nW.
struct MultiHeadSelfAttention {
  Linear qkv;   // C -> 3C
  Linear proj;  // C -> C
  int64_t heads = 1;

  static MultiHeadSelfAttention create(int64_t channels, int64_t heads, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& mask = Tensor()) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

// Cross-attention: queries from (B, T, C) tokens, keys/values from a context
// (B, S, ctx_dim).
struct CrossAttention {
  Linear to_q;   // C -> C
  Linear to_k;   // ctx -> C
  Linear to_v;   // ctx -> C
  Linear proj;   // C -> C
  int64_t heads = 1;

  static CrossAttention create(int64_t channels, int64_t ctx_dim, int64_t heads, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& context) const;
  void collect(ParamCollector& c, const std::string& name) const;
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp create(int64_t channels, int64_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;  // GELU between the two linears
  void collect(ParamCollector& c, const std::string& name) const;
};

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with L2-coupled weight decay (decay term added to the gradient).
// Parameters whose entry is marked non-trainable are never touched.
class Adam {
 public:
  Adam(std::vector<ParamEntry>* params, AdamConfig cfg);

  void zero_grad();
  void step(double lr);

  // Serialization for resumable runs.
  int64_t step_count() const { return step_count_; }
  const std::vector<double>& first_moment(const std::string& name) const;
  const std::vector<double>& second_moment(const std::string& name) const;
  void restore_state(int64_t step_count, const std::map<std::string, std::vector<double>>& m,
                     const std::map<std::string, std::vector<double>>& v);

 private:
  std::vector<ParamEntry>* params_;
  AdamConfig cfg_;
  int64_t step_count_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// ---- init helpers ----

// Kaiming-uniform over fan_in, the conventional conv/linear default.
Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng);

}  // namespace pretune::nn
