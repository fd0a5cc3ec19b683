#include "pretune/nn.hpp"

#include <cmath>

namespace pretune::nn {

std::string to_string(ParamKind k) {
  switch (k) {
    case ParamKind::linear: return "linear";
    case ParamKind::conv: return "conv";
    case ParamKind::norm: return "norm";
    case ParamKind::embedding: return "embedding";
    case ParamKind::other: return "other";
  }
  return "other";
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::encoder: return "encoder";
    case Stage::bottleneck: return "bottleneck";
    case Stage::decoder: return "decoder";
    case Stage::head: return "head";
  }
  return "encoder";
}

void ParamCollector::add(const std::string& local_name, const Tensor& t, ParamKind kind) {
  std::string full;
  for (const auto& p : prefix_) {
    full += p;
    full += '.';
  }
  full += local_name;
  entries_.push_back(ParamEntry{full, t, kind, stage_, true});
}

Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0) * std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, /*leaf_param=*/true);
}

// ---- Linear ----

Linear Linear::create(int64_t in, int64_t out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = kaiming_uniform({out, in}, in, rng);
  if (with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.bias = Tensor::rand_uniform({out}, rng, -bound, bound, /*leaf_param=*/true);
  }
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  const int64_t in = weight.shape()[1];
  const int64_t out = weight.shape()[0];
  if (x.shape().back() != in) {
    throw ShapeError("linear: expected trailing dim " + std::to_string(in) + ", got " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor x2 = reshape(x, {-1, in});
  Tensor y = matmul(x2, weight, false, /*trans_b=*/true);
  if (lora_rank > 0) {
    // base(x) + scale * B(A(x)); base weight stays frozen during tuning.
    Tensor ax = matmul(x2, lora_a, false, true);   // (M, r)
    Tensor bax = matmul(ax, lora_b, false, true);  // (M, out)
    y = add(y, mul_scalar(bax, lora_scale));
  }
  if (bias.defined()) y = add(y, bias);
  return reshape(y, out_shape);
}

void Linear::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  c.add("weight", weight, ParamKind::linear);
  if (bias.defined()) c.add("bias", bias, ParamKind::linear);
  if (lora_rank > 0) {
    c.add("lora_a", lora_a, ParamKind::linear);
    c.add("lora_b", lora_b, ParamKind::linear);
  }
}

// ---- Conv3dLayer ----

Conv3dLayer Conv3dLayer::create(int64_t in, int64_t out, int64_t kernel, int64_t stride,
                                int64_t pad, Rng& rng) {
  Conv3dLayer l;
  const int64_t fan_in = in * kernel * kernel * kernel;
  l.weight = kaiming_uniform({out, in, kernel, kernel, kernel}, fan_in, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  l.bias = Tensor::rand_uniform({out}, rng, -bound, bound, /*leaf_param=*/true);
  l.stride = stride;
  l.pad = pad;
  return l;
}

Tensor Conv3dLayer::forward(const Tensor& x) const {
  // conv3d's bias argument expects (cout); broadcasting over space happens
  // inside the op.
  return conv3d(x, weight, bias, stride, pad);
}

void Conv3dLayer::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  c.add("weight", weight, ParamKind::conv);
  c.add("bias", bias, ParamKind::conv);
}

// ---- LayerNorm ----

LayerNorm LayerNorm::create(int64_t channels) {
  LayerNorm n;
  n.gamma = Tensor::full({channels}, 1.0, true);
  n.beta = Tensor::zeros({channels}, true);
  return n;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  const int64_t last = x.dim() - 1;
  Tensor mu = mean(x, {last}, true);
  Tensor centered = sub(x, mu);
  Tensor var = mean(square(centered), {last}, true);
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  return add(mul(mul(centered, inv), gamma), beta);
}

void LayerNorm::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  c.add("gamma", gamma, ParamKind::norm);
  c.add("beta", beta, ParamKind::norm);
}

// ---- InstanceNorm3d ----

InstanceNorm3d InstanceNorm3d::create(int64_t channels) {
  InstanceNorm3d n;
  n.gamma = Tensor::full({channels}, 1.0, true);
  n.beta = Tensor::zeros({channels}, true);
  return n;
}

Tensor InstanceNorm3d::forward(const Tensor& x) const {
  if (x.dim() != 5) throw ShapeError("instance_norm: (N,C,D,H,W) required");
  Tensor mu = mean(x, {2, 3, 4}, true);
  Tensor centered = sub(x, mu);
  Tensor var = mean(square(centered), {2, 3, 4}, true);
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  const int64_t ch = gamma.shape()[0];
  Tensor g = reshape(gamma, {1, ch, 1, 1, 1});
  Tensor b = reshape(beta, {1, ch, 1, 1, 1});
  return add(mul(mul(centered, inv), g), b);
}

void InstanceNorm3d::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  c.add("gamma", gamma, ParamKind::norm);
  c.add("beta", beta, ParamKind::norm);
}

// ---- GroupNorm3d ----

GroupNorm3d GroupNorm3d::create(int64_t channels, int64_t groups) {
  if (channels % groups != 0) throw ConfigError("group_norm: channels must divide into groups");
  GroupNorm3d n;
  n.gamma = Tensor::full({channels}, 1.0, true);
  n.beta = Tensor::zeros({channels}, true);
  n.groups = groups;
  return n;
}

Tensor GroupNorm3d::forward(const Tensor& x) const {
  if (x.dim() != 5) throw ShapeError("group_norm: (N,C,D,H,W) required");
  const auto& s = x.shape();
  const int64_t n = s[0], ch = s[1];
  Tensor xg = reshape(x, {n, groups, ch / groups, s[2], s[3], s[4]});
  Tensor mu = mean(xg, {2, 3, 4, 5}, true);
  Tensor centered = sub(xg, mu);
  Tensor var = mean(square(centered), {2, 3, 4, 5}, true);
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor norm = reshape(mul(centered, inv), s);
  Tensor g = reshape(gamma, {1, ch, 1, 1, 1});
  Tensor b = reshape(beta, {1, ch, 1, 1, 1});
  return add(mul(norm, g), b);
}

void GroupNorm3d::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  c.add("gamma", gamma, ParamKind::norm);
  c.add("beta", beta, ParamKind::norm);
}

// ---- MultiHeadSelfAttention ----

MultiHeadSelfAttention MultiHeadSelfAttention::create(int64_t channels, int64_t heads, Rng& rng) {
  if (channels % heads != 0) throw ConfigError("attention: heads must divide channels");
  MultiHeadSelfAttention a;
  a.qkv = Linear::create(channels, 3 * channels, rng);
  a.proj = Linear::create(channels, channels, rng);
  a.heads = heads;
  return a;
}

Tensor MultiHeadSelfAttention::forward(const Tensor& x, const Tensor& mask) const {
  if (x.dim() != 3) throw ShapeError("attention: (B,T,C) required");
  const int64_t b = x.shape()[0], t = x.shape()[1], ch = x.shape()[2];
  const int64_t dh = ch / heads;
  Tensor qkv_out = qkv.forward(x);                       // (B,T,3C)
  Tensor split = reshape(qkv_out, {b, t, 3, heads, dh});
  split = permute(split, {2, 0, 3, 1, 4});               // (3,B,h,T,dh)
  Tensor q = reshape(slice(split, 0, 0, 1), {b * heads, t, dh});
  Tensor k = reshape(slice(split, 0, 1, 1), {b * heads, t, dh});
  Tensor v = reshape(slice(split, 0, 2, 1), {b * heads, t, dh});
  Tensor logits = mul_scalar(bmm(q, k, false, /*trans_b=*/true),
                             1.0 / std::sqrt(static_cast<double>(dh)));  // (B*h,T,T)
  if (mask.defined()) {
    const int64_t n_w = mask.shape()[0];
    if (b % n_w != 0) throw ShapeError("attention: mask windows do not divide batch");
    const int64_t groups = b / n_w;
    Tensor lg = reshape(logits, {groups, n_w, heads, t, t});
    lg = add(lg, reshape(mask, {1, n_w, 1, t, t}));
    logits = reshape(lg, {b * heads, t, t});
  }
  Tensor attn = softmax_lastdim(logits);
  Tensor out = bmm(attn, v);                              // (B*h,T,dh)
  out = reshape(out, {b, heads, t, dh});
  out = permute(out, {0, 2, 1, 3});                       // (B,T,h,dh)
  out = reshape(out, {b, t, ch});
  return proj.forward(out);
}

void MultiHeadSelfAttention::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  qkv.collect(c, "qkv");
  proj.collect(c, "proj");
}

// ---- CrossAttention ----

CrossAttention CrossAttention::create(int64_t channels, int64_t ctx_dim, int64_t heads, Rng& rng) {
  if (channels % heads != 0) throw ConfigError("cross_attention: heads must divide channels");
  CrossAttention a;
  a.to_q = Linear::create(channels, channels, rng);
  a.to_k = Linear::create(ctx_dim, channels, rng);
  a.to_v = Linear::create(ctx_dim, channels, rng);
  a.proj = Linear::create(channels, channels, rng);
  a.heads = heads;
  return a;
}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& context) const {
  if (x.dim() != 3 || context.dim() != 3) throw ShapeError("cross_attention: rank-3 required");
  const int64_t b = x.shape()[0], t = x.shape()[1], ch = x.shape()[2];
  const int64_t s = context.shape()[1];
  if (context.shape()[0] != b) throw ShapeError("cross_attention: batch mismatch");
  const int64_t dh = ch / heads;
  auto heads_first = [&](const Tensor& z, int64_t len) {
    Tensor r = reshape(z, {b, len, heads, dh});
    return reshape(permute(r, {0, 2, 1, 3}), {b * heads, len, dh});
  };
  Tensor q = heads_first(to_q.forward(x), t);
  Tensor k = heads_first(to_k.forward(context), s);
  Tensor v = heads_first(to_v.forward(context), s);
  Tensor logits = mul_scalar(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax_lastdim(logits);
  Tensor out = bmm(attn, v);
  out = reshape(permute(reshape(out, {b, heads, t, dh}), {0, 2, 1, 3}), {b, t, ch});
  return proj.forward(out);
}

void CrossAttention::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  to_q.collect(c, "to_q");
  to_k.collect(c, "to_k");
  to_v.collect(c, "to_v");
  proj.collect(c, "proj");
}

// ---- Mlp ----

Mlp Mlp::create(int64_t channels, int64_t hidden, Rng& rng) {
  Mlp m;
  m.fc1 = Linear::create(channels, hidden, rng);
  m.fc2 = Linear::create(hidden, channels, rng);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

void Mlp::collect(ParamCollector& c, const std::string& name) const {
  ParamScope scope(c, name);
  fc1.collect(c, "fc1");
  fc2.collect(c, "fc2");
}

// ---- Adam ----

Adam::Adam(std::vector<ParamEntry>* params, AdamConfig cfg) : params_(params), cfg_(cfg) {}

void Adam::zero_grad() {
  for (auto& p : *params_) p.tensor.zero_grad();
}

void Adam::step(double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (auto& p : *params_) {
    if (!p.trainable) continue;
    auto& theta = p.tensor.mutable_values();
    const auto& grad = p.tensor.grad();
    auto& m = m_[p.name];
    auto& v = v_[p.name];
    if (m.size() != theta.size()) m.assign(theta.size(), 0.0);
    if (v.size() != theta.size()) v.assign(theta.size(), 0.0);
    for (size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] + cfg_.weight_decay * theta[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

const std::vector<double>& Adam::first_moment(const std::string& name) const {
  static const std::vector<double> empty;
  auto it = m_.find(name);
  return it == m_.end() ? empty : it->second;
}

const std::vector<double>& Adam::second_moment(const std::string& name) const {
  static const std::vector<double> empty;
  auto it = v_.find(name);
  return it == v_.end() ? empty : it->second;
}

void Adam::restore_state(int64_t step_count, const std::map<std::string, std::vector<double>>& m,
                         const std::map<std::string, std::vector<double>>& v) {
  step_count_ = step_count;
  m_ = m;
  v_ = v;
}

}  // namespace pretune::nn
