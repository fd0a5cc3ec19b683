#include "pretune/losses.hpp"

#include <cmath>

namespace pretune {

namespace {

// Separable valid-mode box mean via three single-axis convolutions.
Tensor box_mean3d(const Tensor& x, int64_t w) {
  const double inv = 1.0 / static_cast<double>(w);
  Tensor kz = Tensor::full({1, 1, w, 1, 1}, inv);
  Tensor ky = Tensor::full({1, 1, 1, w, 1}, inv);
  Tensor kx = Tensor::full({1, 1, 1, 1, w}, inv);
  Tensor r = conv3d(x, kz, Tensor(), 1, 0);
  r = conv3d(r, ky, Tensor(), 1, 0);
  return conv3d(r, kx, Tensor(), 1, 0);
}

Tensor to_batched5(const Tensor& t) {
  if (t.dim() == 3) return reshape(t, {1, 1, t.shape()[0], t.shape()[1], t.shape()[2]});
  if (t.dim() == 5) {
    // collapse channels into the batch so the box filters see one channel
    const auto& s = t.shape();
    return reshape(t, {s[0] * s[1], 1, s[2], s[3], s[4]});
  }
  throw ShapeError("ssim: expected (D,H,W) or (N,C,D,H,W), got " + shape_str(t.shape()));
}

}  // namespace

SsimParams SsimParams::for_range(double range) {
  SsimParams p;
  p.dynamic_range = range;
  p.c1 = (0.01 * range) * (0.01 * range);
  p.c2 = (0.03 * range) * (0.03 * range);
  return p;
}

void SsimParams::validate() const {
  if (c1 <= 0 || c2 <= 0) throw ConfigError("ssim stabilizers must be positive");
  if (window < 3 || window % 2 == 0) throw ConfigError("ssim window must be odd and >= 3");
}

Tensor ssim(const Tensor& x, const Tensor& y, const SsimParams& p) {
  p.validate();
  if (x.shape() != y.shape()) {
    throw ShapeError("ssim: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor xb = to_batched5(x);
  Tensor yb = to_batched5(y);
  const auto& s = xb.shape();
  if (p.window > s[2] || p.window > s[3] || p.window > s[4]) {
    throw ShapeError("ssim: window larger than grid");
  }

  Tensor mu_x = box_mean3d(xb, p.window);
  Tensor mu_y = box_mean3d(yb, p.window);
  Tensor mu_xx = box_mean3d(mul(xb, xb), p.window);
  Tensor mu_yy = box_mean3d(mul(yb, yb), p.window);
  Tensor mu_xy = box_mean3d(mul(xb, yb), p.window);

  Tensor var_x = sub(mu_xx, mul(mu_x, mu_x));
  Tensor var_y = sub(mu_yy, mul(mu_y, mu_y));
  Tensor cov = sub(mu_xy, mul(mu_x, mu_y));

  Tensor num = mul(add_scalar(mul_scalar(mul(mu_x, mu_y), 2.0), p.c1),
                   add_scalar(mul_scalar(cov, 2.0), p.c2));
  Tensor den = mul(add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), p.c1),
                   add_scalar(add(var_x, var_y), p.c2));
  return mean(div(num, den));
}

Tensor loss_rec(const Tensor& x, const Tensor& y, const SsimParams& p) {
  return add_scalar(neg(ssim(x, y, p)), 1.0);
}

Tensor ms_ssim(const Tensor& x, const Tensor& y, const SsimParams& p, int64_t levels) {
  if (levels < 1) throw ConfigError("ms_ssim: levels must be >= 1");
  Tensor xb = to_batched5(x);
  Tensor yb = to_batched5(y);
  Tensor result;
  for (int64_t l = 0; l < levels; ++l) {
    Tensor level = ssim(xb, yb, p);
    result = result.defined() ? mul(result, level) : level;
    if (l + 1 < levels) {
      xb = avg_pool3d_2x(xb);
      yb = avg_pool3d_2x(yb);
    }
  }
  return result;
}

Tensor binary_ce_logits(const Tensor& logits, double target) {
  if (logits.numel() < 1) throw ShapeError("binary CE: empty batch");
  // softplus(z) - t*z == -log p(t) for a Bernoulli logit, numerically stable
  Tensor sp = softplus(logits);
  if (target != 0.0) sp = sub(sp, mul_scalar(logits, target));
  return mean(sp);
}

Tensor disc_loss(const Tensor& pred_on_fake, const Tensor& pred_on_real) {
  Tensor fake_term = binary_ce_logits(pred_on_fake, 0.0);
  Tensor real_term = binary_ce_logits(pred_on_real, 1.0);
  return mul_scalar(add(fake_term, real_term), 0.5);
}

Tensor gen_loss(const Tensor& pred_on_fake) { return binary_ce_logits(pred_on_fake, 1.0); }

void ContrastiveBatch::validate() const {
  if (!embeddings.defined() || embeddings.dim() != 2) {
    throw ShapeError("contrastive batch: embeddings must be (2N, dim)");
  }
  const auto n2 = static_cast<int64_t>(partner.size());
  if (embeddings.shape()[0] != n2) throw ShapeError("contrastive batch: pairing size mismatch");
  if (n2 < 4 || n2 % 2 != 0) throw ConfigError("contrastive batch: need 2N >= 4 embeddings");
  if (temperature <= 0) throw ConfigError("contrastive batch: temperature must be positive");
  for (int64_t i = 0; i < n2; ++i) {
    if (partner[i] < 0 || partner[i] >= n2 || partner[i] == i || partner[partner[i]] != i) {
      throw ConfigError("contrastive batch: pairing must be a perfect matching");
    }
  }
}

Tensor ntxent_loss(const ContrastiveBatch& batch) {
  batch.validate();
  const Tensor& e = batch.embeddings;
  const int64_t n2 = e.shape()[0];

  Tensor sq = sum(square(e), {1}, true);  // (2N,1)
  for (double v : sq.values()) {
    if (v < 1e-24) throw DegenerateInputError("ntxent: zero-norm embedding");
  }
  Tensor normed = mul(e, pow_scalar(sq, -0.5));
  Tensor sim = matmul(normed, normed, false, /*trans_b=*/true);  // cosine similarities
  Tensor logits = mul_scalar(sim, 1.0 / batch.temperature);

  // exclude self-similarity from the softmax support
  std::vector<double> diag(static_cast<size_t>(n2 * n2), 0.0);
  std::vector<double> pos(static_cast<size_t>(n2 * n2), 0.0);
  for (int64_t i = 0; i < n2; ++i) {
    diag[i * n2 + i] = -1e9;
    pos[i * n2 + batch.partner[i]] = 1.0;
  }
  logits = add(logits, Tensor::from_data({n2, n2}, std::move(diag)));
  Tensor lse = logsumexp_lastdim(logits);                                    // (2N)
  Tensor pos_logit = sum(mul(logits, Tensor::from_data({n2, n2}, std::move(pos))), {1}, false);
  return mean(sub(lse, pos_logit));
}

ContrastiveTotal contrastive_total(const Tensor& x_rec, const Tensor& y, const SsimParams& p,
                                   const ContrastiveBatch& batch) {
  ContrastiveTotal r;
  r.rec = loss_rec(x_rec, y, p);
  r.con = ntxent_loss(batch);
  r.total = add(r.rec, r.con);
  return r;
}

Tensor dice_loss(const Tensor& probs, const Tensor& target_onehot, double eps) {
  if (probs.dim() != 5 || probs.shape() != target_onehot.shape()) {
    throw ShapeError("dice: probs and one-hot target must both be (N,C,D,H,W)");
  }
  const int64_t classes = probs.shape()[1];
  if (classes < 3) throw ShapeError("dice: need background + 2 foreground channels");
  {
    // per-voxel probabilities must sum to 1
    Tensor colsum = sum(probs, {1}, false);
    for (double v : colsum.values()) {
      if (std::fabs(v - 1.0) > 1e-5) throw ConfigError("dice: probabilities must sum to 1 per voxel");
    }
  }
  Tensor acc;
  for (int64_t label = 1; label <= 2; ++label) {
    Tensor p = slice(probs, 1, label, 1);
    Tensor g = slice(target_onehot, 1, label, 1);
    Tensor inter = sum(mul(p, g));
    Tensor denom = add(sum(p), sum(g));
    Tensor d = div(add_scalar(mul_scalar(inter, 2.0), eps), add_scalar(denom, eps));
    acc = acc.defined() ? add(acc, d) : d;
  }
  return add_scalar(neg(mul_scalar(acc, 0.5)), 1.0);
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy: logits must be (N,K)");
  const int64_t n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != n) throw ShapeError("cross_entropy: target count mismatch");
  std::vector<double> onehot(static_cast<size_t>(n * k), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= k) throw ShapeError("cross_entropy: target out of range");
    onehot[i * k + targets[i]] = 1.0;
  }
  Tensor lse = logsumexp_lastdim(logits);  // (N)
  Tensor picked = sum(mul(logits, Tensor::from_data({n, k}, std::move(onehot))), {1}, false);
  return mean(sub(lse, picked));
}

void MultiTaskWeights::validate() const {
  if (l1 < 0 || l2 < 0) throw ConfigError("multi-task weights must be non-negative");
}

MultiTaskResult multitask_loss(const Tensor& seg_probs, const Tensor& seg_target_onehot,
                               const Tensor& cls_logits, const std::vector<int64_t>& cls_targets,
                               const MultiTaskWeights& w) {
  w.validate();
  MultiTaskResult r;
  r.seg = dice_loss(seg_probs, seg_target_onehot);
  r.cls = cross_entropy_logits(cls_logits, cls_targets);
  r.total = add(mul_scalar(r.seg, w.l1), mul_scalar(r.cls, w.l2));
  return r;
}

Tensor masks_to_onehot(const std::vector<SegmentationMask>& masks, int64_t num_classes) {
  if (masks.empty()) throw ShapeError("masks_to_onehot: empty batch");
  const Dims dims = masks[0].dims;
  const auto n = static_cast<int64_t>(masks.size());
  std::vector<double> data(static_cast<size_t>(n * num_classes * dims.voxels()), 0.0);
  const int64_t vol = dims.voxels();
  for (int64_t i = 0; i < n; ++i) {
    if (!(masks[i].dims == dims)) throw ShapeError("masks_to_onehot: inconsistent dims");
    for (int64_t v = 0; v < vol; ++v) {
      const uint8_t label = masks[i].labels[v];
      if (label >= num_classes) throw ShapeError("masks_to_onehot: label out of range");
      data[(i * num_classes + label) * vol + v] = 1.0;
    }
  }
  return Tensor::from_data({n, num_classes, dims.d, dims.h, dims.w}, std::move(data));
}

Tensor volumes_to_tensor(const std::vector<Volume>& patches) {
  if (patches.empty()) throw ShapeError("volumes_to_tensor: empty batch");
  const Dims dims = patches[0].dims;
  const auto n = static_cast<int64_t>(patches.size());
  std::vector<double> data;
  data.reserve(static_cast<size_t>(n * dims.voxels()));
  for (const auto& p : patches) {
    if (!(p.dims == dims)) throw ShapeError("volumes_to_tensor: inconsistent dims");
    data.insert(data.end(), p.data.begin(), p.data.end());
  }
  return Tensor::from_data({n, 1, dims.d, dims.h, dims.w}, std::move(data));
}

}  // namespace pretune
