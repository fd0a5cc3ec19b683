#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pretune/tensor.hpp"
#include "pretune/volume.hpp"

namespace pretune {

// Stabilizers and window for the structural-similarity family. Defaults are
// the conventional c1=(0.01*L)^2, c2=(0.03*L)^2 with L=1 for normalized
// intensities and a 7-voxel box window.
struct SsimParams {
  double c1 = 1e-4;
  double c2 = 9e-4;
  int64_t window = 7;
  double dynamic_range = 1.0;

  static SsimParams for_range(double range);
  void validate() const;  // c1,c2 > 0; window odd and >= 3
};

// Mean of local windowed SSIM over all valid window positions (and batch).
// Accepts (D,H,W), (N,C,D,H,W). Symmetric; 1 iff x == y.
Tensor ssim(const Tensor& x, const Tensor& y, const SsimParams& p);

// 1 - ssim(x, y): the reconstruction training loss. Zero iff identical.
Tensor loss_rec(const Tensor& x, const Tensor& y, const SsimParams& p);

// Multi-scale SSIM over dyadic downsamplings (equal unit weights, so
// levels=1 reduces exactly to ssim). Evaluation metric, not a training loss.
Tensor ms_ssim(const Tensor& x, const Tensor& y, const SsimParams& p, int64_t levels);

// Binary cross-entropy from logits against a constant 0/1 target.
Tensor binary_ce_logits(const Tensor& logits, double target);

// Discriminator objective: mean of CE(fake batch -> target 0) and
// CE(real batch -> target 1).
Tensor disc_loss(const Tensor& pred_on_fake, const Tensor& pred_on_real);

// Non-saturating generator objective: CE(fake batch -> target 1).
Tensor gen_loss(const Tensor& pred_on_fake);

// 2N embeddings with a perfect positive pairing i <-> partner[i].
struct ContrastiveBatch {
  Tensor embeddings;             // (2N, dim)
  std::vector<int64_t> partner;  // involution without fixed points
  double temperature = 0.5;

  void validate() const;
};

// NT-Xent: mean over all 2N anchors of -log softmax_{k != i}(sim(i,k)/tau)
// evaluated at the positive partner; sim is cosine similarity.
Tensor ntxent_loss(const ContrastiveBatch& batch);

struct ContrastiveTotal {
  Tensor total;
  Tensor rec;
  Tensor con;
};

// loss_rec(x_rec, y) + ntxent(batch), with both addends kept for logging.
ContrastiveTotal contrastive_total(const Tensor& x_rec, const Tensor& y, const SsimParams& p,
                                   const ContrastiveBatch& batch);

// Soft dice over the foreground labels {1,2}:
// 1 - mean_l (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
// probs: (N,C,D,H,W) summing to 1 over C; target_onehot: same shape.
Tensor dice_loss(const Tensor& probs, const Tensor& target_onehot, double eps = 1e-5);

// Multi-class CE from logits (N,K) against integer targets.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets);

struct MultiTaskWeights {
  double l1 = 0.85;  // segmentation
  double l2 = 0.15;  // classification

  void validate() const;
};

struct MultiTaskResult {
  Tensor total;
  Tensor seg;  // dice term
  Tensor cls;  // CE term
};

MultiTaskResult multitask_loss(const Tensor& seg_probs, const Tensor& seg_target_onehot,
                               const Tensor& cls_logits, const std::vector<int64_t>& cls_targets,
                               const MultiTaskWeights& w);

// One-hot (N,C,D,H,W) constant tensor from mask patches.
Tensor masks_to_onehot(const std::vector<SegmentationMask>& masks, int64_t num_classes = 3);

// (N,1,D,H,W) constant tensor from volume patches.
Tensor volumes_to_tensor(const std::vector<Volume>& patches);

}  // namespace pretune
