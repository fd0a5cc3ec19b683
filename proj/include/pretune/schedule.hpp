#pragma once

#include <cstdint>
#include <vector>

#include "pretune/tensor.hpp"

namespace pretune {

// Forward-noising tables. "Scaled linear" means sqrt(beta) is linearly
// spaced between sqrt(beta_start) and sqrt(beta_end), endpoints exact.
struct DiffusionSchedule {
  int64_t T_train = 1000;
  double beta_start = 5e-3;
  double beta_end = 2e-2;
  int64_t T_infer = 25;
  std::vector<double> betas;
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product of alphas

  static DiffusionSchedule scaled_linear(int64_t t_train = 1000, double beta_start = 5e-3,
                                         double beta_end = 2e-2, int64_t t_infer = 25);

  void validate() const;  // betas strictly increasing in (0,1); alpha_bars strictly decreasing

  // T_infer evenly spaced timestep indices over [0, T_train-1], ascending,
  // endpoints included.
  std::vector<int64_t> inference_indices() const;

  void check_timestep(int64_t t) const;  // RangeError outside [0, T_train)
};

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise
std::vector<double> forward_diffuse(const std::vector<double>& x0, int64_t t,
                                    const std::vector<double>& noise,
                                    const DiffusionSchedule& sched);

// Batched variant on (N,C,D,H,W) tensors with one timestep per item.
Tensor forward_diffuse(const Tensor& x0, const std::vector<int64_t>& timesteps,
                       const Tensor& noise, const DiffusionSchedule& sched);

}  // namespace pretune
