#include "pretune/schedule.hpp"

#include <cmath>

#include "pretune/common.hpp"

namespace pretune {

DiffusionSchedule DiffusionSchedule::scaled_linear(int64_t t_train, double beta_start,
                                                   double beta_end, int64_t t_infer) {
  if (t_train < 2) throw ConfigError("diffusion schedule: T_train must be >= 2");
  if (t_infer < 1 || t_infer > t_train) {
    throw ConfigError("diffusion schedule: T_infer must be in [1, T_train]");
  }
  if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
    throw ConfigError("diffusion schedule: need 0 < beta_start < beta_end < 1");
  }
  DiffusionSchedule s;
  s.T_train = t_train;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.T_infer = t_infer;
  s.betas.resize(t_train);
  const double lo = std::sqrt(beta_start), hi = std::sqrt(beta_end);
  for (int64_t t = 0; t < t_train; ++t) {
    const double r = static_cast<double>(t) / static_cast<double>(t_train - 1);
    const double root = lo + (hi - lo) * r;
    s.betas[t] = root * root;
  }
  // pin endpoints exactly; sqrt/square round-trips can drift in the last ulp
  s.betas.front() = beta_start;
  s.betas.back() = beta_end;

  s.alphas.resize(t_train);
  s.alpha_bars.resize(t_train);
  double bar = 1.0;
  for (int64_t t = 0; t < t_train; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    bar *= s.alphas[t];
    s.alpha_bars[t] = bar;
  }
  s.validate();
  return s;
}

void DiffusionSchedule::validate() const {
  if (static_cast<int64_t>(betas.size()) != T_train || alphas.size() != betas.size() ||
      alpha_bars.size() != betas.size()) {
    throw ConfigError("diffusion schedule: table sizes inconsistent");
  }
  for (int64_t t = 0; t < T_train; ++t) {
    if (!(betas[t] > 0 && betas[t] < 1)) throw ConfigError("diffusion schedule: beta outside (0,1)");
    if (t > 0 && betas[t] <= betas[t - 1]) {
      throw ConfigError("diffusion schedule: betas must be strictly increasing");
    }
    if (!(alpha_bars[t] > 0 && alpha_bars[t] <= 1)) {
      throw ConfigError("diffusion schedule: alpha_bar outside (0,1]");
    }
    if (t > 0 && alpha_bars[t] >= alpha_bars[t - 1]) {
      throw ConfigError("diffusion schedule: alpha_bars must be strictly decreasing");
    }
  }
}

std::vector<int64_t> DiffusionSchedule::inference_indices() const {
  std::vector<int64_t> idx(T_infer);
  if (T_infer == 1) {
    idx[0] = T_train - 1;
    return idx;
  }
  for (int64_t i = 0; i < T_infer; ++i) {
    idx[i] = (i * (T_train - 1)) / (T_infer - 1);
  }
  return idx;
}

void DiffusionSchedule::check_timestep(int64_t t) const {
  if (t < 0 || t >= T_train) {
    throw RangeError("timestep " + std::to_string(t) + " outside schedule [0," +
                     std::to_string(T_train) + ")");
  }
}

std::vector<double> forward_diffuse(const std::vector<double>& x0, int64_t t,
                                    const std::vector<double>& noise,
                                    const DiffusionSchedule& sched) {
  sched.check_timestep(t);
  if (x0.size() != noise.size()) throw ShapeError("forward_diffuse: x0/noise size mismatch");
  const double a = std::sqrt(sched.alpha_bars[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
  std::vector<double> out(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

Tensor forward_diffuse(const Tensor& x0, const std::vector<int64_t>& timesteps,
                       const Tensor& noise, const DiffusionSchedule& sched) {
  if (x0.shape() != noise.shape()) throw ShapeError("forward_diffuse: x0/noise shape mismatch");
  if (x0.dim() < 1 || x0.shape()[0] != static_cast<int64_t>(timesteps.size())) {
    throw ShapeError("forward_diffuse: one timestep per batch item");
  }
  const int64_t n = x0.shape()[0];
  const int64_t item = x0.numel() / n;
  std::vector<double> out(static_cast<size_t>(x0.numel()));
  for (int64_t i = 0; i < n; ++i) {
    sched.check_timestep(timesteps[i]);
    const double a = std::sqrt(sched.alpha_bars[timesteps[i]]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[timesteps[i]]);
    const double* x = x0.values().data() + i * item;
    const double* e = noise.values().data() + i * item;
    double* o = out.data() + i * item;
    for (int64_t k = 0; k < item; ++k) o[k] = a * x[k] + b * e[k];
  }
  return Tensor::from_data(x0.shape(), std::move(out));
}

}  // namespace pretune
