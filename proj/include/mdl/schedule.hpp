// Noise schedules and the forward (noising) process, including masked
// noising: the anomaly latent and its background-only companion receive the
// same noise so that (1-m) o z_t = z_t^m holds at every step.
#pragma once

#include <cmath>
#include <vector>

#include "mdl/tensor.hpp"

namespace mdl {

// Cumulative signal coefficients alpha_bar[t] for t = 0..T, alpha_bar[0] = 1,
// strictly decreasing, alpha_bar[T] > 0.
struct NoiseSchedule {
  uint32_t T = 0;
  std::vector<double> alpha_bar;

  double alpha(uint32_t t) const {
    if (t > T) fail(Errc::out_of_domain, "step " + std::to_string(t) + " > T");
    return alpha_bar[t];
  }

  void validate() const {
    if (T < 1 || alpha_bar.size() != size_t(T) + 1) fail(Errc::invalid_config, "schedule size");
    if (alpha_bar[0] != 1.0) fail(Errc::invalid_config, "alpha_bar[0] must be 1");
    for (uint32_t t = 1; t <= T; ++t)
      if (!(alpha_bar[t] < alpha_bar[t - 1]))
        fail(Errc::invalid_config, "alpha_bar not strictly decreasing at t=" + std::to_string(t));
    if (!(alpha_bar[T] > 0.0)) fail(Errc::invalid_config, "alpha_bar[T] must stay positive");
  }
};

// Linearly spaced per-step betas; alpha_bar[t] = prod_{s<=t} (1 - beta_s).
inline NoiseSchedule make_linear_schedule(uint32_t T, double beta_start, double beta_end) {
  if (T < 1) fail(Errc::invalid_config, "T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    fail(Errc::invalid_config, "betas must satisfy 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.alpha_bar.resize(size_t(T) + 1);
  s.alpha_bar[0] = 1.0;
  double acc = 1.0;
  for (uint32_t t = 1; t <= T; ++t) {
    double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
    acc *= 1.0 - beta;
    s.alpha_bar[t] = acc;
  }
  s.validate();
  return s;
}

// Schedule whose terminal alpha_bar[T] hits a target value; beta_end found by
// bisection. Harness utility for the limit sweep of the inversion-gap check.
inline NoiseSchedule make_schedule_with_terminal_alpha(uint32_t T, double beta_start, double target) {
  if (!(target > 0.0) || !(target < 1.0)) fail(Errc::invalid_config, "target alpha out of (0,1)");
  double lo = beta_start, hi = 0.999;
  auto terminal = [&](double beta_end) {
    double acc = 1.0;
    for (uint32_t t = 1; t <= T; ++t)
      acc *= 1.0 - (beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1));
    return acc;
  };
  if (terminal(lo) < target) fail(Errc::invalid_config, "target alpha unreachable: too large");
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (terminal(mid) > target)
      lo = mid;
    else
      hi = mid;
  }
  return make_linear_schedule(T, beta_start, 0.5 * (lo + hi));
}

// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps
inline Tensor noise(const Tensor& z0, uint32_t t, const Tensor& eps, const NoiseSchedule& s) {
  if (z0.shape != eps.shape) fail(Errc::invalid_shape, "noise: z0/eps shape mismatch");
  double a = s.alpha(t);
  float ca = float(std::sqrt(a));
  float ce = float(std::sqrt(1.0 - a));
  Tensor out(z0.shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = ca * z0.data[i] + ce * eps.data[i];
  return out;
}

// Anomaly latent z_t with its mask and masked companion z_t^m, coupled by
// (1-m) o z_t = z_t^m and m o z_t^m = 0, both exact.
struct LatentPair {
  Tensor z_t;
  Tensor z_t_m;
  Tensor m;  // binary, defect = 1
  uint32_t t = 0;

  void check() const {
    if (!is_binary(m)) fail(Errc::invalid_mask, "LatentPair mask not binary");
    Tensor bg = apply_mask(z_t, m, /*keep_where_one=*/false);
    if (!bit_equal(bg, z_t_m)) fail(Errc::contract_violation, "(1-m) o z_t != z_t_m");
    Tensor inside = apply_mask(z_t_m, m, /*keep_where_one=*/true);
    for (float v : inside.data)
      if (v != 0.0f) fail(Errc::contract_violation, "m o z_t_m != 0");
  }
};

// Joint noising of z_0 and its background copy with one eps draw. The masked
// companion applies the same coefficients to masked operands, so the pair
// invariants hold bit-exactly.
inline LatentPair masked_noise(const Tensor& z0, const Tensor& m, uint32_t t, const Tensor& eps,
                               const NoiseSchedule& s) {
  if (m.shape.rank != 2) fail(Errc::invalid_mask, "mask must be rank-2");
  if (!is_binary(m)) fail(Errc::invalid_mask, "mask must be exactly 0/1");
  if (z0.shape != eps.shape) fail(Errc::invalid_shape, "masked_noise: z0/eps shape mismatch");
  LatentPair p;
  p.m = m;
  p.t = t;
  p.z_t = noise(z0, t, eps, s);
  p.z_t_m = noise(apply_mask(z0, m, false), t, apply_mask(eps, m, false), s);
  return p;
}

}  // namespace mdl
