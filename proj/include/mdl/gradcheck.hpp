// Central-difference validation of reverse-mode gradients. The step is
// snapped to a power of two so perturbed parameters stay exactly
// representable, and the realized step is measured rather than assumed.
#pragma once

#include <cmath>
#include <vector>

#include "mdl/autodiff.hpp"

namespace mdl {

// builder(p) must construct a scalar loss Var from a parameter Var p.
// Returns max over checked coordinates of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// coords: optional subset of coordinates; all when null.
template <class S, class Builder>
double grad_check(Builder&& builder, const TensorT<S>& params, double eps,
                  const std::vector<size_t>* coords = nullptr) {
  if (!(eps > 0)) fail(Errc::invalid_config, "grad_check eps must be positive");
  double step = std::exp2(std::floor(std::log2(eps)));  // snap to a power of two

  auto p = VarT<S>::param(params);
  VarT<S> loss = builder(p);
  if (loss.value().size() != 1) fail(Errc::invalid_shape, "grad_check wants a scalar loss");
  if (!std::isfinite(double(loss.value().data[0]))) fail(Errc::not_finite, "grad_check loss not finite");
  backward(loss);
  TensorT<S> analytic = p.grad();
  if (analytic.size() == 0) analytic = TensorT<S>(params.shape);

  auto eval = [&](const TensorT<S>& at) {
    VarT<S> l = builder(VarT<S>::constant(at));
    double v = double(l.value().data[0]);
    if (!std::isfinite(v)) fail(Errc::not_finite, "grad_check perturbed loss not finite");
    return v;
  };

  std::vector<size_t> all;
  if (!coords) {
    all.resize(params.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  }
  const std::vector<size_t>& cs = coords ? *coords : all;

  double worst = 0;
  TensorT<S> work = params;
  for (size_t i : cs) {
    S orig = params.data[i];
    work.data[i] = S(double(orig) + step);
    double hi_val = eval(work);
    S hi_param = work.data[i];
    work.data[i] = S(double(orig) - step);
    double lo_val = eval(work);
    S lo_param = work.data[i];
    work.data[i] = orig;
    double realized = double(hi_param) - double(lo_param);
    double numeric = (hi_val - lo_val) / realized;
    double a = double(analytic.data[i]);
    double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mdl
