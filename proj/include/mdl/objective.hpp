// The disentanglement objective and its training loop. The loss is the
// single-norm composite form
//   || eps - m o eps_full(z_t,C_1) - (1-m) o eps_masked(z_t^m,C_2) ||^2
// normalized by element count; by mask disjointness it equals the
// matching-loss plus regularizer decomposition, which split_loss reports.
#pragma once

#include <string>
#include <vector>

#include "mdl/denoiser.hpp"
#include "mdl/rng.hpp"
#include "mdl/threading.hpp"

namespace mdl {

struct TrainConfig {
  double lr = 1e-3;
  uint32_t iters = 500;
  uint32_t batch = 8;
  uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) fail(Errc::invalid_config, "train.lr must be positive");
    if (iters < 1) fail(Errc::invalid_config, "train.iters must be >= 1");
    if (batch < 1) fail(Errc::invalid_config, "train.batch must be >= 1");
  }
};

template <class S>
VarT<S> disentanglement_loss_graph(const DenoiserLeaves<S>& L, const LatentPair& pair,
                                   const Tensor& eps, uint32_t t) {
  if (eps.shape != pair.z_t.shape) fail(Errc::invalid_shape, "eps shape mismatch");
  pair.check();
  VarT<S> combined = combined_eps_graph(L, pair, t);
  VarT<S> target = VarT<S>::constant(eps.template cast<S>());
  return mean_sq(sub(target, combined));
}

inline double disentanglement_loss(const LatentPair& pair, const Tensor& eps, uint32_t t,
                                   const ContextSet& ctx, const DenoiserParams& params) {
  auto leaves = make_leaves<float>(params, ctx, false);
  return double(disentanglement_loss_graph(leaves, pair, eps, t).value().data[0]);
}

// The two-term form of the same objective: (matching, regularizer), each
// normalized by the full element count so the pair sums to the composite.
struct LossSplit {
  double matching = 0;
  double regularizer = 0;
};

inline LossSplit split_loss(const LatentPair& pair, const Tensor& eps, uint32_t t,
                            const ContextSet& ctx, const DenoiserParams& params) {
  pair.check();
  auto leaves = make_leaves<float>(params, ctx, false);
  Tensor full = denoiser_forward(leaves, pair.z_t, t, pair.m, false).value();
  Tensor masked = denoiser_forward(leaves, pair.z_t_m, t, pair.m, true).value();
  size_t n = eps.size();
  Tensor rf = apply_mask(eps, pair.m, true);
  Tensor rfh = apply_mask(full, pair.m, true);
  Tensor rb = apply_mask(eps, pair.m, false);
  Tensor rbh = apply_mask(masked, pair.m, false);
  LossSplit out;
  for (size_t i = 0; i < n; ++i) {
    double dm = double(rf.data[i]) - double(rfh.data[i]);
    double db = double(rb.data[i]) - double(rbh.data[i]);
    out.matching += dm * dm;
    out.regularizer += db * db;
  }
  out.matching /= double(n);
  out.regularizer /= double(n);
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
class AdamT {
 public:
  AdamT(double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // Applies one update to `value` given `grad`; slot identifies the parameter.
  void step_param(size_t slot, TensorT<S>& value, const TensorT<S>& grad) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    if (m_[slot].size() != value.size()) {
      m_[slot] = TensorT<S>(value.shape);
      v_[slot] = TensorT<S>(value.shape);
    }
    double c1 = 1.0 - std::pow(b1_, double(t_ + 1));
    double c2 = 1.0 - std::pow(b2_, double(t_ + 1));
    for (size_t i = 0; i < value.size(); ++i) {
      double g = double(grad.size() ? grad.data[i] : S(0));
      double m = b1_ * double(m_[slot].data[i]) + (1 - b1_) * g;
      double v = b2_ * double(v_[slot].data[i]) + (1 - b2_) * g * g;
      m_[slot].data[i] = S(m);
      v_[slot].data[i] = S(v);
      value.data[i] = S(double(value.data[i]) - lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
    }
  }
  void next_step() { ++t_; }

 private:
  double lr_, b1_, b2_, eps_;
  uint64_t t_ = 0;
  std::vector<TensorT<S>> m_, v_;
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSample {
  Tensor z0;  // (C,H,W)
  Tensor m;   // (H,W) binary
};

// Algorithm: per iteration draw a batch, per element draw t ~ U{1..T} and
// eps, build the latent pair, backprop the loss, update theta and contexts
// jointly. Returns the per-iteration loss curve.
inline std::vector<double> train_generator(const std::vector<TrainSample>& dataset,
                                           const TrainConfig& cfg, const NoiseSchedule& sched,
                                           ContextSet& ctx, DenoiserParams& params) {
  cfg.validate();
  if (dataset.empty()) fail(Errc::invalid_config, "empty dataset");
  for (const auto& s : dataset)
    if (!is_binary(s.m)) fail(Errc::invalid_mask, "dataset mask not binary");

  Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng root(cfg.seed);
  std::vector<double> curve;
  curve.reserve(cfg.iters);

  for (uint32_t it = 0; it < cfg.iters; ++it) {
    auto leaves = make_leaves<float>(params, ctx, true);
    Rng iter_rng = root.split(it);

    // Build per-element graphs; parallel build is slot-addressed, the joint
    // backward pass is one deterministic traversal.
    std::vector<Var> losses(cfg.batch);
    std::vector<Rng> elem_rng(cfg.batch, Rng(0));
    std::vector<size_t> pick(cfg.batch);
    for (uint32_t b = 0; b < cfg.batch; ++b) {
      pick[b] = size_t(iter_rng.next_below(dataset.size()));
      elem_rng[b] = iter_rng.split(b + 1);
    }
    parallel_for(cfg.batch, [&](size_t b) {
      const TrainSample& s = dataset[pick[b]];
      Rng& r = elem_rng[b];
      uint32_t t = uint32_t(1 + r.next_below(sched.T));
      Tensor eps = sample_normal(r, s.z0.shape);
      LatentPair pair = masked_noise(s.z0, s.m, t, eps, sched);
      losses[b] = disentanglement_loss_graph(leaves, pair, eps, t);
    });

    Var loss = mean_of(losses);
    double lv = double(loss.value().data[0]);
    if (!std::isfinite(lv))
      fail(Errc::diverged_training, "loss not finite at iteration " + std::to_string(it));
    curve.push_back(lv);

    backward(loss);
    size_t slot = 0;
    for (auto& [name, var] : leaves.named) {
      (void)name;
      opt.step_param(slot++, var.mutable_value(), var.grad());
    }
    opt.step_param(slot++, leaves.c_def.mutable_value(), leaves.c_def.grad());
    opt.step_param(slot++, leaves.c_bg.mutable_value(), leaves.c_bg.grad());
    opt.step_param(slot++, leaves.c_m.mutable_value(), leaves.c_m.grad());
    opt.next_step();

    // copy updated leaf values back into the parameter structs
    size_t i = 0;
    params.visit([&](const std::string&, Tensor& t) { t = leaves.named[i++].second.value(); });
    ctx.c_def = leaves.c_def.value();
    ctx.c_bg = leaves.c_bg.value();
    ctx.c_m = leaves.c_m.value();
  }
  return curve;
}

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string s = "iteration,loss\n";
  char buf[64];
  for (size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, curve[i]);
    s += buf;
  }
  return s;
}

}  // namespace mdl
