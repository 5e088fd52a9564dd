// The conditional noise-prediction network. Two grid levels, each with a
// per-position feature block (time-modulated), one self-attention block and
// one masked cross-attention block. Context embeddings are learned; the
// defect/background split of Eq-style masked cross-attention keeps the two
// context groups confined to their mask regions.
//
// Branch contract: the full branch attends everywhere; the masked branch
// takes self-attention keys/values from background positions only, so its
// background output is a function of background content alone.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mdl/autodiff.hpp"
#include "mdl/schedule.hpp"

namespace mdl {

struct DenoiserConfig {
  uint32_t channels = 4, height = 16, width = 16;
  uint32_t width1 = 32, width2 = 64;  // feature widths of the two levels
  uint32_t d_c = 32;                  // context embedding width
  uint32_t tokens = 4;                // tokens per context block
  uint32_t temb_dim = 64;
  uint32_t T = 1000;  // extent of the time-embedding table

  void validate() const {
    if (channels == 0 || height < 2 || width < 2 || height % 2 || width % 2)
      fail(Errc::invalid_config, "latent grid must have even extents >= 2");
    if (width1 == 0 || width2 == 0 || d_c == 0 || tokens == 0 || temb_dim < 2 || temb_dim % 2)
      fail(Errc::invalid_config, "bad model dims");
  }
};

// Learned context embeddings. C_1 = [c_def, c_bg] and C_2 = [c_m, c_bg] are
// formed by reference inside the forward pass; c_bg is one block shared by
// both, never copied.
template <class S>
struct ContextSetT {
  TensorT<S> c_def, c_bg, c_m;  // each (tokens, d_c)

  template <class F>
  void visit(F&& fn) {
    fn("ctx.c_def", c_def);
    fn("ctx.c_bg", c_bg);
    fn("ctx.c_m", c_m);
  }
  template <class T>
  ContextSetT<T> cast() const {
    return {c_def.template cast<T>(), c_bg.template cast<T>(), c_m.template cast<T>()};
  }
};
using ContextSet = ContextSetT<float>;

template <class S>
struct DenoiserParamsT {
  DenoiserConfig cfg;
  TensorT<S> temb_table;  // (T+1, temb_dim), fixed sinusoidal, not trained

  struct Level {
    TensorT<S> t_w, t_b;    // time shift: temb -> width
    TensorT<S> t_gw, t_gb;  // time gate: temb -> width (gate = 1 + .)
    TensorT<S> res_a_w, res_a_b, res_b_w, res_b_b;
    TensorT<S> sa_q, sa_k, sa_v, sa_o;  // bias-free by construction
    TensorT<S> ca_q, ca_k, ca_v, ca_o;  // keys/values from context, bias-free
  };
  Level lv[2];
  TensorT<S> in_w, down_w, up_w;
  TensorT<S> dec_a_w, dec_a_b, dec_b_w, dec_b_b;
  TensorT<S> head_w;

  template <class F>
  void visit(F&& fn) {
    fn("in_w", in_w);
    for (int l = 0; l < 2; ++l) {
      std::string p = "lv" + std::to_string(l) + ".";
      auto& L = lv[l];
      fn(p + "t_w", L.t_w);
      fn(p + "t_b", L.t_b);
      fn(p + "t_gw", L.t_gw);
      fn(p + "t_gb", L.t_gb);
      fn(p + "res_a_w", L.res_a_w);
      fn(p + "res_a_b", L.res_a_b);
      fn(p + "res_b_w", L.res_b_w);
      fn(p + "res_b_b", L.res_b_b);
      fn(p + "sa_q", L.sa_q);
      fn(p + "sa_k", L.sa_k);
      fn(p + "sa_v", L.sa_v);
      fn(p + "sa_o", L.sa_o);
      fn(p + "ca_q", L.ca_q);
      fn(p + "ca_k", L.ca_k);
      fn(p + "ca_v", L.ca_v);
      fn(p + "ca_o", L.ca_o);
    }
    fn("down_w", down_w);
    fn("up_w", up_w);
    fn("dec_a_w", dec_a_w);
    fn("dec_a_b", dec_a_b);
    fn("dec_b_w", dec_b_w);
    fn("dec_b_b", dec_b_b);
    fn("head_w", head_w);
  }

  template <class T>
  DenoiserParamsT<T> cast() const {
    DenoiserParamsT<T> out;
    out.cfg = cfg;
    out.temb_table = temb_table.template cast<T>();
    const_cast<DenoiserParamsT<S>&>(*this).visit([&](const std::string& name, TensorT<S>& t) {
      out.visit_assign(name, t.template cast<T>());
    });
    return out;
  }
  void visit_assign(const std::string& name, TensorT<S> v) {
    visit([&](const std::string& n, TensorT<S>& t) {
      if (n == name) t = std::move(v);
    });
  }
};
using DenoiserParams = DenoiserParamsT<float>;

inline Tensor make_temb_table(uint32_t T, uint32_t dim) {
  Tensor t(Shape{T + 1, dim});
  uint32_t half = dim / 2;
  for (uint32_t s = 0; s <= T; ++s)
    for (uint32_t i = 0; i < half; ++i) {
      double w = std::exp(-std::log(10000.0) * double(i) / double(half > 1 ? half - 1 : 1));
      t.at(s, 2 * i) = float(std::sin(double(s) * w));
      t.at(s, 2 * i + 1) = float(std::cos(double(s) * w));
    }
  return t;
}

namespace init_detail {
inline Tensor normal_scaled(Rng& rng, Shape sh, double scale) {
  Tensor t = sample_normal(rng, sh);
  for (float& v : t.data) v = float(v * scale);
  return t;
}
}  // namespace init_detail

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  using init_detail::normal_scaled;
  DenoiserParams p;
  p.cfg = cfg;
  p.temb_table = make_temb_table(cfg.T, cfg.temb_dim);
  uint32_t widths[2] = {cfg.width1, cfg.width2};
  p.in_w = normal_scaled(rng, Shape{cfg.channels, cfg.width1}, 1.0 / std::sqrt(double(cfg.channels)));
  for (int l = 0; l < 2; ++l) {
    uint32_t w = widths[l];
    auto& L = p.lv[l];
    double sw = 1.0 / std::sqrt(double(w));
    double st = 1.0 / std::sqrt(double(cfg.temb_dim));
    L.t_w = normal_scaled(rng, Shape{cfg.temb_dim, w}, st);
    L.t_b = Tensor(Shape{w});
    L.t_gw = Tensor(Shape{cfg.temb_dim, w});  // gate starts at exactly 1
    L.t_gb = Tensor(Shape{w});
    L.res_a_w = normal_scaled(rng, Shape{w, w}, sw);
    L.res_a_b = Tensor(Shape{w});
    L.res_b_w = normal_scaled(rng, Shape{w, w}, sw * 0.5);
    L.res_b_b = Tensor(Shape{w});
    L.sa_q = normal_scaled(rng, Shape{w, w}, sw);
    L.sa_k = normal_scaled(rng, Shape{w, w}, sw);
    L.sa_v = normal_scaled(rng, Shape{w, w}, sw);
    L.sa_o = normal_scaled(rng, Shape{w, w}, sw * 0.1);
    L.ca_q = normal_scaled(rng, Shape{w, w}, sw);
    L.ca_k = normal_scaled(rng, Shape{cfg.d_c, w}, 1.0 / std::sqrt(double(cfg.d_c)));
    L.ca_v = normal_scaled(rng, Shape{cfg.d_c, w}, 1.0 / std::sqrt(double(cfg.d_c)));
    L.ca_o = normal_scaled(rng, Shape{w, w}, sw * 0.1);
  }
  p.down_w = normal_scaled(rng, Shape{cfg.width1, cfg.width2}, 1.0 / std::sqrt(double(cfg.width1)));
  p.up_w = normal_scaled(rng, Shape{cfg.width2, cfg.width1}, 1.0 / std::sqrt(double(cfg.width2)));
  p.dec_a_w = normal_scaled(rng, Shape{cfg.width1, cfg.width1}, 1.0 / std::sqrt(double(cfg.width1)));
  p.dec_a_b = Tensor(Shape{cfg.width1});
  p.dec_b_w = normal_scaled(rng, Shape{cfg.width1, cfg.width1}, 0.5 / std::sqrt(double(cfg.width1)));
  p.dec_b_b = Tensor(Shape{cfg.width1});
  p.head_w = normal_scaled(rng, Shape{cfg.width1, cfg.channels}, 0.02 / std::sqrt(double(cfg.width1)));
  return p;
}

inline ContextSet init_context(const DenoiserConfig& cfg, Rng& rng) {
  auto mk = [&] { return init_detail::normal_scaled(rng, Shape{cfg.tokens, cfg.d_c}, 0.5); };
  return ContextSet{mk(), mk(), mk()};
}

// Cross-attention maps captured during a forward pass. m_def rows are the
// raw per-group softmax (rows sum to 1); the mask is applied downstream.
struct AttentionRecord {
  enum class Branch { full, masked };
  struct Layer {
    int level = 0;
    uint32_t h = 0, w = 0;  // layer grid resolution
    Tensor m_def;           // (positions, tokens), pre-mask
    Tensor m_prime;         // layer-resolution binary mask
  };
  Branch branch = Branch::full;
  uint32_t t = 0;
  std::vector<Layer> layers;
};

// Var mirrors of every trainable tensor, either tracked params (training) or
// constants (inference).
template <class S>
struct DenoiserLeaves {
  DenoiserConfig cfg;
  VarT<S> temb_table;
  std::vector<std::pair<std::string, VarT<S>>> named;  // insertion order = visit order
  VarT<S> c_def, c_bg, c_m;

  VarT<S> get(const std::string& name) const {
    for (auto& [n, v] : named)
      if (n == name) return v;
    fail(Errc::invalid_config, "no leaf " + name);
  }
};

template <class S>
DenoiserLeaves<S> make_leaves(const DenoiserParamsT<S>& params, const ContextSetT<S>& ctx,
                              bool trainable) {
  DenoiserLeaves<S> L;
  L.cfg = params.cfg;
  L.temb_table = VarT<S>::constant(params.temb_table);
  auto lift = [&](const TensorT<S>& t) {
    return trainable ? VarT<S>::param(t) : VarT<S>::constant(t);
  };
  const_cast<DenoiserParamsT<S>&>(params).visit(
      [&](const std::string& name, TensorT<S>& t) { L.named.emplace_back(name, lift(t)); });
  L.c_def = lift(ctx.c_def);
  L.c_bg = lift(ctx.c_bg);
  L.c_m = lift(ctx.c_m);
  return L;
}

namespace den_detail {

template <class S>
struct LevelVars {
  VarT<S> t_w, t_b, t_gw, t_gb, res_a_w, res_a_b, res_b_w, res_b_b;
  VarT<S> sa_q, sa_k, sa_v, sa_o, ca_q, ca_k, ca_v, ca_o;
};

template <class S>
LevelVars<S> level_vars(const DenoiserLeaves<S>& L, int l) {
  std::string p = "lv" + std::to_string(l) + ".";
  return LevelVars<S>{L.get(p + "t_w"),    L.get(p + "t_b"),    L.get(p + "t_gw"),
                      L.get(p + "t_gb"),   L.get(p + "res_a_w"), L.get(p + "res_a_b"),
                      L.get(p + "res_b_w"), L.get(p + "res_b_b"), L.get(p + "sa_q"),
                      L.get(p + "sa_k"),   L.get(p + "sa_v"),   L.get(p + "sa_o"),
                      L.get(p + "ca_q"),   L.get(p + "ca_k"),   L.get(p + "ca_v"),
                      L.get(p + "ca_o")};
}

template <class S>
std::vector<uint32_t> background_rows(const TensorT<S>& m) {
  std::vector<uint32_t> idx;
  for (size_t i = 0; i < m.size(); ++i)
    if (m.data[i] == S(0)) idx.push_back(uint32_t(i));
  return idx;
}

// One level: time-modulated residual block, self-attention (optionally
// restricted to background keys/values), masked cross-attention.
template <class S>
VarT<S> level_block(VarT<S> h, const LevelVars<S>& lw, const VarT<S>& temb_row,
                    const TensorT<S>& m_level, bool restrict_bg, const VarT<S>& c_first,
                    const VarT<S>& c_bg, TensorT<S>* captured_m_def) {
  uint32_t width = h.value().shape[1];
  S tau = S(std::sqrt(double(width)));

  // residual feature block with time shift and gate
  VarT<S> t_shift = reshape(add_rowvec(matmul(temb_row, lw.t_w), lw.t_b), Shape{width});
  VarT<S> gate_lin = reshape(add_rowvec(matmul(temb_row, lw.t_gw), lw.t_gb), Shape{width});
  VarT<S> one = VarT<S>::constant(TensorT<S>::full(Shape{width}, S(1)));
  VarT<S> gate = add(one, gate_lin);
  VarT<S> a = silu(add_rowvec(add_rowvec(matmul(h, lw.res_a_w), lw.res_a_b), t_shift));
  VarT<S> mlp = add_rowvec(matmul(a, lw.res_b_w), lw.res_b_b);
  h = add(h, mul_rowvec(mlp, gate));

  // self-attention; masked branch keys/values come from background rows only
  VarT<S> q = matmul(h, lw.sa_q);
  VarT<S> k = matmul(h, lw.sa_k);
  VarT<S> v = matmul(h, lw.sa_v);
  if (restrict_bg) {
    std::vector<uint32_t> bg = background_rows(m_level);
    if (bg.empty()) fail(Errc::degenerate_mask, "mask covers every position at an attention level");
    k = gather_rows(k, bg);
    v = gather_rows(v, bg);
  }
  VarT<S> att = softmax_rows(scale(matmul_nt(q, k), S(1) / tau));
  h = add(h, matmul(matmul(att, v), lw.sa_o));

  // masked cross-attention: per-group softmax over tokens, blended by m'
  VarT<S> qc = matmul(h, lw.ca_q);
  VarT<S> k1 = matmul(c_first, lw.ca_k);
  VarT<S> v1 = matmul(c_first, lw.ca_v);
  VarT<S> kb = matmul(c_bg, lw.ca_k);
  VarT<S> vb = matmul(c_bg, lw.ca_v);
  VarT<S> m_first = softmax_rows(scale(matmul_nt(qc, k1), S(1) / tau));
  VarT<S> m_bg = softmax_rows(scale(matmul_nt(qc, kb), S(1) / tau));
  if (captured_m_def) *captured_m_def = m_first.value();
  VarT<S> attn = add(mask_rows(matmul(m_first, v1), m_level, true),
                     mask_rows(matmul(m_bg, vb), m_level, false));
  return add(h, matmul(attn, lw.ca_o));
}

}  // namespace den_detail

// Full two-level forward. masked_branch selects [c_m, c_bg] and the
// background restriction; otherwise [c_def, c_bg] with unrestricted
// self-attention. ctx_first_override lets tests drive the full-branch path
// with a different first context block.
template <class S>
VarT<S> denoiser_forward(const DenoiserLeaves<S>& L, const TensorT<S>& z, uint32_t t,
                         const Tensor& m_latent, bool masked_branch, AttentionRecord* rec = nullptr,
                         const VarT<S>* ctx_first_override = nullptr) {
  const DenoiserConfig& cfg = L.cfg;
  if (z.shape != Shape{cfg.channels, cfg.height, cfg.width})
    fail(Errc::invalid_shape, "latent shape " + z.shape.str() + " does not match model");
  if (m_latent.shape != Shape{cfg.height, cfg.width})
    fail(Errc::invalid_mask, "mask " + m_latent.shape.str() + " does not match latent resolution");
  if (!is_binary(m_latent)) fail(Errc::invalid_mask, "mask must be binarized");
  if (t > cfg.T) fail(Errc::out_of_domain, "step out of range");

  Tensor m1 = m_latent;
  Tensor m2 = resize_mask(m_latent, cfg.height / 2, cfg.width / 2);
  TensorT<S> m1s = m1.template cast<S>();
  TensorT<S> m2s = m2.template cast<S>();

  if (masked_branch) {
    Tensor zf = z.template cast<float>();
    Tensor inside = apply_mask(zf, m1, true);
    if (max_abs(inside) > 1e-6)
      fail(Errc::contract_violation, "masked branch input has defect-region content");
  }

  VarT<S> c_first = masked_branch ? L.c_m : (ctx_first_override ? *ctx_first_override : L.c_def);

  // time embedding row
  TensorT<S> trow(Shape{1, cfg.temb_dim});
  for (uint32_t i = 0; i < cfg.temb_dim; ++i) trow.data[i] = L.temb_table.value().at(t, i);
  VarT<S> temb_row = VarT<S>::constant(std::move(trow));

  auto lv0 = den_detail::level_vars(L, 0);
  auto lv1 = den_detail::level_vars(L, 1);

  if (rec) {
    rec->branch = masked_branch ? AttentionRecord::Branch::masked : AttentionRecord::Branch::full;
    rec->t = t;
    rec->layers.clear();
    rec->layers.resize(2);
    rec->layers[0].level = 0;
    rec->layers[0].h = cfg.height;
    rec->layers[0].w = cfg.width;
    rec->layers[0].m_prime = m1;
    rec->layers[1].level = 1;
    rec->layers[1].h = cfg.height / 2;
    rec->layers[1].w = cfg.width / 2;
    rec->layers[1].m_prime = m2;
  }
  TensorT<S> cap0, cap1;

  VarT<S> x = chw_to_nc(VarT<S>::constant(z));
  VarT<S> h1 = matmul(x, L.get("in_w"));
  h1 = den_detail::level_block(h1, lv0, temb_row, m1s, masked_branch, c_first, L.c_bg,
                               rec ? &cap0 : nullptr);

  VarT<S> g = chw_to_nc(avg_pool2(nc_to_chw(h1, cfg.height, cfg.width)));
  VarT<S> h2 = matmul(g, L.get("down_w"));
  h2 = den_detail::level_block(h2, lv1, temb_row, m2s, masked_branch, c_first, L.c_bg,
                               rec ? &cap1 : nullptr);

  VarT<S> u = chw_to_nc(upsample_nearest2(nc_to_chw(matmul(h2, L.get("up_w")), cfg.height / 2, cfg.width / 2)));
  VarT<S> h = add(h1, u);
  VarT<S> a = silu(add_rowvec(matmul(h, L.get("dec_a_w")), L.get("dec_a_b")));
  h = add(h, add_rowvec(matmul(a, L.get("dec_b_w")), L.get("dec_b_b")));
  VarT<S> eps = nc_to_chw(matmul(h, L.get("head_w")), cfg.height, cfg.width);

  if (rec) {
    rec->layers[0].m_def = cap0.template cast<float>();
    rec->layers[1].m_def = cap1.template cast<float>();
  }
  return eps;
}

// Composite predictor: m o eps_full(z_t, C_1) + (1-m) o eps_masked(z_t^m, C_2).
template <class S>
VarT<S> combined_eps_graph(const DenoiserLeaves<S>& L, const LatentPair& pair, uint32_t t,
                           AttentionRecord* rec = nullptr) {
  VarT<S> full = denoiser_forward(L, pair.z_t.template cast<S>(), t, pair.m, false, rec);
  VarT<S> masked = denoiser_forward(L, pair.z_t_m.template cast<S>(), t, pair.m, true);
  TensorT<S> ms = pair.m.template cast<S>();
  return add(mask_spatial(full, ms, true), mask_spatial(masked, ms, false));
}

// ---------------------------------------------------------------------------
// Plain-tensor convenience wrappers (no gradient tracking)
// ---------------------------------------------------------------------------

inline Tensor forward_full(const Tensor& z_t, uint32_t t, const ContextSet& ctx, const Tensor& m_prime,
                           const DenoiserParams& params, AttentionRecord* rec = nullptr) {
  auto leaves = make_leaves<float>(params, ctx, false);
  return denoiser_forward(leaves, z_t, t, m_prime, false, rec).value();
}

inline Tensor forward_masked(const Tensor& z_t_m, uint32_t t, const ContextSet& ctx,
                             const Tensor& m_prime, const DenoiserParams& params) {
  auto leaves = make_leaves<float>(params, ctx, false);
  return denoiser_forward(leaves, z_t_m, t, m_prime, true).value();
}

inline Tensor combined_eps(const LatentPair& pair, uint32_t t, const ContextSet& ctx,
                           const DenoiserParams& params) {
  pair.check();
  auto leaves = make_leaves<float>(params, ctx, false);
  return combined_eps_graph(leaves, pair, t).value();
}

}  // namespace mdl
