// Reverse-mode automatic differentiation over TensorT values. A forward pass
// builds a graph of shared nodes; backward() walks it in reverse topological
// order and accumulates gradients. Ops whose inputs carry no gradient build
// plain value nodes, so inference loops do not grow a tape.
//
// The scalar type is a template parameter: production code runs float32,
// gradient checks instantiate the same kernels at double precision.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <unordered_set>
#include <vector>

#include "mdl/tensor.hpp"

namespace mdl {

template <class S>
struct NodeT {
  TensorT<S> value;
  TensorT<S> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  std::function<void(NodeT<S>&)> backprop;

  TensorT<S>& grad_buf() {
    if (grad.size() == 0) grad = TensorT<S>(value.shape);
    return grad;
  }
};

template <class S>
class VarT {
 public:
  VarT() = default;
  explicit VarT(std::shared_ptr<NodeT<S>> n) : n_(std::move(n)) {}

  static VarT constant(TensorT<S> v) {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(v);
    return VarT(std::move(n));
  }
  static VarT param(TensorT<S> v) {
    auto n = std::make_shared<NodeT<S>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return VarT(std::move(n));
  }

  const TensorT<S>& value() const { return n_->value; }
  TensorT<S>& mutable_value() { return n_->value; }
  const TensorT<S>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool valid() const { return bool(n_); }
  std::shared_ptr<NodeT<S>> node() const { return n_; }

 private:
  std::shared_ptr<NodeT<S>> n_;
};

using Var = VarT<float>;

namespace ad_detail {

template <class S>
std::shared_ptr<NodeT<S>> make_node(TensorT<S> value, std::vector<std::shared_ptr<NodeT<S>>> parents,
                                    std::function<void(NodeT<S>&)> backprop) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(value);
  bool track = false;
  for (auto& p : parents) track = track || p->requires_grad;
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

template <class S>
void acc(TensorT<S>& dst, const TensorT<S>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

// C = A(n,k) * B(k,m), optionally accumulating into C.
template <class S>
void gemm_nn(const S* a, const S* b, S* c, size_t n, size_t k, size_t m, bool accumulate) {
  for (size_t i = 0; i < n; ++i) {
    S* ci = c + i * m;
    if (!accumulate)
      for (size_t j = 0; j < m; ++j) ci[j] = S(0);
    const S* ai = a + i * k;
    for (size_t p = 0; p < k; ++p) {
      S av = ai[p];
      const S* bp = b + p * m;
      for (size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C = A(n,k) * B(m,k)^T
template <class S>
void gemm_nt(const S* a, const S* b, S* c, size_t n, size_t k, size_t m, bool accumulate) {
  for (size_t i = 0; i < n; ++i) {
    const S* ai = a + i * k;
    S* ci = c + i * m;
    for (size_t j = 0; j < m; ++j) {
      const S* bj = b + j * k;
      S s = accumulate ? ci[j] : S(0);
      for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

// C = A(k,n)^T * B(k,m)
template <class S>
void gemm_tn(const S* a, const S* b, S* c, size_t n, size_t k, size_t m, bool accumulate) {
  if (!accumulate)
    for (size_t i = 0; i < n * m; ++i) c[i] = S(0);
  for (size_t p = 0; p < k; ++p) {
    const S* ap = a + p * n;
    const S* bp = b + p * m;
    for (size_t i = 0; i < n; ++i) {
      S av = ap[i];
      S* ci = c + i * m;
      for (size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace ad_detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
VarT<S> add(const VarT<S>& a, const VarT<S>& b) {
  if (a.value().shape != b.value().shape) fail(Errc::invalid_shape, "add shape mismatch");
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn](NodeT<S>& n) {
    if (an->requires_grad) ad_detail::acc(an->grad_buf(), n.grad);
    if (bn->requires_grad) ad_detail::acc(bn->grad_buf(), n.grad);
  }));
}

template <class S>
VarT<S> sub(const VarT<S>& a, const VarT<S>& b) {
  if (a.value().shape != b.value().shape) fail(Errc::invalid_shape, "sub shape mismatch");
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn](NodeT<S>& n) {
    if (an->requires_grad) ad_detail::acc(an->grad_buf(), n.grad);
    if (bn->requires_grad) {
      TensorT<S>& g = bn->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g.data[i] -= n.grad.data[i];
    }
  }));
}

template <class S>
VarT<S> mul(const VarT<S>& a, const VarT<S>& b) {
  if (a.value().shape != b.value().shape) fail(Errc::invalid_shape, "mul shape mismatch");
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn](NodeT<S>& n) {
    if (an->requires_grad) {
      TensorT<S>& g = an->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] * bn->value.data[i];
    }
    if (bn->requires_grad) {
      TensorT<S>& g = bn->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] * an->value.data[i];
    }
  }));
}

template <class S>
VarT<S> scale(const VarT<S>& a, S c) {
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * c;
  auto an = a.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an}, [an, c](NodeT<S>& n) {
    TensorT<S>& g = an->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] * c;
  }));
}

template <class S>
VarT<S> silu(const VarT<S>& a) {
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) {
    S x = a.value().data[i];
    out.data[i] = x / (S(1) + std::exp(-x));
  }
  auto an = a.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an}, [an](NodeT<S>& n) {
    TensorT<S>& g = an->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) {
      S x = an->value.data[i];
      S s = S(1) / (S(1) + std::exp(-x));
      g.data[i] += n.grad.data[i] * (s * (S(1) + x * (S(1) - s)));
    }
  }));
}

template <class S>
VarT<S> sigmoid(const VarT<S>& a) {
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = S(1) / (S(1) + std::exp(-a.value().data[i]));
  auto an = a.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an}, [an](NodeT<S>& n) {
    TensorT<S>& g = an->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) {
      S y = n.value.data[i];
      g.data[i] += n.grad.data[i] * y * (S(1) - y);
    }
  }));
}

// Clamp with pass-through gradient strictly inside the interval.
template <class S>
VarT<S> clampv(const VarT<S>& a, S lo, S hi) {
  TensorT<S> out(a.value().shape);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = std::min(hi, std::max(lo, a.value().data[i]));
  auto an = a.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an}, [an, lo, hi](NodeT<S>& n) {
    TensorT<S>& g = an->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) {
      S x = an->value.data[i];
      if (x > lo && x < hi) g.data[i] += n.grad.data[i];
    }
  }));
}

// ---------------------------------------------------------------------------
// Broadcast and shape ops
// ---------------------------------------------------------------------------

// X(n,m) + v(m) broadcast over rows.
template <class S>
VarT<S> add_rowvec(const VarT<S>& x, const VarT<S>& v) {
  const auto& xs = x.value().shape;
  if (xs.rank != 2 || v.value().shape.rank != 1 || v.value().shape[0] != xs[1])
    fail(Errc::invalid_shape, "add_rowvec wants (n,m) and (m)");
  size_t n = xs[0], m = xs[1];
  TensorT<S> out(xs);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j) out.data[i * m + j] = x.value().data[i * m + j] + v.value().data[j];
  auto xn = x.node(), vn = v.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn, vn}, [xn, vn, n, m](NodeT<S>& nd) {
    if (xn->requires_grad) ad_detail::acc(xn->grad_buf(), nd.grad);
    if (vn->requires_grad) {
      TensorT<S>& g = vn->grad_buf();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) g.data[j] += nd.grad.data[i * m + j];
    }
  }));
}

// X(n,m) * v(m) broadcast over rows.
template <class S>
VarT<S> mul_rowvec(const VarT<S>& x, const VarT<S>& v) {
  const auto& xs = x.value().shape;
  if (xs.rank != 2 || v.value().shape.rank != 1 || v.value().shape[0] != xs[1])
    fail(Errc::invalid_shape, "mul_rowvec wants (n,m) and (m)");
  size_t n = xs[0], m = xs[1];
  TensorT<S> out(xs);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < m; ++j) out.data[i * m + j] = x.value().data[i * m + j] * v.value().data[j];
  auto xn = x.node(), vn = v.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn, vn}, [xn, vn, n, m](NodeT<S>& nd) {
    if (xn->requires_grad) {
      TensorT<S>& g = xn->grad_buf();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) g.data[i * m + j] += nd.grad.data[i * m + j] * vn->value.data[j];
    }
    if (vn->requires_grad) {
      TensorT<S>& g = vn->grad_buf();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) g.data[j] += nd.grad.data[i * m + j] * xn->value.data[i * m + j];
    }
  }));
}

template <class S>
VarT<S> reshape(const VarT<S>& x, Shape sh) {
  if (sh.numel() != x.value().size()) fail(Errc::invalid_shape, "reshape numel mismatch");
  TensorT<S> out(sh, x.value().data);
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g.data[i] += nd.grad.data[i];
  }));
}

// (C,H,W) -> (H*W, C); positions become rows.
template <class S>
VarT<S> chw_to_nc(const VarT<S>& x) {
  const auto& s = x.value().shape;
  if (s.rank != 3) fail(Errc::invalid_shape, "chw_to_nc wants rank-3");
  uint32_t c = s[0], h = s[1], w = s[2];
  size_t hw = size_t(h) * w;
  TensorT<S> out(Shape{uint32_t(hw), c});
  for (uint32_t ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) out.data[p * c + ch] = x.value().data[ch * hw + p];
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, c, hw](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (uint32_t ch = 0; ch < c; ++ch)
      for (size_t p = 0; p < hw; ++p) g.data[ch * hw + p] += nd.grad.data[p * c + ch];
  }));
}

// (H*W, C) -> (C,H,W)
template <class S>
VarT<S> nc_to_chw(const VarT<S>& x, uint32_t h, uint32_t w) {
  const auto& s = x.value().shape;
  if (s.rank != 2 || s[0] != h * w) fail(Errc::invalid_shape, "nc_to_chw extent mismatch");
  uint32_t c = s[1];
  size_t hw = size_t(h) * w;
  TensorT<S> out(Shape{c, h, w});
  for (uint32_t ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) out.data[ch * hw + p] = x.value().data[p * c + ch];
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, c, hw](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (uint32_t ch = 0; ch < c; ++ch)
      for (size_t p = 0; p < hw; ++p) g.data[p * c + ch] += nd.grad.data[ch * hw + p];
  }));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class S>
VarT<S> matmul(const VarT<S>& a, const VarT<S>& b) {
  const auto& as = a.value().shape;
  const auto& bs = b.value().shape;
  if (as.rank != 2 || bs.rank != 2 || as[1] != bs[0]) fail(Errc::invalid_shape, "matmul shapes");
  size_t n = as[0], k = as[1], m = bs[1];
  TensorT<S> out(Shape{uint32_t(n), uint32_t(m)});
  ad_detail::gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), n, k, m, false);
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn, n, k, m](NodeT<S>& nd) {
    if (an->requires_grad)  // dA = dC * B^T
      ad_detail::gemm_nt(nd.grad.ptr(), bn->value.ptr(), an->grad_buf().ptr(), n, m, k, true);
    if (bn->requires_grad)  // dB = A^T * dC
      ad_detail::gemm_tn(an->value.ptr(), nd.grad.ptr(), bn->grad_buf().ptr(), k, n, m, true);
  }));
}

// A(n,k) * B(m,k)^T -> (n,m); the attention-logit product.
template <class S>
VarT<S> matmul_nt(const VarT<S>& a, const VarT<S>& b) {
  const auto& as = a.value().shape;
  const auto& bs = b.value().shape;
  if (as.rank != 2 || bs.rank != 2 || as[1] != bs[1]) fail(Errc::invalid_shape, "matmul_nt shapes");
  size_t n = as[0], k = as[1], m = bs[0];
  TensorT<S> out(Shape{uint32_t(n), uint32_t(m)});
  ad_detail::gemm_nt(a.value().ptr(), b.value().ptr(), out.ptr(), n, k, m, false);
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn, n, k, m](NodeT<S>& nd) {
    if (an->requires_grad)  // dA = dC * B
      ad_detail::gemm_nn(nd.grad.ptr(), bn->value.ptr(), an->grad_buf().ptr(), n, m, k, true);
    if (bn->requires_grad)  // dB = dC^T * A
      ad_detail::gemm_tn(nd.grad.ptr(), an->value.ptr(), bn->grad_buf().ptr(), m, n, k, true);
  }));
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <class S>
VarT<S> softmax_rows(const VarT<S>& x) {
  const auto& s = x.value().shape;
  if (s.rank != 2) fail(Errc::invalid_shape, "softmax_rows wants rank-2");
  size_t n = s[0], m = s[1];
  TensorT<S> out(s);
  for (size_t i = 0; i < n; ++i) {
    const S* xi = x.value().ptr() + i * m;
    S* oi = out.ptr() + i * m;
    S mx = xi[0];
    for (size_t j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
    double z = 0;
    for (size_t j = 0; j < m; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      z += double(oi[j]);
    }
    S inv = S(1.0 / z);
    for (size_t j = 0; j < m; ++j) oi[j] *= inv;
  }
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, n, m](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t i = 0; i < n; ++i) {
      const S* y = nd.value.ptr() + i * m;
      const S* dy = nd.grad.ptr() + i * m;
      double dot = 0;
      for (size_t j = 0; j < m; ++j) dot += double(dy[j]) * double(y[j]);
      for (size_t j = 0; j < m; ++j) g.data[i * m + j] += y[j] * (dy[j] - S(dot));
    }
  }));
}

// ---------------------------------------------------------------------------
// Masking and row selection
// ---------------------------------------------------------------------------

// Row mask over features X(n,d): rows where mask[i]==1 are kept when
// keep_where_one, dropped (set to +0) otherwise. Select semantics, so kept
// rows are copied bit-for-bit.
template <class S>
VarT<S> mask_rows(const VarT<S>& x, const TensorT<S>& mask, bool keep_where_one) {
  const auto& s = x.value().shape;
  if (s.rank != 2 || mask.size() != s[0]) fail(Errc::invalid_mask, "mask_rows extent mismatch");
  size_t n = s[0], d = s[1];
  TensorT<S> out(s);
  std::vector<char> keep(n);
  for (size_t i = 0; i < n; ++i) keep[i] = ((mask.data[i] != S(0)) == keep_where_one);
  for (size_t i = 0; i < n; ++i) {
    const S* xi = x.value().ptr() + i * d;
    S* oi = out.ptr() + i * d;
    if (keep[i])
      std::copy(xi, xi + d, oi);
    else
      std::fill(oi, oi + d, S(0));
  }
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, keep, d](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t i = 0; i < keep.size(); ++i)
      if (keep[i])
        for (size_t j = 0; j < d; ++j) g.data[i * d + j] += nd.grad.data[i * d + j];
  }));
}

// Spatial mask (H,W) applied to x of trailing extents (H,W); broadcasts over
// leading dims. Same select semantics as apply_mask.
template <class S>
VarT<S> mask_spatial(const VarT<S>& x, const TensorT<S>& m, bool keep_where_one) {
  TensorT<S> out = apply_mask(x.value(), m, keep_where_one);
  auto xn = x.node();
  size_t hw = m.size();
  std::vector<char> keep(hw);
  for (size_t i = 0; i < hw; ++i) keep[i] = ((m.data[i] != S(0)) == keep_where_one);
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, keep, hw](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    size_t planes = g.size() / hw;
    for (size_t p = 0; p < planes; ++p)
      for (size_t i = 0; i < hw; ++i)
        if (keep[i]) g.data[p * hw + i] += nd.grad.data[p * hw + i];
  }));
}

// Rows of X(n,d) at the given indices, in order.
template <class S>
VarT<S> gather_rows(const VarT<S>& x, std::vector<uint32_t> idx) {
  const auto& s = x.value().shape;
  if (s.rank != 2) fail(Errc::invalid_shape, "gather_rows wants rank-2");
  if (idx.empty()) fail(Errc::degenerate_mask, "gather_rows with no rows");
  size_t d = s[1];
  TensorT<S> out(Shape{uint32_t(idx.size()), uint32_t(d)});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s[0]) fail(Errc::invalid_shape, "gather_rows index out of range");
    std::copy(x.value().ptr() + idx[i] * d, x.value().ptr() + (idx[i] + 1) * d, out.ptr() + i * d);
  }
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, idx, d](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t i = 0; i < idx.size(); ++i)
      for (size_t j = 0; j < d; ++j) g.data[idx[i] * d + j] += nd.grad.data[i * d + j];
  }));
}

// ---------------------------------------------------------------------------
// Spatial ops (trailing (H,W) dims; rank 3 or 4)
// ---------------------------------------------------------------------------

template <class S>
VarT<S> avg_pool2(const VarT<S>& x) {
  const auto& s = x.value().shape;
  if (s.rank < 3) fail(Errc::invalid_shape, "avg_pool2 wants rank>=3");
  uint32_t h = s[s.rank - 2], w = s[s.rank - 1];
  if (h % 2 || w % 2) fail(Errc::invalid_shape, "avg_pool2 wants even extents");
  uint32_t oh = h / 2, ow = w / 2;
  Shape os = s;
  os.d[s.rank - 2] = oh;
  os.d[s.rank - 1] = ow;
  size_t planes = x.value().size() / (size_t(h) * w);
  TensorT<S> out(os);
  for (size_t p = 0; p < planes; ++p) {
    const S* xi = x.value().ptr() + p * h * w;
    S* oi = out.ptr() + p * size_t(oh) * ow;
    for (uint32_t y = 0; y < oh; ++y)
      for (uint32_t xx = 0; xx < ow; ++xx)
        oi[y * ow + xx] = (xi[(2 * y) * w + 2 * xx] + xi[(2 * y) * w + 2 * xx + 1] +
                           xi[(2 * y + 1) * w + 2 * xx] + xi[(2 * y + 1) * w + 2 * xx + 1]) *
                          S(0.25);
  }
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, planes, h, w, oh, ow](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t p = 0; p < planes; ++p) {
      S* gi = g.ptr() + p * h * w;
      const S* di = nd.grad.ptr() + p * size_t(oh) * ow;
      for (uint32_t y = 0; y < oh; ++y)
        for (uint32_t xx = 0; xx < ow; ++xx) {
          S v = di[y * ow + xx] * S(0.25);
          gi[(2 * y) * w + 2 * xx] += v;
          gi[(2 * y) * w + 2 * xx + 1] += v;
          gi[(2 * y + 1) * w + 2 * xx] += v;
          gi[(2 * y + 1) * w + 2 * xx + 1] += v;
        }
    }
  }));
}

template <class S>
VarT<S> upsample_nearest2(const VarT<S>& x) {
  const auto& s = x.value().shape;
  if (s.rank < 3) fail(Errc::invalid_shape, "upsample_nearest2 wants rank>=3");
  uint32_t h = s[s.rank - 2], w = s[s.rank - 1];
  uint32_t oh = h * 2, ow = w * 2;
  Shape os = s;
  os.d[s.rank - 2] = oh;
  os.d[s.rank - 1] = ow;
  size_t planes = x.value().size() / (size_t(h) * w);
  TensorT<S> out(os);
  for (size_t p = 0; p < planes; ++p) {
    const S* xi = x.value().ptr() + p * h * w;
    S* oi = out.ptr() + p * size_t(oh) * ow;
    for (uint32_t y = 0; y < oh; ++y)
      for (uint32_t xx = 0; xx < ow; ++xx) oi[y * ow + xx] = xi[(y / 2) * w + xx / 2];
  }
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, planes, h, w, oh, ow](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    for (size_t p = 0; p < planes; ++p) {
      S* gi = g.ptr() + p * h * w;
      const S* di = nd.grad.ptr() + p * size_t(oh) * ow;
      for (uint32_t y = 0; y < oh; ++y)
        for (uint32_t xx = 0; xx < ow; ++xx) gi[(y / 2) * w + xx / 2] += di[y * ow + xx];
    }
  }));
}

// ---------------------------------------------------------------------------
// Convolutions over (N,C,H,W)
// ---------------------------------------------------------------------------

template <class S>
VarT<S> conv3x3(const VarT<S>& x, const VarT<S>& weight, const VarT<S>& bias) {
  const auto& xs = x.value().shape;
  const auto& ws = weight.value().shape;
  if (xs.rank != 4 || ws.rank != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1])
    fail(Errc::invalid_shape, "conv3x3 shapes " + xs.str() + " vs " + ws.str());
  uint32_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3], co = ws[0];
  if (bias.value().shape.rank != 1 || bias.value().shape[0] != co)
    fail(Errc::invalid_shape, "conv3x3 bias shape");
  TensorT<S> out(Shape{n, co, h, w});
  const S* W = weight.value().ptr();
  size_t hw = size_t(h) * w;
  for (uint32_t b = 0; b < n; ++b) {
    const S* xb = x.value().ptr() + size_t(b) * ci * hw;
    S* ob = out.ptr() + size_t(b) * co * hw;
    for (uint32_t oc = 0; oc < co; ++oc) {
      S* op = ob + size_t(oc) * hw;
      S bv = bias.value().data[oc];
      for (size_t i = 0; i < hw; ++i) op[i] = bv;
      for (uint32_t ic = 0; ic < ci; ++ic) {
        const S* xp = xb + size_t(ic) * hw;
        const S* wk = W + ((size_t(oc) * ci + ic) * 9);
        for (int ky = -1; ky <= 1; ++ky)
          for (int kx = -1; kx <= 1; ++kx) {
            S wv = wk[(ky + 1) * 3 + (kx + 1)];
            uint32_t y0 = ky < 0 ? 1 : 0, y1 = ky > 0 ? h - 1 : h;
            uint32_t x0 = kx < 0 ? 1 : 0, x1 = kx > 0 ? w - 1 : w;
            for (uint32_t y = y0; y < y1; ++y) {
              const S* row = xp + size_t(y + ky) * w + kx;
              S* orow = op + size_t(y) * w;
              for (uint32_t xx = x0; xx < x1; ++xx) orow[xx] += wv * row[xx];
            }
          }
      }
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return VarT<S>(ad_detail::make_node<S>(
      std::move(out), {xn, wn, bn}, [xn, wn, bn, n, ci, co, h, w](NodeT<S>& nd) {
        size_t hw = size_t(h) * w;
        const S* W = wn->value.ptr();
        if (bn->requires_grad) {
          TensorT<S>& gb = bn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t oc = 0; oc < co; ++oc) {
              const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
              S s = 0;
              for (size_t i = 0; i < hw; ++i) s += dp[i];
              gb.data[oc] += s;
            }
        }
        if (wn->requires_grad) {
          TensorT<S>& gw = wn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t oc = 0; oc < co; ++oc) {
              const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
              for (uint32_t ic = 0; ic < ci; ++ic) {
                const S* xp = xn->value.ptr() + (size_t(b) * ci + ic) * hw;
                S* gk = gw.ptr() + ((size_t(oc) * ci + ic) * 9);
                for (int ky = -1; ky <= 1; ++ky)
                  for (int kx = -1; kx <= 1; ++kx) {
                    uint32_t y0 = ky < 0 ? 1 : 0, y1 = ky > 0 ? h - 1 : h;
                    uint32_t x0 = kx < 0 ? 1 : 0, x1 = kx > 0 ? w - 1 : w;
                    S s = 0;
                    for (uint32_t y = y0; y < y1; ++y) {
                      const S* xrow = xp + size_t(y + ky) * w + kx;
                      const S* drow = dp + size_t(y) * w;
                      for (uint32_t xx = x0; xx < x1; ++xx) s += xrow[xx] * drow[xx];
                    }
                    gk[(ky + 1) * 3 + (kx + 1)] += s;
                  }
              }
            }
        }
        if (xn->requires_grad) {
          TensorT<S>& gx = xn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t oc = 0; oc < co; ++oc) {
              const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
              for (uint32_t ic = 0; ic < ci; ++ic) {
                S* gp = gx.ptr() + (size_t(b) * ci + ic) * hw;
                const S* wk = W + ((size_t(oc) * ci + ic) * 9);
                for (int ky = -1; ky <= 1; ++ky)
                  for (int kx = -1; kx <= 1; ++kx) {
                    S wv = wk[(ky + 1) * 3 + (kx + 1)];
                    uint32_t y0 = ky < 0 ? 1 : 0, y1 = ky > 0 ? h - 1 : h;
                    uint32_t x0 = kx < 0 ? 1 : 0, x1 = kx > 0 ? w - 1 : w;
                    for (uint32_t y = y0; y < y1; ++y) {
                      S* grow = gp + size_t(y + ky) * w + kx;
                      const S* drow = dp + size_t(y) * w;
                      for (uint32_t xx = x0; xx < x1; ++xx) grow[xx] += wv * drow[xx];
                    }
                  }
              }
            }
        }
      }));
}

template <class S>
VarT<S> conv1x1(const VarT<S>& x, const VarT<S>& weight, const VarT<S>& bias) {
  const auto& xs = x.value().shape;
  const auto& ws = weight.value().shape;
  if (xs.rank != 4 || ws.rank != 2 || ws[1] != xs[1]) fail(Errc::invalid_shape, "conv1x1 shapes");
  uint32_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3], co = ws[0];
  size_t hw = size_t(h) * w;
  TensorT<S> out(Shape{n, co, h, w});
  for (uint32_t b = 0; b < n; ++b) {
    const S* xb = x.value().ptr() + size_t(b) * ci * hw;
    S* ob = out.ptr() + size_t(b) * co * hw;
    for (uint32_t oc = 0; oc < co; ++oc) {
      S* op = ob + size_t(oc) * hw;
      S bv = bias.value().data[oc];
      for (size_t i = 0; i < hw; ++i) op[i] = bv;
      for (uint32_t ic = 0; ic < ci; ++ic) {
        S wv = weight.value().at(oc, ic);
        const S* xp = xb + size_t(ic) * hw;
        for (size_t i = 0; i < hw; ++i) op[i] += wv * xp[i];
      }
    }
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return VarT<S>(ad_detail::make_node<S>(
      std::move(out), {xn, wn, bn}, [xn, wn, bn, n, ci, co, hw](NodeT<S>& nd) {
        if (bn->requires_grad) {
          TensorT<S>& gb = bn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t oc = 0; oc < co; ++oc) {
              const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
              S s = 0;
              for (size_t i = 0; i < hw; ++i) s += dp[i];
              gb.data[oc] += s;
            }
        }
        if (wn->requires_grad) {
          TensorT<S>& gw = wn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t oc = 0; oc < co; ++oc) {
              const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
              for (uint32_t ic = 0; ic < ci; ++ic) {
                const S* xp = xn->value.ptr() + (size_t(b) * ci + ic) * hw;
                S s = 0;
                for (size_t i = 0; i < hw; ++i) s += dp[i] * xp[i];
                gw.data[size_t(oc) * ci + ic] += s;
              }
            }
        }
        if (xn->requires_grad) {
          TensorT<S>& gx = xn->grad_buf();
          for (uint32_t b = 0; b < n; ++b)
            for (uint32_t ic = 0; ic < ci; ++ic) {
              S* gp = gx.ptr() + (size_t(b) * ci + ic) * hw;
              for (uint32_t oc = 0; oc < co; ++oc) {
                S wv = wn->value.data[size_t(oc) * ci + ic];
                const S* dp = nd.grad.ptr() + (size_t(b) * co + oc) * hw;
                for (size_t i = 0; i < hw; ++i) gp[i] += wv * dp[i];
              }
            }
        }
      }));
}

template <class S>
VarT<S> concat_channels(const VarT<S>& a, const VarT<S>& b) {
  const auto& as = a.value().shape;
  const auto& bs = b.value().shape;
  if (as.rank != 4 || bs.rank != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    fail(Errc::invalid_shape, "concat_channels shapes");
  uint32_t n = as[0], ca = as[1], cb = bs[1], h = as[2], w = as[3];
  size_t hw = size_t(h) * w;
  TensorT<S> out(Shape{n, ca + cb, h, w});
  for (uint32_t i = 0; i < n; ++i) {
    std::copy(a.value().ptr() + size_t(i) * ca * hw, a.value().ptr() + size_t(i + 1) * ca * hw,
              out.ptr() + size_t(i) * (ca + cb) * hw);
    std::copy(b.value().ptr() + size_t(i) * cb * hw, b.value().ptr() + size_t(i + 1) * cb * hw,
              out.ptr() + size_t(i) * (ca + cb) * hw + size_t(ca) * hw);
  }
  auto an = a.node(), bn = b.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {an, bn}, [an, bn, n, ca, cb, hw](NodeT<S>& nd) {
    for (uint32_t i = 0; i < n; ++i) {
      const S* d = nd.grad.ptr() + size_t(i) * (ca + cb) * hw;
      if (an->requires_grad) {
        TensorT<S>& g = an->grad_buf();
        for (size_t j = 0; j < size_t(ca) * hw; ++j) g.data[size_t(i) * ca * hw + j] += d[j];
      }
      if (bn->requires_grad) {
        TensorT<S>& g = bn->grad_buf();
        for (size_t j = 0; j < size_t(cb) * hw; ++j) g.data[size_t(i) * cb * hw + j] += d[size_t(ca) * hw + j];
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

// Mean of squared entries -> scalar. Accumulates in double.
template <class S>
VarT<S> mean_sq(const VarT<S>& x) {
  double s = 0;
  for (S v : x.value().data) s += double(v) * double(v);
  size_t n = x.value().size();
  TensorT<S> out = TensorT<S>::scalar(S(s / double(n)));
  auto xn = x.node();
  return VarT<S>(ad_detail::make_node<S>(std::move(out), {xn}, [xn, n](NodeT<S>& nd) {
    TensorT<S>& g = xn->grad_buf();
    S c = nd.grad.data[0] * S(2.0 / double(n));
    for (size_t i = 0; i < g.size(); ++i) g.data[i] += c * xn->value.data[i];
  }));
}

// Arithmetic mean of scalar vars.
template <class S>
VarT<S> mean_of(const std::vector<VarT<S>>& xs) {
  if (xs.empty()) fail(Errc::invalid_shape, "mean_of empty");
  double s = 0;
  std::vector<std::shared_ptr<NodeT<S>>> parents;
  parents.reserve(xs.size());
  for (const auto& v : xs) {
    s += double(v.value().data[0]);
    parents.push_back(v.node());
  }
  size_t n = xs.size();
  TensorT<S> out = TensorT<S>::scalar(S(s / double(n)));
  auto ps = parents;
  return VarT<S>(ad_detail::make_node<S>(std::move(out), std::move(parents), [ps, n](NodeT<S>& nd) {
    S c = nd.grad.data[0] / S(double(n));
    for (auto& p : ps)
      if (p->requires_grad) p->grad_buf().data[0] += c;
  }));
}

template <class S>
VarT<S> add_scalars(const VarT<S>& a, const VarT<S>& b) {
  return add(a, b);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <class S>
void backward(const VarT<S>& loss) {
  if (loss.value().size() != 1) fail(Errc::invalid_shape, "backward wants a scalar");
  if (!loss.node()->requires_grad) return;
  // Iterative topological order.
  std::vector<NodeT<S>*> order;
  std::unordered_set<NodeT<S>*> seen;
  std::vector<std::pair<NodeT<S>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<S>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buf().data[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* node = *it;
    if (node->backprop && node->grad.size() != 0) node->backprop(*node);
  }
}

// Named parameter registry: the operation graph records into Var nodes, this
// maps parameter identifiers to their accumulated gradients.
template <class S>
class GradContextT {
 public:
  VarT<S> param(const std::string& name, TensorT<S> value) {
    auto v = VarT<S>::param(std::move(value));
    params_.emplace(name, v);
    return v;
  }
  void backward_from(const VarT<S>& loss) { backward(loss); }
  const TensorT<S>& grad(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail(Errc::invalid_config, "unknown parameter " + name);
    return it->second.grad();
  }
  const std::map<std::string, VarT<S>>& params() const { return params_; }

 private:
  std::map<std::string, VarT<S>> params_;
};

using GradContext = GradContextT<float>;

}  // namespace mdl
