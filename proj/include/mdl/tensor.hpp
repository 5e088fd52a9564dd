// Dense rank<=4 float tensors with shape metadata. The universal value type
// of the pipeline: latents, masks, noise, attention maps, parameters.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdl {

enum class Errc {
  invalid_shape,
  invalid_config,
  invalid_mask,
  contract_violation,
  degenerate_mask,
  missing_attention,
  diverged_training,
  out_of_domain,
  undefined_metric,
  not_finite,
  io_error,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_shape: return "invalid-shape";
    case Errc::invalid_config: return "invalid-config";
    case Errc::invalid_mask: return "invalid-mask";
    case Errc::contract_violation: return "contract-violation";
    case Errc::degenerate_mask: return "degenerate-mask";
    case Errc::missing_attention: return "missing-attention";
    case Errc::diverged_training: return "diverged-training";
    case Errc::out_of_domain: return "out-of-domain";
    case Errc::undefined_metric: return "undefined-metric";
    case Errc::not_finite: return "not-finite";
    case Errc::io_error: return "io-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

// Shape of up to four positive extents, (batch, channel, height, width) by
// convention. Row-major layout.
struct Shape {
  uint8_t rank = 0;
  std::array<uint32_t, 4> d{1, 1, 1, 1};

  Shape() = default;
  Shape(std::initializer_list<uint32_t> dims) {
    if (dims.size() > 4) fail(Errc::invalid_shape, "rank > 4");
    rank = static_cast<uint8_t>(dims.size());
    size_t i = 0;
    for (uint32_t e : dims) d[i++] = e;
    for (uint32_t e : *this) {
      if (e == 0) fail(Errc::invalid_shape, "zero extent in " + str());
    }
  }

  const uint32_t* begin() const { return d.data(); }
  const uint32_t* end() const { return d.data() + rank; }
  uint32_t operator[](size_t i) const { return d[i]; }

  size_t numel() const {
    size_t n = 1;
    for (uint8_t i = 0; i < rank; ++i) n *= d[i];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (uint8_t i = 0; i < rank; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (uint8_t i = 0; i < rank; ++i) s += (i ? "," : "") + std::to_string(d[i]);
    return s + ")";
  }
};

template <class S>
struct TensorT {
  Shape shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(Shape sh) : shape(sh), data(sh.numel(), S(0)) {}
  TensorT(Shape sh, std::vector<S> values) : shape(sh), data(std::move(values)) {
    if (data.size() != shape.numel())
      fail(Errc::invalid_shape, "data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape.str());
  }

  static TensorT zeros(Shape sh) { return TensorT(sh); }
  static TensorT full(Shape sh, S v) {
    TensorT t(sh);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static TensorT scalar(S v) { return TensorT(Shape{1}, {v}); }

  size_t size() const { return data.size(); }
  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  // rank-2 accessors
  S& at(uint32_t i, uint32_t j) { return data[size_t(i) * shape[1] + j]; }
  S at(uint32_t i, uint32_t j) const { return data[size_t(i) * shape[1] + j]; }
  // rank-3 (channel, row, col)
  S& at(uint32_t c, uint32_t y, uint32_t x) {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }
  S at(uint32_t c, uint32_t y, uint32_t x) const {
    return data[(size_t(c) * shape[1] + y) * shape[2] + x];
  }
  // rank-4 (batch, channel, row, col)
  S& at(uint32_t n, uint32_t c, uint32_t y, uint32_t x) {
    return data[((size_t(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  S at(uint32_t n, uint32_t c, uint32_t y, uint32_t x) const {
    return data[((size_t(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  TensorT reshaped(Shape sh) const {
    if (sh.numel() != size()) fail(Errc::invalid_shape, "reshape numel mismatch");
    return TensorT(sh, data);
  }

  template <class T>
  TensorT<T> cast() const {
    TensorT<T> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using Tensor = TensorT<float>;

template <class S>
double max_abs(const TensorT<S>& a) {
  double m = 0;
  for (S v : a.data) m = std::max(m, std::abs(double(v)));
  return m;
}

template <class S>
double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape != b.shape) fail(Errc::invalid_shape, "max_abs_diff shape mismatch");
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

template <class S>
bool bit_equal(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape != b.shape) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

// True iff every entry is exactly 0 or exactly 1.
template <class S>
bool is_binary(const TensorT<S>& m) {
  for (S v : m.data)
    if (v != S(0) && v != S(1)) return false;
  return true;
}

// m (H,W) applied to x, which is (H,W), (C,H,W) or (N,C,H,W); the mask
// broadcasts over leading dims. Select semantics: kept entries are copied
// bit-for-bit, dropped entries become +0.
template <class S>
TensorT<S> apply_mask(const TensorT<S>& x, const TensorT<S>& m, bool keep_where_one) {
  if (m.shape.rank != 2) fail(Errc::invalid_mask, "mask must be rank-2, got " + m.shape.str());
  size_t hw = m.size();
  if (x.size() % hw != 0 || x.shape[x.shape.rank - 1] != m.shape[1] ||
      x.shape[x.shape.rank - 2] != m.shape[0])
    fail(Errc::invalid_mask, "mask " + m.shape.str() + " does not tile " + x.shape.str());
  TensorT<S> out(x.shape);
  size_t planes = x.size() / hw;
  for (size_t p = 0; p < planes; ++p) {
    const S* xi = x.ptr() + p * hw;
    S* oi = out.ptr() + p * hw;
    for (size_t i = 0; i < hw; ++i)
      oi[i] = ((m.data[i] != S(0)) == keep_where_one) ? xi[i] : S(0);
  }
  return out;
}

// Corner-aligned bilinear interpolation of a rank-2 map.
// Sample coordinates: sy = i*(H-1)/(oh-1), sx = j*(W-1)/(ow-1) (0 when the
// output extent is 1); the value is the usual 4-neighbour weighted average
//   (1-fy)(1-fx) v[y0,x0] + (1-fy)fx v[y0,x1] + fy(1-fx) v[y1,x0] + fy fx v[y1,x1].
template <class S>
TensorT<S> bilinear_resize(const TensorT<S>& x, uint32_t oh, uint32_t ow) {
  if (x.shape.rank != 2) fail(Errc::invalid_shape, "bilinear_resize wants rank-2, got " + x.shape.str());
  if (oh == 0 || ow == 0) fail(Errc::invalid_shape, "bilinear_resize target extent is zero");
  uint32_t h = x.shape[0], w = x.shape[1];
  if (oh == h && ow == w) return x;  // identity resize returns the input exactly
  TensorT<S> out(Shape{oh, ow});
  for (uint32_t i = 0; i < oh; ++i) {
    double sy = (oh == 1) ? 0.0 : double(i) * double(h - 1) / double(oh - 1);
    uint32_t y0 = uint32_t(sy);
    if (y0 >= h - 1 && h > 1) y0 = h - 2;
    uint32_t y1 = (h == 1) ? 0 : y0 + 1;
    double fy = sy - double(y0);
    for (uint32_t j = 0; j < ow; ++j) {
      double sx = (ow == 1) ? 0.0 : double(j) * double(w - 1) / double(ow - 1);
      uint32_t x0 = uint32_t(sx);
      if (x0 >= w - 1 && w > 1) x0 = w - 2;
      uint32_t x1 = (w == 1) ? 0 : x0 + 1;
      double fx = sx - double(x0);
      double v = (1 - fy) * (1 - fx) * double(x.at(y0, x0)) + (1 - fy) * fx * double(x.at(y0, x1)) +
                 fy * (1 - fx) * double(x.at(y1, x0)) + fy * fx * double(x.at(y1, x1));
      out.at(i, j) = S(v);
    }
  }
  return out;
}

// Threshold at >= 1/2 into an exact 0/1 map.
template <class S>
TensorT<S> binarize(const TensorT<S>& x, S threshold = S(0.5)) {
  TensorT<S> out(x.shape);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] >= threshold ? S(1) : S(0);
  return out;
}

// Mask resized to a layer resolution: bilinear then >=1/2 binarization.
// An identity resize of an already-binary mask returns it unchanged.
template <class S>
TensorT<S> resize_mask(const TensorT<S>& m, uint32_t oh, uint32_t ow) {
  if (!is_binary(m)) fail(Errc::invalid_mask, "resize_mask wants a binary mask");
  if (m.shape.rank != 2) fail(Errc::invalid_mask, "mask must be rank-2");
  if (m.shape[0] == oh && m.shape[1] == ow) return m;
  return binarize(bilinear_resize(m, oh, ow));
}

}  // namespace mdl
