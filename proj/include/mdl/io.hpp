// File formats: the "MDLT" tensor container, PGM/PPM images, small text
// helpers. All multi-byte integers are little-endian; payloads are f32.
#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mdl/tensor.hpp"

namespace mdl {

// Container layout: "MDLT", version byte 0x01, rank byte, rank * u32
// little-endian extents, then f32 little-endian payload.
inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open for write: " + path);
  f.write("MDLT", 4);
  uint8_t version = 0x01;
  uint8_t rank = t.shape.rank;
  f.put(char(version));
  f.put(char(rank));
  for (uint8_t i = 0; i < rank; ++i) {
    uint32_t e = t.shape[i];
    f.write(reinterpret_cast<const char*>(&e), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data.data()),
          std::streamsize(t.data.size() * sizeof(float)));
  if (!f) fail(Errc::io_error, "short write: " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MDLT", 4) != 0) fail(Errc::io_error, "bad magic in " + path);
  int version = f.get();
  if (version != 0x01) fail(Errc::io_error, "unsupported container version in " + path);
  int rank = f.get();
  if (rank < 1 || rank > 4) fail(Errc::io_error, "bad rank in " + path);
  std::initializer_list<uint32_t> dummy{};
  (void)dummy;
  std::array<uint32_t, 4> ext{1, 1, 1, 1};
  for (int i = 0; i < rank; ++i) {
    uint32_t e = 0;
    f.read(reinterpret_cast<char*>(&e), 4);
    if (!f || e == 0) fail(Errc::io_error, "bad extent in " + path);
    ext[size_t(i)] = e;
  }
  Shape sh;
  sh.rank = uint8_t(rank);
  sh.d = ext;
  Tensor t(sh);
  f.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
  if (!f) fail(Errc::io_error, "truncated payload in " + path);
  return t;
}

// Binary mask as PGM (P5, maxval 255, values 0/255).
inline void save_pgm(const std::string& path, const Tensor& m) {
  if (m.shape.rank != 2) fail(Errc::invalid_shape, "PGM wants a rank-2 tensor");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open for write: " + path);
  f << "P5\n" << m.shape[1] << " " << m.shape[0] << "\n255\n";
  for (float v : m.data) f.put(char(v != 0.0f ? 255 : 0));
  if (!f) fail(Errc::io_error, "short write: " + path);
}

inline Tensor load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open: " + path);
  std::string magic;
  uint32_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w == 0 || h == 0 || maxval != 255) fail(Errc::io_error, "bad PGM header: " + path);
  f.get();  // single whitespace after header
  Tensor m(Shape{h, w});
  for (float& v : m.data) {
    int c = f.get();
    if (c < 0) fail(Errc::io_error, "truncated PGM: " + path);
    v = c >= 128 ? 1.0f : 0.0f;
  }
  return m;
}

// Grayscale heat map as PGM, linearly mapping [lo, hi] to 0..255.
inline void save_pgm_heat(const std::string& path, const Tensor& x, float lo, float hi) {
  if (x.shape.rank != 2) fail(Errc::invalid_shape, "PGM wants a rank-2 tensor");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open for write: " + path);
  f << "P5\n" << x.shape[1] << " " << x.shape[0] << "\n255\n";
  float range = hi > lo ? hi - lo : 1.0f;
  for (float v : x.data) {
    int b = int(255.0f * (v - lo) / range + 0.5f);
    b = b < 0 ? 0 : (b > 255 ? 255 : b);
    f.put(char(b));
  }
}

// RGB visualization of a (C,H,W) latent via a fixed projection:
//   R <- c0, G <- c1, B <- mean of remaining channels,
// each mapped through byte = clamp(128 + 48*v).
inline void save_ppm(const std::string& path, const Tensor& z) {
  if (z.shape.rank != 3) fail(Errc::invalid_shape, "PPM projection wants (C,H,W)");
  uint32_t c = z.shape[0], h = z.shape[1], w = z.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open for write: " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  auto byte_of = [](float v) {
    int b = int(128.0f + 48.0f * v + 0.5f);
    return char(b < 0 ? 0 : (b > 255 ? 255 : b));
  };
  for (uint32_t y = 0; y < h; ++y)
    for (uint32_t x = 0; x < w; ++x) {
      float r = z.at(0u, y, x);
      float g = c > 1 ? z.at(1u, y, x) : r;
      float b = 0.0f;
      if (c > 2) {
        for (uint32_t k = 2; k < c; ++k) b += z.at(k, y, x);
        b /= float(c - 2);
      } else {
        b = g;
      }
      f.put(byte_of(r));
      f.put(byte_of(g));
      f.put(byte_of(b));
    }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open for write: " + path);
  f << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_error, "cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace mdl
