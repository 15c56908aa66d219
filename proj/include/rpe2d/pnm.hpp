#pragma once

// Binary PGM (P5) and PPM (P6) images holding values in [-1, 1].
// A value v is stored as the byte round((v + 1) * 127.5) after clamping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/numerics.hpp"

namespace rpe2d {

inline std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

inline double from_byte(std::uint8_t b) { return double(b) / 127.5 - 1.0; }

// Encodes a 1- or 3-channel C x H x W image.
template <typename T>
std::string encode_pnm(const nn::BasicTensor<T>& img) {
  if (img.rank() != 3 || (img.shape[0] != 1 && img.shape[0] != 3)) {
    throw ShapeError("pnm: expected 1 or 3 channels, got " + nn::shape_str(img.shape));
  }
  const std::size_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  std::string out = (C == 1 ? "P5\n" : "P6\n") + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + C * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        out[header + (y * W + x) * C + c] = char(to_byte(img.data[(c * H + y) * W + x]));
  return out;
}

template <typename T = float>
nn::BasicTensor<T> decode_pnm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t W = 0, H = 0, maxval = 0;
  is >> magic >> W >> H >> maxval;
  if (!is || (magic != "P5" && magic != "P6") || maxval != 255 || W == 0 || H == 0) {
    throw InputError("pnm: unsupported or malformed header");
  }
  is.get();  // single whitespace after maxval
  const std::size_t C = magic == "P5" ? 1 : 3;
  const auto offset = std::size_t(is.tellg());
  if (bytes.size() < offset + C * H * W) throw InputError("pnm: truncated pixel data");
  nn::BasicTensor<T> img({C, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        img.data[(c * H + y) * W + x] =
            T(from_byte(std::uint8_t(bytes[offset + (y * W + x) * C + c])));
  return img;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw InputError("write failed: " + path);
}

template <typename T>
void write_pnm(const std::string& path, const nn::BasicTensor<T>& img) {
  write_file(path, encode_pnm(img));
}

template <typename T = float>
nn::BasicTensor<T> read_pnm(const std::string& path) {
  return decode_pnm<T>(read_file(path));
}

}  // namespace rpe2d
