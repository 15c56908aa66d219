#pragma once

// Crop/resize augmentation that treats each training image as a view of a
// larger image, and the micro-condition describing that view.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/posenc.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

// Sizes and crop box in pixels. The crop box is in original-image
// coordinates; a global resize is the full frame (0, 0, h_original, w_original).
struct MicroCondition {
  std::int64_t h_original = 0;
  std::int64_t w_original = 0;
  std::int64_t c_top = 0;
  std::int64_t c_left = 0;
  std::int64_t c_down = 0;
  std::int64_t c_right = 0;
  std::int64_t h_target = 0;
  std::int64_t w_target = 0;

  // The condition used when sampling: an uncropped image of the target size.
  static MicroCondition full_frame(std::int64_t h, std::int64_t w) {
    return {h, w, 0, 0, h, w, h, w};
  }

  std::array<double, 8> scalars() const {
    return {double(h_original), double(w_original), double(c_top),    double(c_left),
            double(c_down),     double(c_right),    double(h_target), double(w_target)};
  }

  bool is_valid() const {
    return 0 <= c_top && c_top < c_down && c_down <= h_original && 0 <= c_left &&
           c_left < c_right && c_right <= w_original && h_target > 0 && w_target > 0;
  }

  friend bool operator==(const MicroCondition&, const MicroCondition&) = default;
};

template <typename T>
struct AugmentedSample {
  nn::BasicTensor<T> image;  // C x h_target x w_target
  MicroCondition cond;
  std::int64_t class_label = 0;
};

struct AugmentConfig {
  double p_resize = 0.5;
  double min_crop_frac = 0.5;
};

// Bilinear resample of image[:, top:down, left:right] to out_h x out_w with
// half-pixel centers; samples are clamped to the window.
template <typename T>
nn::BasicTensor<T> resample_window(const nn::BasicTensor<T>& image, std::int64_t top,
                                   std::int64_t left, std::int64_t down, std::int64_t right,
                                   std::int64_t out_h, std::int64_t out_w) {
  const std::size_t C = image.shape.at(0), H = image.shape.at(1), W = image.shape.at(2);
  if (top < 0 || left < 0 || down > std::int64_t(H) || right > std::int64_t(W) || top >= down ||
      left >= right) {
    throw InputError("crop window outside the image");
  }
  nn::BasicTensor<T> out({C, std::size_t(out_h), std::size_t(out_w)});
  const double sy = double(down - top) / double(out_h);
  const double sx = double(right - left) / double(out_w);
  auto clampd = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };
  for (std::int64_t u = 0; u < out_h; ++u) {
    const double fy = clampd(top + (u + 0.5) * sy - 0.5, double(top), double(down - 1));
    const std::int64_t y0 = std::int64_t(std::floor(fy));
    const std::int64_t y1 = std::min(y0 + 1, down - 1);
    const double wy = fy - double(y0);
    for (std::int64_t v = 0; v < out_w; ++v) {
      const double fx = clampd(left + (v + 0.5) * sx - 0.5, double(left), double(right - 1));
      const std::int64_t x0 = std::int64_t(std::floor(fx));
      const std::int64_t x1 = std::min(x0 + 1, right - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const T* plane = image.data.data() + c * H * W;
        const double a = plane[y0 * W + x0], b = plane[y0 * W + x1];
        const double d = plane[y1 * W + x0], e = plane[y1 * W + x1];
        const double val = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
        out.data[(c * out_h + u) * out_w + v] = T(val);
      }
    }
  }
  return out;
}

// Crops the given window and resizes it to target_side x target_side.
template <typename T>
AugmentedSample<T> augment_window(const nn::BasicTensor<T>& image, std::int64_t target_side,
                                  std::int64_t top, std::int64_t left, std::int64_t down,
                                  std::int64_t right) {
  AugmentedSample<T> s;
  s.image = resample_window(image, top, left, down, right, target_side, target_side);
  s.cond = {std::int64_t(image.shape[1]), std::int64_t(image.shape[2]), top, left, down, right,
            target_side, target_side};
  return s;
}

inline std::int64_t square_side(std::int64_t target_area) {
  const auto side = std::int64_t(std::llround(std::sqrt(double(target_area))));
  if (target_area <= 0 || side * side != target_area) {
    throw ConfigError("target area " + std::to_string(target_area) + " is not a square");
  }
  return side;
}

// Global resize with probability p_resize, otherwise a random square crop
// with side uniform in [min_crop_frac, 1] * min(h0, w0) at a uniform offset.
template <typename T>
AugmentedSample<T> augment(const nn::BasicTensor<T>& image, std::int64_t target_area,
                           SeededRng& rng, const AugmentConfig& cfg = {}) {
  if (image.rank() != 3 || image.shape[1] < 2 || image.shape[2] < 2) {
    throw InputError("augment: image must be C x H x W with H, W >= 2, got " +
                     nn::shape_str(image.shape));
  }
  const std::int64_t side = square_side(target_area);
  const std::int64_t h0 = std::int64_t(image.shape[1]), w0 = std::int64_t(image.shape[2]);
  if (rng.uniform() < cfg.p_resize) return augment_window(image, side, 0, 0, h0, w0);
  const std::int64_t m = std::min(h0, w0);
  const std::int64_t lo = std::max<std::int64_t>(1, std::int64_t(std::ceil(cfg.min_crop_frac * m)));
  const std::int64_t crop = rng.uniform_int(lo, m);
  const std::int64_t top = rng.uniform_int(0, h0 - crop);
  const std::int64_t left = rng.uniform_int(0, w0 - crop);
  return augment_window(image, side, top, left, top + crop, left + crop);
}

// Sinusoidal features of a scalar, same layout as sinpe with base 10000.
inline std::vector<double> fourier_embed(double value, std::size_t dim) {
  if (dim % 2 != 0) {
    throw ConfigError("fourier embedding needs an even dimension, got " + std::to_string(dim));
  }
  return sinpe(value, dim, 10000.0);
}

// Concatenation of the eight embedded scalars in the order
// (h_original, w_original, c_top, c_left, c_down, c_right, h_target, w_target).
inline std::vector<double> embed_microcondition(const MicroCondition& cond,
                                                std::size_t dim_per_scalar) {
  std::vector<double> out;
  out.reserve(8 * dim_per_scalar);
  for (double v : cond.scalars()) {
    const auto e = fourier_embed(v, dim_per_scalar);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

// Same, checked against the width the model was configured with.
inline std::vector<double> embed_microcondition(const MicroCondition& cond,
                                                std::size_t dim_per_scalar,
                                                std::size_t cond_width) {
  if (8 * dim_per_scalar != cond_width) {
    throw ConfigError("micro-condition width " + std::to_string(8 * dim_per_scalar) +
                      " does not match conditioning width " + std::to_string(cond_width));
  }
  return embed_microcondition(cond, dim_per_scalar);
}

}  // namespace rpe2d
