#pragma once

// Sinusoidal and rotary position encodings, and the per-strategy mapping from
// patch indices to the positions the rotary encoding actually sees.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/random_positions.hpp"

namespace rpe2d {

enum class Strategy { ext, pi, ntk, rpe2d };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "ext") return Strategy::ext;
  if (s == "pi") return Strategy::pi;
  if (s == "ntk") return Strategy::ntk;
  if (s == "rpe2d") return Strategy::rpe2d;
  throw ConfigError("unknown pe.strategy '" + std::string(s) + "' (ext, pi, ntk, rpe2d)");
}

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::ext: return "ext";
    case Strategy::pi: return "pi";
    case Strategy::ntk: return "ntk";
    case Strategy::rpe2d: return "rpe2d";
  }
  return "?";
}

struct PEConfig {
  std::size_t d = 32;  // per-head dimension
  double base = 10000.0;
  std::int64_t max_h = 64;
  std::int64_t max_w = 64;
  Strategy strategy = Strategy::ext;
  std::int64_t h_train = 8;
  std::int64_t w_train = 8;
  std::int64_t h_test = 8;
  std::int64_t w_test = 8;

  void validate() const {
    if (d == 0 || d % 2 != 0) throw ConfigError("pe.d must be even, got " + std::to_string(d));
    if (d % 4 != 0) {
      throw ConfigError("pe.d must be divisible by 4 for 2D rotary encoding, got " +
                        std::to_string(d));
    }
    if (base <= 0.0) throw ConfigError("pe.base must be positive");
    if (h_train < 1 || w_train < 1 || h_test < 1 || w_test < 1) {
      throw ConfigError("patch grid extents must be positive");
    }
    if (strategy == Strategy::ntk && d / 2 <= 2) {
      throw ConfigError("ntk needs at least 4 dimensions per axis");
    }
    if (strategy == Strategy::rpe2d) {
      if (h_train > max_h || w_train > max_w) {
        throw CapacityError("training grid " + std::to_string(h_train) + "x" +
                            std::to_string(w_train) + " exceeds max positions " +
                            std::to_string(max_h) + "x" + std::to_string(max_w));
      }
    }
  }
};

// theta_i = base^(-2i/d)
inline double frequency(std::size_t i, std::size_t d, double base) {
  return std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
}

// Component 2i is sin(m*theta_i), component 2i+1 is cos(m*theta_i).
inline std::vector<double> sinpe(double m, std::size_t d, double base = 10000.0) {
  if (d % 2 != 0) throw ConfigError("sinusoidal encoding needs an even dimension, got " +
                                    std::to_string(d));
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double a = m * frequency(i, d, base);
    out[2 * i] = std::sin(a);
    out[2 * i + 1] = std::cos(a);
  }
  return out;
}

inline std::vector<double> sinpe(double m, const PEConfig& cfg) { return sinpe(m, cfg.d, cfg.base); }

// Rotates pair (v[2i], v[2i+1]) by m*theta_i, theta_i = base^(-2i/len(v)).
// Angles are formed in double precision.
template <typename T>
void rope_apply_inplace(std::span<T> v, double m, double base = 10000.0) {
  const std::size_t d = v.size();
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double a = m * frequency(i, d, base);
    const T c = T(std::cos(a)), s = T(std::sin(a));
    const T x = v[2 * i], y = v[2 * i + 1];
    v[2 * i] = x * c - y * s;
    v[2 * i + 1] = x * s + y * c;
  }
}

template <typename T>
std::vector<T> rope_apply(std::vector<T> v, double m, double base = 10000.0) {
  rope_apply_inplace(std::span<T>(v), m, base);
  return v;
}

// First half rotated with position x, second half with position y; each
// half uses its own length as the frequency dimension.
template <typename T>
std::vector<T> rope2d_apply(std::vector<T> v, double x, double y, double base_x = 10000.0,
                            double base_y = 10000.0) {
  if (v.size() % 4 != 0) {
    throw ConfigError("2D rotary encoding needs a dimension divisible by 4, got " +
                      std::to_string(v.size()));
  }
  const std::size_t half = v.size() / 2;
  rope_apply_inplace(std::span<T>(v.data(), half), x, base_x);
  rope_apply_inplace(std::span<T>(v.data() + half, half), y, base_y);
  return v;
}

// Per-pair cosines and sines of a 2D rotation, split into x and y halves.
struct Rotation2D {
  std::vector<double> cos_x, sin_x, cos_y, sin_y;
};

inline Rotation2D make_rotation2d(double x, double y, std::size_t d, double base_x = 10000.0,
                                  double base_y = 10000.0) {
  if (d % 4 != 0) throw ConfigError("2D rotary encoding needs d divisible by 4");
  const std::size_t half = d / 2;
  Rotation2D r;
  for (std::size_t i = 0; i < half / 2; ++i) {
    const double ax = x * frequency(i, half, base_x);
    const double ay = y * frequency(i, half, base_y);
    r.cos_x.push_back(std::cos(ax));
    r.sin_x.push_back(std::sin(ax));
    r.cos_y.push_back(std::cos(ay));
    r.sin_y.push_back(std::sin(ay));
  }
  return r;
}

// NTK-aware base rescaling for one axis: b * ratio^(d/(d-2)), d the rotary
// dimension of that axis.
inline double ntk_base(double base, double ratio, std::size_t axis_dim) {
  const double d = static_cast<double>(axis_dim);
  return base * std::pow(ratio, d / (d - 2.0));
}

// The positions and bases the rotary encoding sees for every token.
//
// In 2D mode patch (i, j) uses (xs[i], ys[j]) with separate bases per axis.
// In flat mode (the naive 1-D baseline) token k uses flat[k] over the whole
// head dimension with base_x.
struct TokenPositions {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<double> flat;
  double base_x = 10000.0;
  double base_y = 10000.0;

  bool is_flat() const { return !flat.empty(); }
  std::size_t tokens() const { return rows * cols; }
};

inline TokenPositions from_grid(const PositionGrid& g, double base = 10000.0) {
  TokenPositions p;
  p.rows = g.rows();
  p.cols = g.cols();
  p.xs.assign(g.xs.begin(), g.xs.end());
  p.ys.assign(g.ys.begin(), g.ys.end());
  p.base_x = p.base_y = base;
  return p;
}

inline TokenPositions from_flat(std::size_t rows, std::size_t cols,
                                const std::vector<std::int64_t>& flat, double base = 10000.0) {
  if (flat.size() != rows * cols) throw ShapeError("flat positions do not cover the grid");
  TokenPositions p;
  p.rows = rows;
  p.cols = cols;
  p.flat.assign(flat.begin(), flat.end());
  p.base_x = p.base_y = base;
  return p;
}

// Effective (x, y) of patch (i, j), 1-based, under the configured strategy
// at the test grid extents.
inline std::pair<double, double> strategy_positions(std::int64_t i, std::int64_t j,
                                                    const PEConfig& cfg) {
  if (i < 1 || i > cfg.h_test || j < 1 || j > cfg.w_test) {
    throw CapacityError("patch (" + std::to_string(i) + ", " + std::to_string(j) +
                        ") outside the " + std::to_string(cfg.h_test) + "x" +
                        std::to_string(cfg.w_test) + " test grid");
  }
  switch (cfg.strategy) {
    case Strategy::ext:
    case Strategy::ntk:
      return {double(i), double(j)};
    case Strategy::pi:
      return {double(i) * double(cfg.h_train) / double(cfg.h_test),
              double(j) * double(cfg.w_train) / double(cfg.w_test)};
    case Strategy::rpe2d: {
      const PositionGrid g = test_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w);
      return {double(g.xs[i - 1]), double(g.ys[j - 1])};
    }
  }
  throw ConfigError("unknown strategy");
}

// Positions for the whole test grid, including NTK's rescaled bases.
inline TokenPositions strategy_token_positions(const PEConfig& cfg) {
  TokenPositions p;
  p.rows = static_cast<std::size_t>(cfg.h_test);
  p.cols = static_cast<std::size_t>(cfg.w_test);
  p.base_x = p.base_y = cfg.base;
  if (cfg.strategy == Strategy::rpe2d) {
    return from_grid(test_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w), cfg.base);
  }
  for (std::int64_t i = 1; i <= cfg.h_test; ++i) p.xs.push_back(strategy_positions(i, 1, cfg).first);
  for (std::int64_t j = 1; j <= cfg.w_test; ++j) p.ys.push_back(strategy_positions(1, j, cfg).second);
  if (cfg.strategy == Strategy::ntk) {
    p.base_x = ntk_base(cfg.base, double(cfg.h_test) / double(cfg.h_train), cfg.d / 2);
    p.base_y = ntk_base(cfg.base, double(cfg.w_test) / double(cfg.w_train), cfg.d / 2);
  }
  return p;
}

// Cosine/sine tables, tokens x (d/2), in the pair layout rotate_pairs expects:
// x pairs first, then y pairs; flat positions use all d/2 pairs.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> rotation_tables(const TokenPositions& pos,
                                                          std::size_t d) {
  if (d % 4 != 0) throw ConfigError("head dimension must be divisible by 4, got " + std::to_string(d));
  const std::size_t n = pos.tokens();
  std::vector<T> cs(n * d / 2), sn(n * d / 2);
  if (pos.is_flat()) {
    std::vector<double> freq(d / 2);
    for (std::size_t i = 0; i < d / 2; ++i) freq[i] = frequency(i, d, pos.base_x);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double a = pos.flat[k] * freq[i];
        cs[k * d / 2 + i] = T(std::cos(a));
        sn[k * d / 2 + i] = T(std::sin(a));
      }
    return {cs, sn};
  }
  const std::size_t q = d / 4;  // pairs per axis
  for (std::size_t r = 0; r < pos.rows; ++r)
    for (std::size_t c = 0; c < pos.cols; ++c) {
      const Rotation2D rot = make_rotation2d(pos.xs[r], pos.ys[c], d, pos.base_x, pos.base_y);
      const std::size_t k = r * pos.cols + c;
      for (std::size_t i = 0; i < q; ++i) {
        cs[k * d / 2 + i] = T(rot.cos_x[i]);
        sn[k * d / 2 + i] = T(rot.sin_x[i]);
        cs[k * d / 2 + q + i] = T(rot.cos_y[i]);
        sn[k * d / 2 + q + i] = T(rot.sin_y[i]);
      }
    }
  return {cs, sn};
}

}  // namespace rpe2d
