#pragma once

// Randomized 2D position assignment for training and the deterministic
// assignment used at sampling time.
//
// Positions are 1-based. A PositionGrid holds one sorted position set per
// axis; patch (i, j) sits at (xs[i], ys[j]), so every patch row shares an x
// and every patch column shares a y.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

enum class RpeVariant { grid, equispaced, naive };

inline RpeVariant parse_rpe_variant(std::string_view s) {
  if (s == "grid") return RpeVariant::grid;
  if (s == "equispaced") return RpeVariant::equispaced;
  if (s == "naive") return RpeVariant::naive;
  throw ConfigError("unknown rpe.variant '" + std::string(s) + "' (grid, equispaced, naive)");
}

inline const char* to_string(RpeVariant v) {
  switch (v) {
    case RpeVariant::grid: return "grid";
    case RpeVariant::equispaced: return "equispaced";
    case RpeVariant::naive: return "naive";
  }
  return "?";
}

struct PositionGrid {
  std::vector<std::int64_t> xs;  // row positions, strictly increasing
  std::vector<std::int64_t> ys;  // column positions, strictly increasing
  std::int64_t max_h = 0;
  std::int64_t max_w = 0;

  std::size_t rows() const { return xs.size(); }
  std::size_t cols() const { return ys.size(); }

  friend bool operator==(const PositionGrid&, const PositionGrid&) = default;
};

// True when the grid satisfies the ordering and bounds invariants.
inline bool is_valid(const PositionGrid& g) {
  auto axis_ok = [](const std::vector<std::int64_t>& v, std::int64_t hi) {
    if (v.empty() || v.front() < 1 || v.back() > hi) return false;
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] <= v[i - 1]) return false;
    return true;
  };
  return axis_ok(g.xs, g.max_h) && axis_ok(g.ys, g.max_w);
}

namespace detail {

inline void check_capacity(std::int64_t n, std::int64_t cap, const char* axis) {
  if (n < 1) throw CapacityError(std::string(axis) + ": need at least one position");
  if (n > cap) {
    throw CapacityError(std::string(axis) + ": " + std::to_string(n) +
                        " positions do not fit in a range of " + std::to_string(cap));
  }
}

// k distinct values from {1..n}, uniform over all k-subsets, sorted ascending
// (Floyd's algorithm).
inline std::vector<std::int64_t> sorted_subset(std::int64_t k, std::int64_t n, SeededRng& rng) {
  std::vector<char> taken(static_cast<std::size_t>(n) + 1, 0);
  for (std::int64_t j = n - k + 1; j <= n; ++j) {
    const std::int64_t t = rng.uniform_int(1, j);
    taken[taken[t] ? j : t] = 1;
  }
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::int64_t v = 1; v <= n; ++v)
    if (taken[v]) out.push_back(v);
  return out;
}

// round(1 + i*(n-1)/(k-1)) with halves rounded up, in exact integer arithmetic.
inline std::vector<std::int64_t> rounded_linspace(std::int64_t k, std::int64_t n) {
  if (k == 1) return {(n + 1) / 2};
  std::vector<std::int64_t> out(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    const std::int64_t num = i * (n - 1);
    out[i] = 1 + (2 * num + (k - 1)) / (2 * (k - 1));
  }
  return out;
}

}  // namespace detail

// Independent uniform subsets per axis, sorted (Cartesian-product grid).
inline PositionGrid sample_grid_positions(std::int64_t h, std::int64_t w, std::int64_t max_h,
                                          std::int64_t max_w, SeededRng& rng) {
  detail::check_capacity(h, max_h, "rows");
  detail::check_capacity(w, max_w, "cols");
  PositionGrid g;
  g.max_h = max_h;
  g.max_w = max_w;
  g.xs = detail::sorted_subset(h, max_h, rng);
  g.ys = detail::sorted_subset(w, max_w, rng);
  return g;
}

// Constant spacing r shared by both axes; r and the two start positions are
// random. r is drawn from the values feasible on both axes.
inline PositionGrid sample_equispaced_positions(std::int64_t h, std::int64_t w, std::int64_t max_h,
                                                std::int64_t max_w, SeededRng& rng) {
  detail::check_capacity(h, max_h, "rows");
  detail::check_capacity(w, max_w, "cols");
  // An axis with a single position places no bound on r.
  const std::int64_t unbounded = std::max(max_h, max_w);
  const std::int64_t r_h = h > 1 ? (max_h - 1) / (h - 1) : unbounded;
  const std::int64_t r_w = w > 1 ? (max_w - 1) / (w - 1) : unbounded;
  const std::int64_t r_max = std::min(r_h, r_w);
  if (r_max < 1) throw CapacityError("equispaced: no feasible interval");
  const std::int64_t r = rng.uniform_int(1, r_max);
  auto axis = [&](std::int64_t n, std::int64_t cap) {
    const std::int64_t start = rng.uniform_int(1, cap - (n - 1) * r);
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[i] = start + i * r;
    return v;
  };
  PositionGrid g;
  g.max_h = max_h;
  g.max_w = max_w;
  g.xs = axis(h, max_h);
  g.ys = axis(w, max_w);
  return g;
}

// Flattened baseline: h*w sorted positions from {1..max_h*max_w}, assigned to
// patches in row-major order and used as 1-D positions.
inline std::vector<std::int64_t> sample_naive_positions(std::int64_t h, std::int64_t w,
                                                        std::int64_t max_h, std::int64_t max_w,
                                                        SeededRng& rng) {
  detail::check_capacity(h * w, max_h * max_w, "tokens");
  return detail::sorted_subset(h * w, max_h * max_w, rng);
}

// Deterministic, endpoint-anchored spread over [1, max] per axis.
inline PositionGrid test_positions(std::int64_t h_test, std::int64_t w_test, std::int64_t max_h,
                                   std::int64_t max_w) {
  detail::check_capacity(h_test, max_h, "rows");
  detail::check_capacity(w_test, max_w, "cols");
  PositionGrid g;
  g.max_h = max_h;
  g.max_w = max_w;
  g.xs = detail::rounded_linspace(h_test, max_h);
  g.ys = detail::rounded_linspace(w_test, max_w);
  return g;
}

// Test-time counterpart of sample_naive_positions.
inline std::vector<std::int64_t> naive_test_positions(std::int64_t h_test, std::int64_t w_test,
                                                      std::int64_t max_h, std::int64_t max_w) {
  detail::check_capacity(h_test * w_test, max_h * max_w, "tokens");
  return detail::rounded_linspace(h_test * w_test, max_h * max_w);
}

// Positions 1..h by 1..w: what a model trained without randomization sees.
inline PositionGrid identity_grid(std::int64_t h, std::int64_t w) {
  PositionGrid g;
  g.max_h = h;
  g.max_w = w;
  for (std::int64_t i = 1; i <= h; ++i) g.xs.push_back(i);
  for (std::int64_t j = 1; j <= w; ++j) g.ys.push_back(j);
  return g;
}

}  // namespace rpe2d
