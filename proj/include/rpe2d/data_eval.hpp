#pragma once

// Procedural image classes defined in continuous coordinates, and metrics
// that compare sample sets at any resolution.
//
// Class table (global ids):
//   0..3  checkerboard, k+1 cycles per image width, random phase per axis
//   4     radial gradient, linear profile: +1 at the center, -1 at the corners
//   5     radial gradient, cosine profile: +1 at the center, -1 at the corners
//   6..7  gaussian blobs, k+1 blobs (k = id - 6) on a -1 background
//
// Dominant frequency: the image is averaged over channels, its mean removed,
// and the 2D power spectrum |F(u, v)|^2 computed with u, v in signed cycles
// per image side. Power is max-pooled over square rings r = max(|u|, |v|) for
// r = 1..N/2, and the dominant frequency is the ring with the largest pooled
// power (lowest ring on ties). The square ring makes a checkerboard with c
// cycles per width peak at r = c.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

enum class Family { checkerboard, radial_gradient, gaussian_blobs };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::checkerboard: return "checkerboard";
    case Family::radial_gradient: return "radial_gradient";
    case Family::gaussian_blobs: return "gaussian_blobs";
  }
  return "?";
}

inline constexpr std::size_t kSyntheticClasses = 8;

struct ClassInfo {
  Family family;
  std::size_t index;  // position within the family
};

inline ClassInfo class_info(std::size_t id) {
  if (id < 4) return {Family::checkerboard, id};
  if (id < 6) return {Family::radial_gradient, id - 4};
  if (id < 8) return {Family::gaussian_blobs, id - 6};
  throw InputError("unsupported synthetic class " + std::to_string(id));
}

inline std::vector<std::size_t> classes_of(Family f) {
  std::vector<std::size_t> out;
  for (std::size_t id = 0; id < kSyntheticClasses; ++id)
    if (class_info(id).family == f) out.push_back(id);
  return out;
}

// Which classes a corpus uses and how many channels its images have.
struct SyntheticSpec {
  std::vector<std::size_t> classes = {0, 1, 2, 3, 4, 5};
  std::size_t channels = 1;
};

namespace detail {

struct Blob {
  double cx, cy;
};

inline constexpr double kBlobSigma = 0.15;      // in image widths
inline constexpr double kBlobSeparation = 0.35;  // minimum center distance

inline std::vector<Blob> place_blobs(std::size_t count, SeededRng& rng) {
  std::vector<Blob> blobs;
  while (blobs.size() < count) {
    const Blob b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    bool ok = true;
    for (const auto& o : blobs)
      ok = ok && std::hypot(b.cx - o.cx, b.cy - o.cy) >= kBlobSeparation;
    if (ok) blobs.push_back(b);
  }
  return blobs;
}

}  // namespace detail

// Renders class `class_id` at resolution x resolution by point-sampling the
// continuous class function at pixel centers.
template <typename T = float>
nn::BasicTensor<T> generate(std::size_t class_id, std::size_t resolution, SeededRng& rng,
                            std::size_t channels = 1) {
  const ClassInfo info = class_info(class_id);
  if (resolution < 2) throw InputError("resolution must be at least 2");
  const std::size_t N = resolution;
  std::vector<double> plane(N * N);
  auto coord = [N](std::size_t i) { return (double(i) + 0.5) / double(N); };
  switch (info.family) {
    case Family::checkerboard: {
      const double f = double(info.index + 1);
      const double px = rng.uniform(0.0, 1.0 / f), py = rng.uniform(0.0, 1.0 / f);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double a = std::sin(2 * std::numbers::pi * f * (coord(i) + py));
          const double b = std::sin(2 * std::numbers::pi * f * (coord(j) + px));
          plane[i * N + j] = a * b >= 0 ? 1.0 : -1.0;
        }
      break;
    }
    case Family::radial_gradient: {
      const double rc = std::sqrt(0.5);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double r = std::hypot(coord(i) - 0.5, coord(j) - 0.5) / rc;
          plane[i * N + j] = info.index == 0 ? 1.0 - 2.0 * r : std::cos(std::numbers::pi * r);
        }
      break;
    }
    case Family::gaussian_blobs: {
      const auto blobs = detail::place_blobs(info.index + 1, rng);
      const double s2 = 2.0 * detail::kBlobSigma * detail::kBlobSigma;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          double v = 0.0;
          for (const auto& b : blobs) {
            const double dx = coord(j) - b.cx, dy = coord(i) - b.cy;
            v = std::max(v, std::exp(-(dx * dx + dy * dy) / s2));
          }
          plane[i * N + j] = -1.0 + 2.0 * v;
        }
      break;
    }
  }
  nn::BasicTensor<T> img({channels, N, N});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < N * N; ++k) img.data[c * N * N + k] = T(plane[k]);
  return img;
}

// Channel-averaged plane of a C x N x N image.
template <typename T>
std::vector<double> luminance(const nn::BasicTensor<T>& img) {
  if (img.rank() != 3) throw ShapeError("expected C x H x W, got " + nn::shape_str(img.shape));
  const std::size_t C = img.shape[0], n = img.shape[1] * img.shape[2];
  std::vector<double> out(n, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < n; ++k) out[k] += img.data[c * n + k] / double(C);
  return out;
}

// Ring-pooled power spectrum; entry r is the max power on ring r (r >= 1).
template <typename T>
std::vector<double> ring_spectrum(const nn::BasicTensor<T>& img) {
  const std::size_t H = img.shape.at(1), W = img.shape.at(2);
  if (H != W) throw ShapeError("spectrum needs a square image, got " + nn::shape_str(img.shape));
  const std::size_t N = H;
  std::vector<double> plane = luminance(img);
  double mean = 0;
  for (double v : plane) mean += v;
  mean /= double(plane.size());
  const std::size_t nc = N / 2 + 1;
  double* in = fftw_alloc_real(N * N);
  fftw_complex* out = fftw_alloc_complex(N * nc);
  fftw_plan plan = fftw_plan_dft_r2c_2d(int(N), int(N), in, out, FFTW_ESTIMATE);
  for (std::size_t k = 0; k < N * N; ++k) in[k] = plane[k] - mean;
  fftw_execute(plan);
  std::vector<double> rings(N / 2 + 1, 0.0);
  for (std::size_t u = 0; u < N; ++u) {
    const std::int64_t su = u <= N / 2 ? std::int64_t(u) : std::int64_t(u) - std::int64_t(N);
    for (std::size_t v = 0; v < nc; ++v) {
      const std::size_t r = std::max<std::size_t>(std::size_t(std::llabs(su)), v);
      if (r == 0 || r > N / 2) continue;
      const double re = out[u * nc + v][0], im = out[u * nc + v][1];
      rings[r] = std::max(rings[r], re * re + im * im);
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(in);
  fftw_free(out);
  return rings;
}

// Dominant frequency in cycles per image width.
template <typename T>
double dominant_frequency(const nn::BasicTensor<T>& img) {
  const auto rings = ring_spectrum(img);
  std::size_t best = 1;
  for (std::size_t r = 2; r < rings.size(); ++r)
    if (rings[r] > rings[best]) best = r;
  return double(best);
}

// Class frequency in cycles per width: exact for checkerboards, measured on a
// 64 x 64 render for the gradients, undefined for blobs.
inline std::optional<double> analytic_frequency(std::size_t class_id) {
  const ClassInfo info = class_info(class_id);
  if (info.family == Family::checkerboard) return double(info.index + 1);
  if (info.family == Family::radial_gradient) {
    SeededRng rng(0);
    return dominant_frequency(generate<double>(class_id, 64, rng));
  }
  return std::nullopt;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// |median dominant frequency - analytic class frequency|. Meant for sets of
// at least 16 samples.
template <typename T>
double spectral_peak_error(const std::vector<nn::BasicTensor<T>>& samples, std::size_t class_id) {
  if (samples.empty()) throw InputError("spectral_peak_error: empty sample set");
  const auto ref = analytic_frequency(class_id);
  if (!ref) {
    throw InputError("class " + std::to_string(class_id) + " has no analytic frequency");
  }
  std::vector<double> f;
  for (const auto& s : samples) f.push_back(dominant_frequency(s));
  return std::abs(median(f) - *ref);
}

// Intensity histogram on 64 support points spanning [-1, 1] in steps of
// 2/63; each value goes to the nearest point (clamped). Normalized.
inline constexpr std::size_t kHistogramBins = 64;

template <typename T>
std::vector<double> intensity_histogram(const std::vector<nn::BasicTensor<T>>& samples) {
  std::vector<double> h(kHistogramBins, 0.0);
  double total = 0;
  for (const auto& s : samples)
    for (T v : s.data) {
      const double pos = (std::clamp(double(v), -1.0, 1.0) + 1.0) * 0.5 * (kHistogramBins - 1);
      h[std::size_t(std::llround(pos))] += 1.0;
      total += 1.0;
    }
  if (total == 0) throw InputError("histogram of an empty sample set");
  for (auto& v : h) v /= total;
  return h;
}

// 1-Wasserstein distance between the two intensity histograms.
template <typename T>
double histogram_w1(const std::vector<nn::BasicTensor<T>>& samples,
                    const std::vector<nn::BasicTensor<T>>& reference) {
  const auto a = intensity_histogram(samples);
  const auto b = intensity_histogram(reference);
  const double step = 2.0 / double(kHistogramBins - 1);
  double ca = 0, cb = 0, w = 0;
  for (std::size_t k = 0; k + 1 < kHistogramBins; ++k) {
    ca += a[k];
    cb += b[k];
    w += std::abs(ca - cb) * step;
  }
  return w;
}

// Local maxima above 0.5 after a 3x3 box blur (edges clamped). Plateaus are
// broken in raster order.
template <typename T>
std::size_t count_blobs(const nn::BasicTensor<T>& img) {
  const std::size_t N = img.shape.at(1), W = img.shape.at(2);
  const auto plane = luminance(img);
  auto at = [&](std::int64_t i, std::int64_t j) {
    i = std::clamp<std::int64_t>(i, 0, std::int64_t(N) - 1);
    j = std::clamp<std::int64_t>(j, 0, std::int64_t(W) - 1);
    return plane[std::size_t(i) * W + std::size_t(j)];
  };
  std::vector<double> sm(N * W);
  for (std::int64_t i = 0; i < std::int64_t(N); ++i)
    for (std::int64_t j = 0; j < std::int64_t(W); ++j) {
      double s = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) s += at(i + di, j + dj);
      sm[std::size_t(i) * W + std::size_t(j)] = s / 9.0;
    }
  std::size_t count = 0;
  for (std::int64_t i = 0; i < std::int64_t(N); ++i)
    for (std::int64_t j = 0; j < std::int64_t(W); ++j) {
      const double v = sm[std::size_t(i) * W + std::size_t(j)];
      if (v <= 0.5) continue;
      bool peak = true;
      for (int di = -1; di <= 1 && peak; ++di)
        for (int dj = -1; dj <= 1 && peak; ++dj) {
          if (di == 0 && dj == 0) continue;
          const std::int64_t y = i + di, x = j + dj;
          if (y < 0 || x < 0 || y >= std::int64_t(N) || x >= std::int64_t(W)) continue;
          const double o = sm[std::size_t(y) * W + std::size_t(x)];
          const bool earlier = di < 0 || (di == 0 && dj < 0);
          peak = earlier ? v > o : v >= o;
        }
      count += peak ? 1 : 0;
    }
  return count;
}

template <typename T>
double blob_count_accuracy(const std::vector<nn::BasicTensor<T>>& samples, std::size_t class_id) {
  const ClassInfo info = class_info(class_id);
  if (info.family != Family::gaussian_blobs) {
    throw InputError("class " + std::to_string(class_id) + " is not a blob class");
  }
  if (samples.empty()) throw InputError("blob_count_accuracy: empty sample set");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += count_blobs(s) == info.index + 1 ? 1 : 0;
  return double(hits) / double(samples.size());
}

struct EvalRow {
  std::size_t class_id = 0;
  std::size_t resolution = 0;
  std::size_t count = 0;
  double spectral_peak_error = std::numeric_limits<double>::quiet_NaN();  // NaN: n/a
  double histogram_w1 = 0;
  double blob_count_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN: n/a
};

// Tab-separated, one header line then one row per class; "-" marks a metric
// that does not apply to the class family.
struct EvalReport {
  std::vector<EvalRow> rows;

  static constexpr const char* kHeader =
      "class\tfamily\tresolution\tcount\tspectral_peak_error\thistogram_w1\tblob_count_accuracy";

  std::string to_tsv() const {
    std::ostringstream os;
    os << kHeader << '\n' << std::fixed << std::setprecision(6);
    auto opt = [&os](double v) {
      if (std::isnan(v)) os << '-';
      else os << v;
    };
    for (const auto& r : rows) {
      os << r.class_id << '\t' << to_string(class_info(r.class_id).family) << '\t'
         << r.resolution << '\t' << r.count << '\t';
      opt(r.spectral_peak_error);
      os << '\t' << r.histogram_w1 << '\t';
      opt(r.blob_count_accuracy);
      os << '\n';
    }
    return os.str();
  }

  // Mean spectral-peak error over rows where it applies.
  double mean_spectral_error() const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (!std::isnan(r.spectral_peak_error)) s += r.spectral_peak_error, ++n;
    return n ? s / double(n) : 0.0;
  }

  double mean_w1() const {
    double s = 0;
    for (const auto& r : rows) s += r.histogram_w1;
    return rows.empty() ? 0.0 : s / double(rows.size());
  }

  // Single figure of merit: mean spectral-peak error + mean histogram W1.
  double combined() const { return mean_spectral_error() + mean_w1(); }
};

// Reference images for class `class_id`: `count` renders at `resolution`.
template <typename T = float>
std::vector<nn::BasicTensor<T>> reference_set(std::size_t class_id, std::size_t resolution,
                                              std::size_t count, std::uint64_t seed,
                                              std::size_t channels = 1) {
  std::vector<nn::BasicTensor<T>> out;
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng(derive_seed(seed, class_id, i));
    out.push_back(generate<T>(class_id, resolution, rng, channels));
  }
  return out;
}

// Scores each class's samples against freshly rendered references.
template <typename T>
EvalReport evaluate(const std::map<std::size_t, std::vector<nn::BasicTensor<T>>>& by_class,
                    std::uint64_t reference_seed) {
  if (by_class.empty()) throw InputError("evaluate: no samples");
  EvalReport rep;
  for (const auto& [cls, samples] : by_class) {
    if (samples.empty()) throw InputError("evaluate: class " + std::to_string(cls) + " is empty");
    EvalRow row;
    row.class_id = cls;
    row.resolution = samples.front().shape.at(1);
    row.count = samples.size();
    const ClassInfo info = class_info(cls);
    if (info.family != Family::gaussian_blobs) row.spectral_peak_error = spectral_peak_error(samples, cls);
    else row.blob_count_accuracy = blob_count_accuracy(samples, cls);
    const auto ref = reference_set<T>(cls, row.resolution, samples.size(), reference_seed,
                                      samples.front().shape.at(0));
    row.histogram_w1 = histogram_w1(samples, ref);
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace rpe2d
