#pragma once

// DDPM schedule, training loss, the respaced ancestral sampler with
// classifier-free guidance, and the resolution-dependent timestep shift.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rpe2d/errors.hpp"
#include "rpe2d/model.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/posenc.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

struct DiffusionSchedule {
  std::int64_t T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alphas_bar;

  // Linear betas from beta_start to beta_end over T steps.
  static DiffusionSchedule linear(std::int64_t T = 1000, double beta_start = 1e-4,
                                  double beta_end = 2e-2) {
    if (T < 2) throw ConfigError("diffusion.T must be at least 2");
    DiffusionSchedule s;
    s.T = T;
    double prod = 1.0;
    for (std::int64_t t = 0; t < T; ++t) {
      const double b = beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
      s.betas.push_back(b);
      s.alphas.push_back(1.0 - b);
      prod *= 1.0 - b;
      s.alphas_bar.push_back(prod);
    }
    s.validate();
    return s;
  }

  void validate() const {
    for (double b : betas)
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    for (std::size_t t = 1; t < alphas_bar.size(); ++t)
      if (!(alphas_bar[t] < alphas_bar[t - 1])) {
        throw ConfigError("alphas_bar is not strictly decreasing at t=" + std::to_string(t));
      }
  }

  void check_step(std::int64_t t) const {
    if (t < 0 || t >= T) {
      throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
    }
  }
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
template <typename T>
nn::BasicTensor<T> q_sample(const nn::BasicTensor<T>& x0, std::int64_t t,
                            const nn::BasicTensor<T>& noise, const DiffusionSchedule& s) {
  s.check_step(t);
  if (x0.shape != noise.shape) {
    throw ShapeError("q_sample: noise " + nn::shape_str(noise.shape) + " vs image " +
                     nn::shape_str(x0.shape));
  }
  const double a = std::sqrt(s.alphas_bar[t]);
  const double b = std::sqrt(1.0 - s.alphas_bar[t]);
  nn::BasicTensor<T> out(x0.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = T(a * x0.data[i] + b * noise.data[i]);
  return out;
}

// Maps a training-resolution timestep (n tokens) to the timestep with a
// comparable signal-to-noise ratio at m tokens:
//   t_m = floor(T * s*u / (1 + (s-1)*u)),  s = sqrt(m/n), u = t_n/T.
// The floor is applied after scaling by T.
inline std::int64_t timestep_shift(std::int64_t t_n, double m, double n, std::int64_t T) {
  if (t_n < 0 || t_n > T) throw InputError("timestep_shift: t_n outside [0, T]");
  if (m < 1 || n < 1) throw ConfigError("timestep_shift: token counts must be positive");
  const double s = std::sqrt(m / n);
  const double tt = double(T);
  const double v = tt * s * double(t_n) / (tt + (s - 1.0) * double(t_n));
  // Guards against v landing a hair below an integer it equals exactly.
  const auto r = std::int64_t(std::floor(v + 1e-9 * std::max(1.0, v)));
  return std::clamp<std::int64_t>(r, 0, T);
}

// `steps` timesteps spread uniformly over [0, T-1], ascending.
inline std::vector<std::int64_t> sampling_timesteps(std::int64_t T, std::int64_t steps) {
  if (steps < 1 || steps > T) {
    throw ConfigError("sampling steps must be in [1, " + std::to_string(T) + "], got " +
                      std::to_string(steps));
  }
  if (steps == 1) return {T - 1};
  std::vector<std::int64_t> out;
  for (std::int64_t k = 0; k < steps; ++k) out.push_back(k * (T - 1) / (steps - 1));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Base steps mapped through timestep_shift, then deduplicated.
inline std::vector<std::int64_t> shifted_timesteps(const std::vector<std::int64_t>& base, double m,
                                                   double n, std::int64_t T) {
  std::vector<std::int64_t> out;
  for (auto t : base) out.push_back(std::min(timestep_shift(t, m, n, T), T - 1));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// eps_u + g (eps_c - eps_u); g = 1 and g = 0 return the inputs unchanged.
template <typename T>
nn::BasicTensor<T> guided_noise(const nn::BasicTensor<T>& eps_cond,
                                const nn::BasicTensor<T>& eps_uncond, double g) {
  if (g == 1.0) return eps_cond;
  if (g == 0.0) return eps_uncond;
  nn::BasicTensor<T> out(eps_cond.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = T(eps_uncond.data[i] + g * (eps_cond.data[i] - eps_uncond.data[i]));
  return out;
}

// Epsilon-prediction MSE for one sample; returns the scalar loss node.
template <typename T>
nn::Var diffusion_loss(DiT<T>& model, nn::Tape<T>& tape, const nn::BasicTensor<T>& x0,
                       std::int64_t t, const nn::BasicTensor<T>& noise, Conditioning cond,
                       const TokenPositions& pos, const DiffusionSchedule& s) {
  const auto xt = q_sample(x0, t, noise, s);
  cond.timestep = double(t);
  const double mult = attention_multiplier(model.config().head_dim(), ScaleMode::train);
  nn::Var pred = model.forward(tape, xt, cond, pos, mult);
  const auto target = patchify(noise, model.config().patch);
  return tape.mse(pred, std::span<const T>(target.data));
}

struct SampleOptions {
  std::int64_t steps = 250;
  double guidance = 4.0;
  bool use_shift = false;
  bool use_attn_scale = false;
  std::int64_t train_tokens = 0;  // n: patch count at the training resolution
  bool clip_denoised = true;
};

template <typename T>
struct SampleResult {
  nn::BasicTensor<T> image;
  std::vector<std::int64_t> timesteps;  // visited, ascending
};

// Ancestral DDPM over a respaced subset of timesteps.
template <typename T>
SampleResult<T> sample(DiT<T>& model, std::size_t height, std::size_t width,
                       std::optional<std::size_t> label, const SampleOptions& opt,
                       const DiffusionSchedule& s, const TokenPositions& pos, SeededRng& rng) {
  const ModelConfig& mc = model.config();
  if (opt.guidance < 0) throw ConfigError("guidance scale must be non-negative");
  const auto m = double(pos.tokens());
  const auto n = double(opt.train_tokens > 0 ? opt.train_tokens : std::int64_t(pos.tokens()));
  std::vector<std::int64_t> seq = sampling_timesteps(s.T, opt.steps);
  if (opt.use_shift && m != n) seq = shifted_timesteps(seq, m, n, s.T);
  const double mult = (opt.use_attn_scale && m != n)
                          ? attention_multiplier(mc.head_dim(), ScaleMode::extrapolate, m, n)
                          : attention_multiplier(mc.head_dim(), ScaleMode::train);

  Conditioning cond;
  cond.label = label;
  cond.micro = MicroCondition::full_frame(std::int64_t(height), std::int64_t(width));
  Conditioning uncond = cond;
  uncond.label.reset();
  const bool need_uncond = label.has_value() && opt.guidance != 1.0;

  nn::BasicTensor<T> x({mc.channels, height, width});
  for (auto& v : x.data) v = T(rng.normal());

  for (std::size_t k = seq.size(); k-- > 0;) {
    const std::int64_t t = seq[k];
    cond.timestep = uncond.timestep = double(t);
    nn::BasicTensor<T> eps = model.predict(x, cond, pos, mult);
    if (need_uncond) eps = guided_noise(eps, model.predict(x, uncond, pos, mult), opt.guidance);
    const double ab = s.alphas_bar[t];
    const double ab_prev = k > 0 ? s.alphas_bar[seq[k - 1]] : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double x0 = (x.data[i] - std::sqrt(1.0 - ab) * eps.data[i]) / std::sqrt(ab);
      if (opt.clip_denoised) x0 = std::clamp(x0, -1.0, 1.0);
      double v = c0 * x0 + ct * x.data[i];
      if (k > 0) v += std::sqrt(var) * rng.normal();
      if (!std::isfinite(v)) {
        throw NumericError("sampler produced a non-finite value at step " + std::to_string(t));
      }
      x.data[i] = T(v);
    }
  }
  return {std::move(x), std::move(seq)};
}

}  // namespace rpe2d
