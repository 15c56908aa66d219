#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rpe2d/numerics.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d::testing {

template <typename T = double>
nn::BasicTensor<T> random_tensor(nn::Shape shape, SeededRng& rng, double lo = -1.0, double hi = 1.0) {
  nn::BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

struct GradAudit {
  std::size_t checked = 0;
  double max_rel = 0;
  std::string worst;
};

// |a - n| / max(|a|, |n|), or 0 when both vanish.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

using GraphBuilder = std::function<nn::Var(nn::Tape<double>&, const std::vector<nn::Var>&)>;

// Analytic gradients of a scalar graph against central differences at
// `coords` distinct random coordinates spread over all inputs.
inline GradAudit audit_gradients(std::vector<nn::BasicTensor<double>> inputs, const GraphBuilder& build,
                                 std::size_t coords, std::uint64_t seed, double h = 1e-3) {
  std::vector<std::vector<double>> analytic;
  {
    nn::Tape<double> tape;
    std::vector<nn::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    const nn::Var loss = build(tape, vars);
    tape.backward(loss);
    for (auto v : vars) {
      auto g = tape.grad(v);
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  auto eval = [&]() {
    nn::Tape<double> tape;
    tape.set_recording(false);
    std::vector<nn::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return tape.value(build(tape, vars))[0];
  };

  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) all.emplace_back(k, i);
  SeededRng rng(seed);
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
  all.resize(std::min(coords, all.size()));

  GradAudit audit;
  for (auto [k, i] : all) {
    double& x = inputs[k].data[i];
    const double x0 = x;
    x = x0 + h;
    const double fp = eval();
    x = x0 - h;
    const double fm = eval();
    x = x0;
    const double numeric = (fp - fm) / (2 * h);
    const double rel = relative_error(analytic[k][i], numeric);
    ++audit.checked;
    if (rel > audit.max_rel) {
      audit.max_rel = rel;
      audit.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "]: analytic " +
                    std::to_string(analytic[k][i]) + " numeric " + std::to_string(numeric);
    }
  }
  return audit;
}

}  // namespace rpe2d::testing
