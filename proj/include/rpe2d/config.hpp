#pragma once

// Run configuration: a flat `key = value` text format with dotted keys.
// Lines starting with '#' and blank lines are ignored. Unknown keys and
// malformed values are rejected with the offending key path.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rpe2d/conditioning.hpp"
#include "rpe2d/data_eval.hpp"
#include "rpe2d/diffusion.hpp"
#include "rpe2d/errors.hpp"
#include "rpe2d/model.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/posenc.hpp"
#include "rpe2d/random_positions.hpp"

namespace rpe2d {

struct RunConfig {
  ModelConfig model;
  Strategy strategy = Strategy::ext;
  double pe_base = 10000.0;
  RpeVariant variant = RpeVariant::grid;
  std::int64_t max_h = 64;  // in patches
  std::int64_t max_w = 64;
  bool aug_enabled = false;
  AugmentConfig aug;
  std::int64_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::int64_t sample_steps = 250;
  double cfg_scale = 4.0;
  double class_drop = 0.1;
  std::int64_t resolution = 16;
  std::vector<std::int64_t> original_sizes{16};
  std::vector<std::int64_t> classes{0, 1, 2, 3, 4, 5};
  std::int64_t train_steps = 2000;
  std::int64_t batch = 16;
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::int64_t checkpoint_interval = 500;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 12345;

  std::int64_t train_grid() const { return resolution / std::int64_t(model.patch); }
  std::int64_t train_tokens() const { return train_grid() * train_grid(); }

  DiffusionSchedule schedule() const { return DiffusionSchedule::linear(T, beta_start, beta_end); }

  nn::AdamWConfig optimizer() const {
    nn::AdamWConfig c;
    c.lr = lr;
    c.weight_decay = weight_decay;
    return c;
  }

  // Positional-encoding settings for sampling at test_res x test_res pixels.
  PEConfig pe(std::int64_t test_res) const {
    PEConfig p;
    p.d = model.head_dim();
    p.base = pe_base;
    p.max_h = max_h;
    p.max_w = max_w;
    p.strategy = strategy;
    p.h_train = p.w_train = train_grid();
    p.h_test = p.w_test = test_res / std::int64_t(model.patch);
    return p;
  }

  void validate() const;
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  if constexpr (std::is_unsigned_v<N>) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::int64_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::int64_t>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format_list(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

#define RPE2D_INT(key, field)                                                              \
  ConfigKey {                                                                              \
    key, [](RunConfig& c, const std::string& v) {                                          \
      c.field = parse_number<std::remove_reference_t<decltype(c.field)>>(key, v);          \
    },                                                                                     \
        [](const RunConfig& c) { return std::to_string(c.field); }                         \
  }
#define RPE2D_REAL(key, field)                                                                    \
  ConfigKey {                                                                                     \
    key, [](RunConfig& c, const std::string& v) { c.field = parse_number<double>(key, v); },      \
        [](const RunConfig& c) { return format_double(c.field); }                                 \
  }
#define RPE2D_BOOL(key, field)                                                            \
  ConfigKey {                                                                             \
    key, [](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); },        \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }        \
  }
#define RPE2D_LIST(key, field)                                                            \
  ConfigKey {                                                                             \
    key, [](RunConfig& c, const std::string& v) { c.field = parse_list(key, v); },        \
        [](const RunConfig& c) { return format_list(c.field); }                           \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      RPE2D_INT("model.patch", model.patch),
      RPE2D_INT("model.channels", model.channels),
      RPE2D_INT("model.hidden", model.hidden),
      RPE2D_INT("model.heads", model.heads),
      RPE2D_INT("model.depth", model.depth),
      RPE2D_INT("model.classes", model.classes),
      RPE2D_INT("model.mlp_ratio", model.mlp_ratio),
      RPE2D_INT("model.time_dim", model.time_dim),
      RPE2D_BOOL("model.micro_cond", model.micro_cond),
      RPE2D_INT("cond.dim_per_scalar", model.dim_per_scalar),
      {"pe.strategy", [](RunConfig& c, const std::string& v) { c.strategy = parse_strategy(v); },
       [](const RunConfig& c) { return std::string(to_string(c.strategy)); }},
      RPE2D_REAL("pe.base", pe_base),
      {"rpe.variant", [](RunConfig& c, const std::string& v) { c.variant = parse_rpe_variant(v); },
       [](const RunConfig& c) { return std::string(to_string(c.variant)); }},
      RPE2D_INT("rpe.max_h", max_h),
      RPE2D_INT("rpe.max_w", max_w),
      RPE2D_BOOL("aug.enabled", aug_enabled),
      RPE2D_REAL("aug.p_resize", aug.p_resize),
      RPE2D_REAL("aug.min_crop_frac", aug.min_crop_frac),
      RPE2D_INT("diffusion.T", T),
      RPE2D_REAL("diffusion.beta_start", beta_start),
      RPE2D_REAL("diffusion.beta_end", beta_end),
      RPE2D_INT("diffusion.steps", sample_steps),
      RPE2D_REAL("diffusion.cfg_scale", cfg_scale),
      RPE2D_REAL("diffusion.class_drop", class_drop),
      RPE2D_INT("data.resolution", resolution),
      RPE2D_LIST("data.original_sizes", original_sizes),
      RPE2D_LIST("data.classes", classes),
      RPE2D_INT("train.steps", train_steps),
      RPE2D_INT("train.batch", batch),
      RPE2D_REAL("train.lr", lr),
      RPE2D_REAL("train.weight_decay", weight_decay),
      RPE2D_INT("train.checkpoint_interval", checkpoint_interval),
      RPE2D_INT("seed", seed),
      RPE2D_INT("eval.seed", eval_seed),
  };
  return keys;
}

#undef RPE2D_INT
#undef RPE2D_REAL
#undef RPE2D_BOOL
#undef RPE2D_LIST

}  // namespace detail

// Applies a single `key=value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_assignment(RunConfig& cfg, std::string_view line) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key = value, got '" + detail::trim(line) + "'");
  }
  set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
}

// Parses config text over the defaults and validates the result.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      apply_assignment(cfg, t);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

// Every key in a fixed order; parse_config(dump_config(c)) == c.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

inline void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); };
  if (model.classes > 1000000) fail("model.classes", "too large");
  if (pe_base <= 1.0) fail("pe.base", "must exceed 1");
  if (max_h < 1) fail("rpe.max_h", "must be positive");
  if (max_w < 1) fail("rpe.max_w", "must be positive");
  if (!(aug.p_resize >= 0 && aug.p_resize <= 1)) fail("aug.p_resize", "must lie in [0, 1]");
  if (!(aug.min_crop_frac > 0 && aug.min_crop_frac <= 1)) fail("aug.min_crop_frac", "must lie in (0, 1]");
  if (T < 2) fail("diffusion.T", "must be at least 2");
  if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
    fail("diffusion.beta_start", "need 0 < beta_start < beta_end < 1");
  }
  if (sample_steps < 1 || sample_steps > T) fail("diffusion.steps", "must lie in [1, diffusion.T]");
  if (cfg_scale < 0) fail("diffusion.cfg_scale", "must be non-negative");
  if (!(class_drop >= 0 && class_drop <= 1)) fail("diffusion.class_drop", "must lie in [0, 1]");
  if (resolution < 2 || resolution % std::int64_t(model.patch) != 0) {
    fail("data.resolution", "must be a multiple of model.patch (" + std::to_string(model.patch) + ")");
  }
  for (auto s : original_sizes)
    if (s < 2) fail("data.original_sizes", "sizes must be at least 2");
  for (auto c : classes) {
    if (c < 0 || c >= std::int64_t(kSyntheticClasses)) {
      fail("data.classes", "class " + std::to_string(c) + " is not a synthetic class");
    }
    if (c >= std::int64_t(model.classes)) {
      fail("data.classes", "class " + std::to_string(c) + " exceeds model.classes");
    }
  }
  if (train_steps < 0) fail("train.steps", "must be non-negative");
  if (batch < 1) fail("train.batch", "must be positive");
  if (!(lr > 0)) fail("train.lr", "must be positive");
  if (weight_decay < 0) fail("train.weight_decay", "must be non-negative");
  if (checkpoint_interval < 1) fail("train.checkpoint_interval", "must be positive");
  if (strategy == Strategy::rpe2d && (train_grid() > max_h || train_grid() > max_w)) {
    fail("rpe.max_h", "training grid " + std::to_string(train_grid()) + " exceeds max positions " +
                          std::to_string(max_h) + "x" + std::to_string(max_w));
  }
  if (strategy == Strategy::rpe2d && variant == RpeVariant::naive &&
      train_tokens() > max_h * max_w) {
    fail("rpe.max_h", "training tokens exceed max_h * max_w");
  }
  pe(resolution).validate();
}

}  // namespace rpe2d
