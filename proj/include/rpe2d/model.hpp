#pragma once

// A small diffusion transformer: patch embedding, adaLN-Zero blocks with
// 2D-rotary self-attention, and a linear unpatchify head.

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rpe2d/conditioning.hpp"
#include "rpe2d/errors.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/posenc.hpp"
#include "rpe2d/rng.hpp"

namespace rpe2d {

struct ModelConfig {
  std::size_t patch = 2;
  std::size_t channels = 1;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t classes = 8;
  std::size_t mlp_ratio = 4;
  std::size_t time_dim = 256;        // width of the sinusoidal timestep features
  std::size_t dim_per_scalar = 32;   // micro-condition features per scalar
  bool micro_cond = true;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t cond_width() const { return 8 * dim_per_scalar; }

  void validate() const {
    if (patch == 0 || channels == 0 || hidden == 0 || heads == 0 || depth == 0 || classes == 0) {
      throw ConfigError("model sizes must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError("model.hidden (" + std::to_string(hidden) +
                        ") must be divisible by model.heads (" + std::to_string(heads) + ")");
    }
    if (head_dim() % 4 != 0) {
      throw ConfigError("per-head dimension " + std::to_string(head_dim()) +
                        " must be divisible by 4 for 2D rotary encoding");
    }
    if (time_dim % 2 != 0 || dim_per_scalar % 2 != 0) {
      throw ConfigError("embedding widths must be even");
    }
  }
};

enum class ScaleMode { train, extrapolate };

// Attention logit multiplier: 1/sqrt(d) when training, log_n(m)/sqrt(d) when
// sampling with m tokens from a model trained on n tokens.
inline double attention_multiplier(std::size_t head_dim, ScaleMode mode, double m_test = 0,
                                   double n_train = 0) {
  const double base = 1.0 / std::sqrt(double(head_dim));
  if (mode == ScaleMode::train) return base;
  if (m_test <= 1.0 || n_train <= 1.0) {
    throw ConfigError("attention scale needs more than one token at train and test time");
  }
  return (std::log2(m_test) / std::log2(n_train)) * base;
}

// Rearranges C x (p*h) x (p*w) into (h*w) x (C*p*p) patches, row-major over
// patches, each flattened in (channel, dy, dx) order.
template <typename T>
nn::BasicTensor<T> patchify(const nn::BasicTensor<T>& image, std::size_t p) {
  if (image.rank() != 3) throw ShapeError("patchify: expected C x H x W, got " + nn::shape_str(image.shape));
  const std::size_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
  if (H % p != 0 || W % p != 0) {
    throw ShapeError("patchify: " + nn::shape_str(image.shape) + " is not divisible by patch " +
                     std::to_string(p));
  }
  const std::size_t h = H / p, w = W / p, f = C * p * p;
  nn::BasicTensor<T> out({h * w, f});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            out.data[(i * w + j) * f + (c * p + dy) * p + dx] =
                image.data[(c * H + i * p + dy) * W + j * p + dx];
  return out;
}

template <typename T>
nn::BasicTensor<T> unpatchify(const nn::BasicTensor<T>& patches, std::size_t h, std::size_t w,
                              std::size_t p, std::size_t C) {
  const std::size_t f = C * p * p;
  if (patches.size() != h * w * f) {
    throw ShapeError("unpatchify: " + nn::shape_str(patches.shape) + " does not hold " +
                     std::to_string(h) + "x" + std::to_string(w) + " patches of " +
                     std::to_string(f));
  }
  const std::size_t H = h * p, W = w * p;
  nn::BasicTensor<T> out({C, H, W});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            out.data[(c * H + i * p + dy) * W + j * p + dx] =
                patches.data[(i * w + j) * f + (c * p + dy) * p + dx];
  return out;
}

// Everything the network is conditioned on besides the image and positions.
struct Conditioning {
  double timestep = 0;
  std::optional<std::size_t> label;           // nullopt selects the learned null class
  std::optional<MicroCondition> micro;        // ignored when micro-conditioning is off
};

template <typename T>
class DiT {
 public:
  using Tensor = nn::BasicTensor<T>;
  using Tape = nn::Tape<T>;
  using Var = nn::Var;
  using Rotation = std::shared_ptr<const nn::PairRotation<T>>;

  DiT(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    SeededRng rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<nn::Parameter<T>*> parameters() {
    std::vector<nn::Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<const nn::Parameter<T>*> parameters() const {
    std::vector<const nn::Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Overwrites every parameter with N(0, stddev^2) noise; used by the
  // gradient audits, where zero-initialized gates would hide most gradients.
  void randomize(SeededRng& rng, double stddev) {
    for (auto& p : params_)
      for (auto& v : p.tensor.data) v = T(stddev * rng.normal());
  }

  // The conditioning vector c = t_emb + class_emb (+ micro_emb), [1, hidden].
  Var condition(Tape& tape, const Conditioning& cond) {
    const auto tf = sinpe(cond.timestep, cfg_.time_dim);
    Var t = tape.constant(Tensor({1, cfg_.time_dim}, std::vector<T>(tf.begin(), tf.end())));
    Var temb = linear(tape, tape.silu(linear(tape, t, t_fc1_)), t_fc2_);
    std::size_t row = cfg_.classes;
    if (cond.label) {
      if (*cond.label >= cfg_.classes) {
        throw InputError("class label " + std::to_string(*cond.label) + " out of range for " +
                         std::to_string(cfg_.classes) + " classes");
      }
      row = *cond.label;
    }
    Var c = tape.add(temb, tape.gather_row(tape.parameter(param(class_table_)), row));
    if (cfg_.micro_cond) {
      const MicroCondition mc = cond.micro.value_or(MicroCondition{});
      const auto me = embed_microcondition(mc, cfg_.dim_per_scalar, cfg_.cond_width());
      Var m = tape.constant(Tensor({1, cfg_.cond_width()}, std::vector<T>(me.begin(), me.end())));
      c = tape.add(c, linear(tape, m, micro_fc_));
    }
    return c;
  }

  // Embeds patches of `image` into [tokens, hidden].
  Var embed(Tape& tape, const Tensor& image) {
    if (image.shape.at(0) != cfg_.channels) {
      throw ShapeError("image has " + std::to_string(image.shape[0]) + " channels, model expects " +
                       std::to_string(cfg_.channels));
    }
    return linear(tape, tape.constant(patchify(image, cfg_.patch)), patch_embed_);
  }

  Rotation rotation(const TokenPositions& pos) const {
    auto [cs, sn] = rotation_tables<T>(pos, cfg_.head_dim());
    return std::make_shared<const nn::PairRotation<T>>(nn::PairRotation<T>{std::move(cs), std::move(sn)});
  }

  // x + gate * f(modulate(LN(x))) for the attention and MLP branches.
  Var block(Tape& tape, std::size_t l, Var x, Var silu_c, const Rotation& rot,
            double multiplier) {
    const std::size_t D = cfg_.hidden;
    const Block& b = blocks_.at(l);
    Var mod = linear(tape, silu_c, b.ada);
    auto chunk = [&](std::size_t k) { return tape.slice_cols(mod, k * D, D); };
    Var h = modulate(tape, tape.layer_norm(x), chunk(0), chunk(1));
    Var a = attention(tape, h, b, rot, multiplier);
    x = tape.add(x, tape.mul_row(a, chunk(2)));
    Var h2 = modulate(tape, tape.layer_norm(x), chunk(3), chunk(4));
    Var f = linear(tape, tape.gelu(linear(tape, h2, b.fc1)), b.fc2);
    return tape.add(x, tape.mul_row(f, chunk(5)));
  }

  // Final adaLN + linear head, [tokens, C*p*p].
  Var head(Tape& tape, Var x, Var silu_c) {
    const std::size_t D = cfg_.hidden;
    Var mod = linear(tape, silu_c, final_ada_);
    Var h = modulate(tape, tape.layer_norm(x), tape.slice_cols(mod, 0, D),
                     tape.slice_cols(mod, D, D));
    return linear(tape, h, final_out_);
  }

  // Predicted noise in patch layout, [tokens, C*p*p].
  Var forward(Tape& tape, const Tensor& image, const Conditioning& cond, const TokenPositions& pos,
              double multiplier) {
    const std::size_t p = cfg_.patch;
    if (image.rank() != 3 || image.shape[1] / p != pos.rows || image.shape[2] / p != pos.cols) {
      throw ShapeError("position grid " + std::to_string(pos.rows) + "x" +
                       std::to_string(pos.cols) + " does not match image " +
                       nn::shape_str(image.shape) + " with patch " + std::to_string(p));
    }
    Var x = embed(tape, image);
    Var sc = tape.silu(condition(tape, cond));
    const Rotation rot = rotation(pos);
    for (std::size_t l = 0; l < cfg_.depth; ++l) x = block(tape, l, x, sc, rot, multiplier);
    return head(tape, x, sc);
  }

  // Inference: predicted noise as a C x H x W image.
  Tensor predict(const Tensor& image, const Conditioning& cond, const TokenPositions& pos,
                 double multiplier) {
    Tape tape;
    tape.set_recording(false);
    Var out = forward(tape, image, cond, pos, multiplier);
    return unpatchify(tape.tensor(out), pos.rows, pos.cols, cfg_.patch, cfg_.channels);
  }

  nn::Parameter<T>& param(std::size_t index) { return params_.at(index); }
  const nn::Parameter<T>& param(std::size_t index) const { return params_.at(index); }

 private:
  struct LinearIds {
    std::size_t w = 0, b = 0;
  };
  struct Block {
    LinearIds ada, qkv, proj, fc1, fc2;
  };

  std::size_t add_param(std::string name, nn::Shape shape) {
    params_.push_back({std::move(name), Tensor(std::move(shape))});
    return params_.size() - 1;
  }

  LinearIds add_linear(const std::string& name, std::size_t in, std::size_t out) {
    return {add_param(name + ".w", {in, out}), add_param(name + ".b", {out})};
  }

  void xavier(std::size_t id, SeededRng& rng) {
    auto& t = params_[id].tensor;
    const double a = std::sqrt(6.0 / double(t.shape[0] + t.shape[1]));
    for (auto& v : t.data) v = T(rng.uniform(-a, a));
  }

  void normal(std::size_t id, SeededRng& rng, double std) {
    for (auto& v : params_[id].tensor.data) v = T(std * rng.normal());
  }

  void build(SeededRng& rng) {
    const std::size_t D = cfg_.hidden;
    const std::size_t f = cfg_.channels * cfg_.patch * cfg_.patch;
    patch_embed_ = add_linear("patch_embed", f, D);
    xavier(patch_embed_.w, rng);
    t_fc1_ = add_linear("t_embed.fc1", cfg_.time_dim, D);
    t_fc2_ = add_linear("t_embed.fc2", D, D);
    normal(t_fc1_.w, rng, 0.02);
    normal(t_fc2_.w, rng, 0.02);
    class_table_ = add_param("class_embed", {cfg_.classes + 1, D});
    normal(class_table_, rng, 0.02);
    if (cfg_.micro_cond) {
      micro_fc_ = add_linear("micro_embed", cfg_.cond_width(), D);
      normal(micro_fc_.w, rng, 0.02);
    }
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string n = "blocks." + std::to_string(l);
      Block b;
      b.ada = add_linear(n + ".adaln", D, 6 * D);  // zero: the block starts as identity
      b.qkv = add_linear(n + ".attn.qkv", D, 3 * D);
      b.proj = add_linear(n + ".attn.proj", D, D);
      b.fc1 = add_linear(n + ".mlp.fc1", D, cfg_.mlp_ratio * D);
      b.fc2 = add_linear(n + ".mlp.fc2", cfg_.mlp_ratio * D, D);
      xavier(b.qkv.w, rng);
      xavier(b.proj.w, rng);
      xavier(b.fc1.w, rng);
      xavier(b.fc2.w, rng);
      blocks_.push_back(b);
    }
    final_ada_ = add_linear("final.adaln", D, 2 * D);
    final_out_ = add_linear("final.linear", D, f);
    xavier(final_out_.w, rng);
  }

  Var linear(Tape& tape, Var x, const LinearIds& ids) {
    return tape.linear(x, tape.parameter(params_[ids.w]), tape.parameter(params_[ids.b]));
  }

  static Var modulate(Tape& tape, Var x, Var shift, Var scale) {
    return tape.add_row(tape.add(x, tape.mul_row(x, scale)), shift);
  }

  Var attention(Tape& tape, Var h, const Block& b, const Rotation& rot, double multiplier) {
    const std::size_t D = cfg_.hidden, dh = cfg_.head_dim();
    Var qkv = linear(tape, h, b.qkv);
    std::vector<Var> heads;
    for (std::size_t k = 0; k < cfg_.heads; ++k) {
      Var q = tape.rotate_pairs(tape.slice_cols(qkv, k * dh, dh), rot);
      Var kk = tape.rotate_pairs(tape.slice_cols(qkv, D + k * dh, dh), rot);
      Var v = tape.slice_cols(qkv, 2 * D + k * dh, dh);
      Var att = tape.softmax_rows(tape.matmul_nt(q, kk), T(multiplier));
      heads.push_back(tape.matmul(att, v));
    }
    return linear(tape, tape.concat_cols(heads), b.proj);
  }

  ModelConfig cfg_;
  std::deque<nn::Parameter<T>> params_;
  LinearIds patch_embed_, t_fc1_, t_fc2_, micro_fc_, final_ada_, final_out_;
  std::size_t class_table_ = 0;
  std::vector<Block> blocks_;
};

}  // namespace rpe2d
