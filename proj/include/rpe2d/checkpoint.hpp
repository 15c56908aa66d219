#pragma once

// Binary checkpoint. All integers and floats are little-endian.
//
//   "RPE2D1\n"
//   u64 config length, config text (canonical key = value dump)
//   u32 parameter count, then per parameter:
//     u32 name length, name, u32 rank, u64 extents[rank], f32 values
//   optimizer: u64 step count, f64 lr, beta1, beta2, eps, weight_decay,
//     u32 moment count, then per moment: u64 length, f32 first[], f32 second[]
//   u64 global step, u64 seed
//   u64 FNV-1a hash of every preceding byte

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rpe2d/config.hpp"
#include "rpe2d/errors.hpp"
#include "rpe2d/model.hpp"
#include "rpe2d/numerics.hpp"
#include "rpe2d/pnm.hpp"

namespace rpe2d {

inline constexpr char kCheckpointMagic[] = "RPE2D1\n";

struct Checkpoint {
  std::string config_text;
  std::vector<nn::Parameter<float>> params;
  nn::OptimizerState<float> optimizer;
  std::uint64_t global_step = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    if (a.config_text != b.config_text || a.global_step != b.global_step || a.seed != b.seed ||
        a.params.size() != b.params.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      const auto& p = a.params[i];
      const auto& q = b.params[i];
      if (p.name != q.name || p.tensor.shape != q.tensor.shape ||
          std::memcmp(p.tensor.data.data(), q.tensor.data.data(), p.tensor.size() * 4) != 0) {
        return false;
      }
    }
    const auto& x = a.optimizer;
    const auto& y = b.optimizer;
    return x.step_count == y.step_count && x.config.lr == y.config.lr &&
           x.config.beta1 == y.config.beta1 && x.config.beta2 == y.config.beta2 &&
           x.config.eps == y.config.eps && x.config.weight_decay == y.config.weight_decay &&
           x.first_moment == y.first_moment && x.second_moment == y.second_moment;
  }
};

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= std::uint8_t(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { buf_ += s; }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}

  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(std::uint8_t(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::vector<float> floats(std::uint64_t n, const char* what) {
    need(n * 4, what);
    std::vector<float> out(n);
    for (auto& v : out) v = f32(what);
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > end_ - pos_) throw InputError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& s_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes(kCheckpointMagic);
  w.uint<std::uint64_t>(ck.config_text.size());
  w.bytes(ck.config_text);
  w.uint<std::uint32_t>(std::uint32_t(ck.params.size()));
  for (const auto& p : ck.params) {
    w.uint<std::uint32_t>(std::uint32_t(p.name.size()));
    w.bytes(p.name);
    w.uint<std::uint32_t>(std::uint32_t(p.tensor.shape.size()));
    for (auto d : p.tensor.shape) w.uint<std::uint64_t>(d);
    w.floats(p.tensor.data);
  }
  const auto& o = ck.optimizer;
  w.uint<std::uint64_t>(o.step_count);
  w.f64(o.config.lr);
  w.f64(o.config.beta1);
  w.f64(o.config.beta2);
  w.f64(o.config.eps);
  w.f64(o.config.weight_decay);
  if (o.first_moment.size() != o.second_moment.size()) {
    throw ShapeError("checkpoint: optimizer moment lists differ in length");
  }
  w.uint<std::uint32_t>(std::uint32_t(o.first_moment.size()));
  for (std::size_t i = 0; i < o.first_moment.size(); ++i) {
    if (o.first_moment[i].size() != o.second_moment[i].size()) {
      throw ShapeError("checkpoint: optimizer moments differ in size");
    }
    w.uint<std::uint64_t>(o.first_moment[i].size());
    w.floats(o.first_moment[i]);
    w.floats(o.second_moment[i]);
  }
  w.uint<std::uint64_t>(ck.global_step);
  w.uint<std::uint64_t>(ck.seed);
  const std::uint64_t h = fnv1a64(w.str().data(), w.str().size());
  w.uint<std::uint64_t>(h);
  return std::move(w.str());
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw InputError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < magic_len + 8) throw InputError("checkpoint truncated");
  const std::size_t body = bytes.size() - 8;
  detail::Reader footer(bytes, bytes.size());
  footer.bytes(body, "body");
  if (footer.uint<std::uint64_t>("hash") != fnv1a64(bytes.data(), body)) {
    throw InputError("checkpoint hash mismatch (corrupt or truncated file)");
  }

  detail::Reader r(bytes, body);
  r.bytes(magic_len, "magic");
  Checkpoint ck;
  ck.config_text = r.bytes(r.uint<std::uint64_t>("config length"), "config");
  const auto n = r.uint<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < n; ++i) {
    nn::Parameter<float> p;
    p.name = r.bytes(r.uint<std::uint32_t>("name length"), "name");
    const auto rank = r.uint<std::uint32_t>("rank");
    nn::Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.uint<std::uint64_t>("extent"));
      if (shape.back() != 0 && count > (std::uint64_t(1) << 40) / shape.back()) {
        throw InputError("checkpoint: implausible shape for " + p.name);
      }
      count *= shape.back();
    }
    p.tensor = nn::Tensor(shape, r.floats(count, "parameter values"));
    ck.params.push_back(std::move(p));
  }
  auto& o = ck.optimizer;
  o.step_count = r.uint<std::uint64_t>("optimizer step");
  o.config.lr = r.f64("lr");
  o.config.beta1 = r.f64("beta1");
  o.config.beta2 = r.f64("beta2");
  o.config.eps = r.f64("eps");
  o.config.weight_decay = r.f64("weight decay");
  const auto moments = r.uint<std::uint32_t>("moment count");
  for (std::uint32_t i = 0; i < moments; ++i) {
    const auto len = r.uint<std::uint64_t>("moment length");
    o.first_moment.push_back(r.floats(len, "first moment"));
    o.second_moment.push_back(r.floats(len, "second moment"));
  }
  ck.global_step = r.uint<std::uint64_t>("global step");
  ck.seed = r.uint<std::uint64_t>("seed");
  if (r.pos() != body) throw InputError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  write_file(tmp, serialize_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  try {
    return deserialize_checkpoint(read_file(path));
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline Checkpoint make_checkpoint(const RunConfig& cfg, const DiT<float>& model,
                                  const nn::OptimizerState<float>& opt, std::uint64_t step) {
  Checkpoint ck;
  ck.config_text = dump_config(cfg);
  for (const auto* p : model.parameters()) ck.params.push_back({p->name, nn::Tensor(p->tensor.shape, p->tensor.data)});
  ck.optimizer = opt;
  ck.global_step = step;
  ck.seed = cfg.seed;
  return ck;
}

// Copies stored tensors into a model built from the same configuration.
inline void load_parameters(DiT<float>& model, const Checkpoint& ck) {
  auto params = model.parameters();
  if (params.size() != ck.params.size()) {
    throw InputError("checkpoint has " + std::to_string(ck.params.size()) +
                     " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ck.params[i];
    if (src.name != params[i]->name || src.tensor.shape != params[i]->tensor.shape) {
      throw InputError("checkpoint parameter " + src.name + " " + nn::shape_str(src.tensor.shape) +
                       " does not match " + params[i]->name + " " +
                       nn::shape_str(params[i]->tensor.shape));
    }
    params[i]->tensor.data = src.tensor.data;
  }
}

}  // namespace rpe2d
