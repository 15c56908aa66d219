#pragma once

// Dense row-major tensors, a reverse-mode autodiff tape and AdamW.
//
// Everything is templated on the scalar type. Training runs in float; the
// gradient audits instantiate the same code in double so that central finite
// differences are accurate enough to compare against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <ranges>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rpe2d/errors.hpp"

namespace rpe2d::nn {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Eigen picks its vectorized code paths from
// operand alignment, so unaligned buffers would make results depend on where
// malloc happened to place them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{alignment}); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

// Training and sampling allocate and free the same large activations every
// step. glibc otherwise hands those back to the kernel each time, which costs
// as much as the arithmetic.
inline void keep_heap_mapped() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Aligned allocator whose value-initialization is default-initialization, so
// sized scratch buffers that are about to be overwritten skip the zero fill.
template <typename T, typename A = AlignedAllocator<T>>
class DefaultInitAllocator : public A {
 public:
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

template <typename T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct BasicTensor {
  Shape shape;
  Storage<T> data;
  Storage<T> grad;  // empty, or one entry per element of data

  BasicTensor() = default;

  explicit BasicTensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {}

  template <typename Range>
    requires std::ranges::input_range<Range>
  BasicTensor(Shape s, const Range& values)
      : shape(std::move(s)), data(std::ranges::begin(values), std::ranges::end(values)) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }

  BasicTensor(Shape s, std::initializer_list<T> values)
      : BasicTensor(std::move(s), std::span<const T>(values.begin(), values.size())) {}

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }

  T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  T at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void zero_grad() { grad.assign(data.size(), T{0}); }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape, data);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

using Tensor = BasicTensor<float>;

// A named learnable tensor. Its grad buffer is where the tape accumulates.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> tensor;
};

// ---------------------------------------------------------------------------
// GEMM kernels over row-major buffers, backed by Eigen. `accumulate` adds
// into c instead of overwriting.

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

// c[m,n] (+)= a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  MutMap<T> C(c, m, n);
  if (accumulate) C.noalias() += ConstMap<T>(a, m, k) * ConstMap<T>(b, k, n);
  else C.noalias() = ConstMap<T>(a, m, k) * ConstMap<T>(b, k, n);
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  MutMap<T> C(c, m, n);
  if (accumulate) C.noalias() += ConstMap<T>(a, m, k) * ConstMap<T>(b, n, k).transpose();
  else C.noalias() = ConstMap<T>(a, m, k) * ConstMap<T>(b, n, k).transpose();
}

// c[m,n] (+)= a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
  MutMap<T> C(c, m, n);
  if (accumulate) C.noalias() += ConstMap<T>(a, k, m).transpose() * ConstMap<T>(b, k, n);
  else C.noalias() = ConstMap<T>(a, k, m).transpose() * ConstMap<T>(b, k, n);
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape) + " by " + shape_str(b.shape));
  }
  BasicTensor<T> c({a.shape[0], b.shape[1]});
  gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1], false);
  return c;
}

// Row-wise softmax(scale * x) over the last dimension, stabilized by max
// subtraction.
template <typename T>
void softmax_rows_inplace(std::span<T> x, std::size_t cols, T scale = T{1}) {
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
  for (std::size_t r = 0; r + cols <= x.size(); r += cols) {
    Eigen::Map<Row> row(x.data() + r, Eigen::Index(cols));
    const T mx = row.maxCoeff();
    row = ((row - mx) * scale).exp();
    row *= T{1} / row.sum();
  }
}

template <typename T>
BasicTensor<T> softmax_lastdim(BasicTensor<T> x) {
  softmax_rows_inplace(std::span<T>(x.data), x.shape.empty() ? 1 : x.shape.back());
  return x;
}

template <typename T>
T gelu_value(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T k = T(0.7978845608028654);
  const T inner = k * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(inner);
  const T dinner = k * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * dinner;
}

// ---------------------------------------------------------------------------

// Per-pair cosines and sines shared by several rotate_pairs nodes.
template <typename T>
struct PairRotation {
  std::vector<T> cos;
  std::vector<T> sin;
};

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
};

// Records a fixed computation graph for one step and replays it backwards.
// Nodes are appended in evaluation order, so reverse order is a valid
// topological order for the backward sweep.
template <typename T>
class Tape {
 public:
  using Tensor = BasicTensor<T>;

  std::size_t size() const { return nodes_.size(); }

  // With recording off no backward closures are kept and parameters enter
  // as constants; used for inference.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  Var constant(const Tensor& t) { return push(t.shape, Buffer<T>(t.data.begin(), t.data.end()), false, nullptr); }

  // A leaf whose gradient can be read back with grad().
  Var input(const Tensor& t) { return push(t.shape, Buffer<T>(t.data.begin(), t.data.end()), true, nullptr); }

  // A leaf that aliases the parameter's storage; its gradient accumulates
  // straight into the parameter's grad buffer.
  Var parameter(Parameter<T>& p) {
    Node n;
    n.shape = p.tensor.shape;
    n.external = p.tensor.data.data();
    n.size = p.tensor.data.size();
    if (recording_) {
      if (p.tensor.grad.size() != p.tensor.data.size()) p.tensor.zero_grad();
      n.external_grad = p.tensor.grad.data();
      n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }

  std::span<const T> value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return {n.external ? n.external : n.value.data(), n.size};
  }

  Tensor tensor(Var v) const {
    auto s = value(v);
    return Tensor(shape(v), std::vector<T>(s.begin(), s.end()));
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of v, allocated (zeroed) on first use.
  std::span<T> grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.external_grad) return {n.external_grad, n.size};
    if (n.grad.size() != n.size) n.grad.assign(n.size, T{0});
    return {n.grad.data(), n.size};
  }

  void backward(Var loss) {
    if (numel(shape(loss)) != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(shape(loss)));
    }
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward) continue;
      if (!n.external_grad && n.grad.empty()) continue;  // nothing flowed here
      n.backward(*this, Var{i});
    }
  }

  // ---- ops ---------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      throw ShapeError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Buffer<T> out(m * n);
    gemm_nn(value(a).data(), value(b).data(), out.data(), m, k, n, false);
    return push({m, n}, std::move(out), any_grad(a, b), [a, b, m, k, n](Tape& t, Var self) {
      const T* g = t.grad(self).data();
      if (t.requires_grad(a)) gemm_nt(g, t.value(b).data(), t.grad(a).data(), m, n, k, true);
      if (t.requires_grad(b)) gemm_tn(t.value(a).data(), g, t.grad(b).data(), k, m, n, true);
    });
  }

  // a[m,k] * b[n,k]^T
  Var matmul_nt(Var a, Var b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) {
      throw ShapeError("matmul_nt: cannot multiply " + shape_str(sa) + " by transpose of " +
                       shape_str(sb));
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[0];
    Buffer<T> out(m * n);
    gemm_nt(value(a).data(), value(b).data(), out.data(), m, k, n, false);
    return push({m, n}, std::move(out), any_grad(a, b), [a, b, m, k, n](Tape& t, Var self) {
      const T* g = t.grad(self).data();
      if (t.requires_grad(a)) gemm_nn(g, t.value(b).data(), t.grad(a).data(), m, n, k, true);
      if (t.requires_grad(b)) gemm_tn(g, t.value(a).data(), t.grad(b).data(), n, m, k, true);
    });
  }

  Var transpose(Var a) {
    const Shape& sa = shape(a);
    if (sa.size() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(sa));
    const std::size_t r = sa[0], c = sa[1];
    auto x = value(a);
    Buffer<T> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return push({c, r}, std::move(out), requires_grad(a), [a, r, c](Tape& t, Var self) {
      auto g = t.grad(self);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }

  Var reshape(Var a, Shape s) {
    if (numel(s) != numel(shape(a))) {
      throw ShapeError("reshape: " + shape_str(shape(a)) + " to " + shape_str(s));
    }
    auto x = value(a);
    return push(std::move(s), Buffer<T>(x.begin(), x.end()), requires_grad(a),
                [a](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto ga = t.grad(a);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
  }

  Var add(Var a, Var b) { return binary(a, b, "add", T{1}); }
  Var sub(Var a, Var b) { return binary(a, b, "sub", T{-1}); }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    auto x = value(a);
    auto y = value(b);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return push(shape(a), std::move(out), any_grad(a, b), [a, b](Tape& t, Var self) {
      auto g = t.grad(self);
      if (t.requires_grad(a)) {
        auto ga = t.grad(a);
        auto y = t.value(b);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (t.requires_grad(b)) {
        auto gb = t.grad(b);
        auto x = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }

  Var scale(Var a, T c) {
    auto x = value(a);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
    return push(shape(a), std::move(out), requires_grad(a), [a, c](Tape& t, Var self) {
      auto g = t.grad(self);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }

  // a[m,n] + row[n] broadcast over rows.
  Var add_row(Var a, Var row) {
    const auto [m, n] = row_broadcast(a, row, "add_row");
    auto x = value(a);
    auto r = value(row);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
    return push(shape(a), std::move(out), any_grad(a, row), [a, row, m, n](Tape& t, Var self) {
      auto g = t.grad(self);
      if (t.requires_grad(a)) {
        auto ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(row)) {
        auto gr = t.grad(row);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
    });
  }

  // a[m,n] * row[n] broadcast over rows.
  Var mul_row(Var a, Var row) {
    const auto [m, n] = row_broadcast(a, row, "mul_row");
    auto x = value(a);
    auto r = value(row);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * r[j];
    return push(shape(a), std::move(out), any_grad(a, row), [a, row, m, n](Tape& t, Var self) {
      auto g = t.grad(self);
      auto x = t.value(a);
      auto r = t.value(row);
      if (t.requires_grad(a)) {
        auto ga = t.grad(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * r[j];
      }
      if (t.requires_grad(row)) {
        auto gr = t.grad(row);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j] * x[i * n + j];
      }
    });
  }

  // Per-row normalization to zero mean and unit variance, no affine.
  Var layer_norm(Var a, T eps = T(1e-6)) {
    const std::size_t n = shape(a).back();
    const std::size_t m = numel(shape(a)) / n;
    auto x = value(a);
    Buffer<T> out(x.size());
    std::vector<T> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = x.data() + i * n;
      T mean{0};
      for (std::size_t j = 0; j < n; ++j) mean += row[j];
      mean /= T(n);
      T var{0};
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= T(n);
      inv_std[i] = T{1} / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mean) * inv_std[i];
    }
    return push(shape(a), std::move(out), requires_grad(a),
                [a, m, n, inv_std = std::move(inv_std)](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto y = t.value(self);
                  auto ga = t.grad(a);
                  for (std::size_t i = 0; i < m; ++i) {
                    T gmean{0}, gy{0};
                    for (std::size_t j = 0; j < n; ++j) {
                      gmean += g[i * n + j];
                      gy += g[i * n + j] * y[i * n + j];
                    }
                    gmean /= T(n);
                    gy /= T(n);
                    for (std::size_t j = 0; j < n; ++j) {
                      ga[i * n + j] += inv_std[i] * (g[i * n + j] - gmean - y[i * n + j] * gy);
                    }
                  }
                });
  }

  // tanh-approximated GELU.
  Var gelu(Var a) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    auto x = value(a);
    const auto n = Eigen::Index(x.size());
    Eigen::Map<const Arr> xa(x.data(), n);
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    Arr th = (k * (xa + T(0.044715) * xa.cube())).tanh();
    Buffer<T> out(x.size());
    Eigen::Map<Arr>(out.data(), n) = T(0.5) * xa * (T(1) + th);
    return push(shape(a), std::move(out), requires_grad(a),
                [a, th = std::move(th)](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto x = t.value(a);
                  auto ga = t.grad(a);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const T xi = x[i], ti = th[Eigen::Index(i)];
                    const T dinner = k * (T(1) + T(3) * T(0.044715) * xi * xi);
                    ga[i] += g[i] * (T(0.5) * (T(1) + ti) + T(0.5) * xi * (T(1) - ti * ti) * dinner);
                  }
                });
  }

  Var silu(Var a) {
    auto x = value(a);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T{1} + std::exp(-x[i]));
    return push(shape(a), std::move(out), requires_grad(a), [a](Tape& t, Var self) {
      auto g = t.grad(self);
      auto x = t.value(a);
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-x[i]));
        ga[i] += g[i] * s * (T{1} + x[i] * (T{1} - s));
      }
    });
  }

  // softmax(scale * a) over each row.
  Var softmax_rows(Var a, T scale = T{1}) {
    const std::size_t n = shape(a).back();
    auto x = value(a);
    Buffer<T> out(x.begin(), x.end());
    softmax_rows_inplace(std::span<T>(out), n, scale);
    return push(shape(a), std::move(out), requires_grad(a), [a, n, scale](Tape& t, Var self) {
      auto g = t.grad(self);
      auto y = t.value(self);
      auto ga = t.grad(a);
      for (std::size_t r = 0; r < g.size(); r += n) {
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[r + j] * y[r + j];
        for (std::size_t j = 0; j < n; ++j) ga[r + j] += scale * y[r + j] * (g[r + j] - dot);
      }
    });
  }

  // Columns [start, start+len) of a rank-2 tensor.
  Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const Shape& sa = shape(a);
    if (sa.size() != 2 || start + len > sa[1]) {
      throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") out of " + shape_str(sa));
    }
    const std::size_t m = sa[0], n = sa[1];
    auto x = value(a);
    Buffer<T> out(m * len);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.data() + i * n + start, len, out.data() + i * len);
    return push({m, len}, std::move(out), requires_grad(a),
                [a, m, n, start, len](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto ga = t.grad(a);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < len; ++j) ga[i * n + start + j] += g[i * len + j];
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = shape(parts[0]).at(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    bool rg = false;
    for (Var p : parts) {
      const Shape& s = shape(p);
      if (s.size() != 2 || s[0] != m) {
        throw ShapeError("concat_cols: " + shape_str(s) + " does not have " + std::to_string(m) +
                         " rows");
      }
      widths.push_back(s[1]);
      total += s[1];
      rg = rg || requires_grad(p);
    }
    Buffer<T> out(m * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto x = value(parts[k]);
      for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.data() + i * widths[k], widths[k], out.data() + i * total + off);
      off += widths[k];
    }
    return push({m, total}, std::move(out), rg,
                [parts, widths, m, total](Tape& t, Var self) {
                  auto g = t.grad(self);
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < parts.size(); ++k) {
                    if (t.requires_grad(parts[k])) {
                      auto gp = t.grad(parts[k]);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                          gp[i * widths[k] + j] += g[i * total + off + j];
                    }
                    off += widths[k];
                  }
                });
  }

  // Rotates each pair (x[r,2i], x[r,2i+1]) by the angle whose cosine and sine
  // are cos[r,i], sin[r,i]. The backward pass is the inverse rotation.
  Var rotate_pairs(Var a, std::shared_ptr<const PairRotation<T>> rot) {
    const Shape& sa = shape(a);
    if (!rot || sa.size() != 2 || sa[1] % 2 != 0 || rot->cos.size() != sa[0] * sa[1] / 2 ||
        rot->sin.size() != rot->cos.size()) {
      throw ShapeError("rotate_pairs: table size does not match " + shape_str(sa));
    }
    const std::size_t pairs = numel(sa) / 2;
    auto x = value(a);
    Buffer<T> out(x.size());
    const T* cs = rot->cos.data();
    const T* sn = rot->sin.data();
    for (std::size_t p = 0; p < pairs; ++p) {
      const T u = x[2 * p], v = x[2 * p + 1];
      out[2 * p] = u * cs[p] - v * sn[p];
      out[2 * p + 1] = u * sn[p] + v * cs[p];
    }
    return push(sa, std::move(out), requires_grad(a),
                [a, pairs, rot = std::move(rot)](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto ga = t.grad(a);
                  for (std::size_t p = 0; p < pairs; ++p) {
                    const T gu = g[2 * p], gv = g[2 * p + 1];
                    ga[2 * p] += gu * rot->cos[p] + gv * rot->sin[p];
                    ga[2 * p + 1] += -gu * rot->sin[p] + gv * rot->cos[p];
                  }
                });
  }

  Var rotate_pairs(Var a, std::vector<T> cos, std::vector<T> sin) {
    return rotate_pairs(a, std::make_shared<const PairRotation<T>>(
                               PairRotation<T>{std::move(cos), std::move(sin)}));
  }

  // Row `index` of a rank-2 table, as a [1, n] tensor.
  Var gather_row(Var table, std::size_t index) {
    const Shape& s = shape(table);
    if (s.size() != 2 || index >= s[0]) {
      throw ShapeError("gather_row: row " + std::to_string(index) + " out of " + shape_str(s));
    }
    const std::size_t n = s[1];
    auto x = value(table);
    Buffer<T> out(x.begin() + index * n, x.begin() + (index + 1) * n);
    return push({1, n}, std::move(out), requires_grad(table),
                [table, index, n](Tape& t, Var self) {
                  auto g = t.grad(self);
                  auto gt = t.grad(table);
                  for (std::size_t j = 0; j < n; ++j) gt[index * n + j] += g[j];
                });
  }

  // Mean squared error against a fixed target; returns a [1] tensor.
  Var mse(Var a, std::span<const T> target) {
    auto x = value(a);
    if (x.size() != target.size()) {
      throw ShapeError("mse: prediction " + shape_str(shape(a)) + " vs " +
                       std::to_string(target.size()) + " targets");
    }
    T sum{0};
    for (std::size_t i = 0; i < x.size(); ++i) sum += (x[i] - target[i]) * (x[i] - target[i]);
    const T inv_n = T{1} / T(x.size());
    std::vector<T> tgt(target.begin(), target.end());
    return push({1}, Buffer<T>{sum * inv_n}, requires_grad(a),
                [a, inv_n, tgt = std::move(tgt)](Tape& t, Var self) {
                  const T g = t.grad(self)[0];
                  auto x = t.value(a);
                  auto ga = t.grad(a);
                  for (std::size_t i = 0; i < x.size(); ++i)
                    ga[i] += g * T{2} * inv_n * (x[i] - tgt[i]);
                });
  }

  // x * W + b with W [in, out] and b [out].
  Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

 private:
  using Backward = std::function<void(Tape&, Var)>;

  struct Node {
    Shape shape;
    Buffer<T> value;
    const T* external = nullptr;
    T* external_grad = nullptr;
    std::size_t size = 0;
    std::vector<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Shape s, Buffer<T> value, bool rg, Backward fn) {
    Node n;
    n.size = value.size();
    n.shape = std::move(s);
    n.value = std::move(value);
    n.requires_grad = rg && recording_;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool any_grad(Var a, Var b) const { return requires_grad(a) || requires_grad(b); }

  void check_same(Var a, Var b, const char* op) const {
    if (shape(a) != shape(b)) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(shape(a)) + " and " +
                       shape_str(shape(b)) + " differ");
    }
  }

  std::pair<std::size_t, std::size_t> row_broadcast(Var a, Var row, const char* op) const {
    const Shape& sa = shape(a);
    const std::size_t n = sa.back();
    if (numel(shape(row)) != n) {
      throw ShapeError(std::string(op) + ": row " + shape_str(shape(row)) +
                       " does not broadcast over " + shape_str(sa));
    }
    return {numel(sa) / n, n};
  }

  Var binary(Var a, Var b, const char* op, T sign) {
    check_same(a, b, op);
    auto x = value(a);
    auto y = value(b);
    Buffer<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + sign * y[i];
    return push(shape(a), std::move(out), any_grad(a, b), [a, b, sign](Tape& t, Var self) {
      auto g = t.grad(self);
      if (t.requires_grad(a)) {
        auto ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(b)) {
        auto gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
    });
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
};

// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
  std::uint64_t step_count = 0;
  AdamWConfig config;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// AdamW with decoupled weight decay. The step counter is incremented before
// the bias correction is computed.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) { state_.config = config; }

  OptimizerState<T>& state() { return state_; }
  const OptimizerState<T>& state() const { return state_; }

  void step(std::span<Parameter<T>* const> params) {
    if (state_.first_moment.empty()) {
      for (const auto* p : params) {
        state_.first_moment.emplace_back(p->tensor.data.size(), T{0});
        state_.second_moment.emplace_back(p->tensor.data.size(), T{0});
      }
    }
    if (state_.first_moment.size() != params.size()) {
      throw ShapeError("adamw: optimizer state holds " +
                       std::to_string(state_.first_moment.size()) + " moments for " +
                       std::to_string(params.size()) + " parameters");
    }
    for (const auto* p : params) {
      if (p->tensor.grad.size() != p->tensor.data.size()) {
        throw ShapeError("adamw: parameter " + p->name + " has no gradient buffer");
      }
      for (T g : p->tensor.grad) {
        if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + p->name);
      }
    }
    const AdamWConfig& c = state_.config;
    ++state_.step_count;
    const double t = static_cast<double>(state_.step_count);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k]->tensor.data;
      const auto& g = params[k]->tensor.grad;
      auto& m = state_.first_moment[k];
      auto& v = state_.second_moment[k];
      if (m.size() != w.size()) {
        throw ShapeError("adamw: moment size mismatch for " + params[k]->name);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = T(c.beta1 * m[i] + (1.0 - c.beta1) * g[i]);
        v[i] = T(c.beta2 * v[i] + (1.0 - c.beta2) * double(g[i]) * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double wi = w[i];
        wi -= c.lr * c.weight_decay * wi;
        wi -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        w[i] = T(wi);
      }
    }
  }

 private:
  OptimizerState<T> state_;
};

}  // namespace rpe2d::nn
