#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stpf/errors.hpp"
#include "stpf/threads.hpp"

namespace stpf {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// One recorded operation result. parents + backward_fn form the reverse-mode
// tape; the DAG reachable from a loss node is the gradient graph.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated by backward(), same length as value
  bool requires_grad = false;
  bool grad_valid = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

// Dense row-major tensor participating in a reverse-mode gradient graph.
// A Tensor is a shared handle to its node; graph ops produce new nodes and
// never mutate existing values. Leaf tensors (parameters) may be edited in
// place between graph builds via mutable_data().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    check_shape(shape);
    auto n = std::make_shared<detail::Node<T>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  int dim(int i) const { return node().shape.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(node().value.size()); }
  bool requires_grad() const { return node().requires_grad; }

  std::span<const T> data() const { return node().value; }

  // In-place edit of a leaf (optimizer updates, finite-difference probes).
  // Editing an op result would silently desynchronize the recorded graph.
  std::span<T> mutable_data() {
    if (!node().parents.empty()) {
      throw UsageError("mutable_data() is only valid on leaf tensors");
    }
    return node().value;
  }

  bool has_grad() const { return defined() && n_->grad_valid; }

  std::span<const T> grad() const {
    if (!has_grad()) {
      throw UsageError("gradient absent: tensor not part of the last backward() graph");
    }
    return n_->grad;
  }

  void zero_grad() {
    node().grad.clear();
    node().grad_valid = false;
  }

  T item() const {
    if (size() != 1) throw UsageError("item() requires a scalar, got " + shape_str(shape()));
    return node().value[0];
  }

  // Value copy detached from the graph.
  Tensor detach(bool requires_grad = false) const {
    return from_data(shape(), std::vector<T>(node().value), requires_grad);
  }

  std::shared_ptr<detail::Node<T>> node_ptr() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> n) : n_(std::move(n)) {}

  detail::Node<T>& node() const {
    if (!n_) throw UsageError("use of undefined tensor");
    return *n_;
  }

  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimError("empty shape");
    for (int d : shape) {
      if (d <= 0) throw DimError("non-positive extent in shape " + shape_str(shape));
    }
  }

  template <typename U>
  friend Tensor<U> make_op(Shape shape, std::vector<U> value,
                           std::vector<Tensor<U>> parents,
                           std::function<void(detail::Node<U>&)> backward_fn);

  std::shared_ptr<detail::Node<T>> n_;
};

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(detail::Node<T>&)> backward_fn) {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node_ptr());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Tensor<T>(std::move(n));
}

namespace detail {

template <typename T>
inline bool wants_grad(Node<T>& n, size_t parent) {
  return n.parents[parent]->requires_grad;
}

template <typename T>
inline std::vector<T>& pgrad(Node<T>& n, size_t parent) {
  return n.parents[parent]->grad;
}

template <typename T>
inline const std::vector<T>& pval(Node<T>& n, size_t parent) {
  return n.parents[parent]->value;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> y(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < b.size(); ++i) y[i] += b.data()[i];
  return make_op<T>(a.shape(), std::move(y), {a, b}, [](detail::Node<T>& n) {
    for (size_t p = 0; p < 2; ++p) {
      if (!detail::wants_grad(n, p)) continue;
      auto& g = detail::pgrad(n, p);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> y(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < b.size(); ++i) y[i] -= b.data()[i];
  return make_op<T>(a.shape(), std::move(y), {a, b}, [](detail::Node<T>& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

// Pointwise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> y(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < b.size(); ++i) y[i] *= b.data()[i];
  return make_op<T>(a.shape(), std::move(y), {a, b}, [](detail::Node<T>& n) {
    const auto& av = detail::pval(n, 0);
    const auto& bv = detail::pval(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] += bv[i] * n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] += av[i] * n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= c;
  return make_op<T>(a.shape(), std::move(y), {a}, [c](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    auto& g = detail::pgrad(n, 0);
    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += c * n.grad[i];
  });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// Logistic sigmoid 1/(1+e^-x).
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v = T(1) / (T(1) + std::exp(-v));
  return make_op<T>(a.shape(), std::move(y), {a}, [](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    auto& g = detail::pgrad(n, 0);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const T s = n.value[i];
      g[i] += s * (T(1) - s) * n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v = std::tanh(v);
  return make_op<T>(a.shape(), std::move(y), {a}, [](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    auto& g = detail::pgrad(n, 0);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const T t = n.value[i];
      g[i] += (T(1) - t * t) * n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  return make_op<T>(a.shape(), std::move(y), {a}, [](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    const auto& x = detail::pval(n, 0);
    auto& g = detail::pgrad(n, 0);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (x[i] > T(0)) g[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                   " changes element count");
  }
  std::vector<T> y(a.data().begin(), a.data().end());
  return make_op<T>(std::move(shape), std::move(y), {a}, [](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    auto& g = detail::pgrad(n, 0);
    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

// x: [B,C,D,H,W] -> [B,C,H,W] at depth index t.
template <typename T>
Tensor<T> slice_depth(const Tensor<T>& x, int t) {
  if (x.ndim() != 5) throw DimError("slice_depth: expected rank 5, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (t < 0 || t >= D) throw UsageError("slice_depth: index out of range");
  const int64_t hw = int64_t(H) * W;
  std::vector<T> y(size_t(B) * C * hw);
  const T* xv = x.data().data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* src = xv + ((int64_t(b) * C + c) * D + t) * hw;
      std::copy(src, src + hw, y.data() + (int64_t(b) * C + c) * hw);
    }
  }
  return make_op<T>({B, C, H, W}, std::move(y), {x}, [t](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    const auto& ps = n.parents[0]->shape;
    const int B = ps[0], C = ps[1], D = ps[2];
    const int64_t hw = int64_t(ps[3]) * ps[4];
    auto& g = detail::pgrad(n, 0);
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        T* dst = g.data() + ((int64_t(b) * C + c) * D + t) * hw;
        const T* src = n.grad.data() + (int64_t(b) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
    }
  });
}

// Stack per-step maps [B,C,H,W] into a sequence [B,C,D,H,W].
template <typename T>
Tensor<T> stack_depth(const std::vector<Tensor<T>>& steps) {
  if (steps.empty()) throw UsageError("stack_depth: empty input");
  const Shape& s0 = steps[0].shape();
  if (s0.size() != 4) throw DimError("stack_depth: expected rank-4 inputs");
  for (const auto& s : steps) check_same_shape(steps[0], s, "stack_depth");
  const int B = s0[0], C = s0[1], H = s0[2], W = s0[3];
  const int D = static_cast<int>(steps.size());
  const int64_t hw = int64_t(H) * W;
  std::vector<T> y(size_t(B) * C * D * hw);
  for (int d = 0; d < D; ++d) {
    const T* xv = steps[d].data().data();
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const T* src = xv + (int64_t(b) * C + c) * hw;
        std::copy(src, src + hw, y.data() + ((int64_t(b) * C + c) * D + d) * hw);
      }
    }
  }
  return make_op<T>({B, C, D, H, W}, std::move(y), steps, [](detail::Node<T>& n) {
    const int B = n.shape[0], C = n.shape[1], D = n.shape[2];
    const int64_t hw = int64_t(n.shape[3]) * n.shape[4];
    for (int d = 0; d < D; ++d) {
      if (!detail::wants_grad(n, size_t(d))) continue;
      auto& g = detail::pgrad(n, size_t(d));
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const T* src = n.grad.data() + ((int64_t(b) * C + c) * D + d) * hw;
          T* dst = g.data() + (int64_t(b) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
        }
      }
    }
  });
}

// x: [B,C,H,W] -> channels [c0, c1).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  if (x.ndim() != 4) throw DimError("slice_channels: expected rank 4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw UsageError("slice_channels: bad channel range");
  const int CC = c1 - c0;
  const int64_t hw = int64_t(H) * W;
  std::vector<T> y(size_t(B) * CC * hw);
  const T* xv = x.data().data();
  for (int b = 0; b < B; ++b) {
    const T* src = xv + (int64_t(b) * C + c0) * hw;
    std::copy(src, src + int64_t(CC) * hw, y.data() + int64_t(b) * CC * hw);
  }
  return make_op<T>({B, CC, H, W}, std::move(y), {x}, [c0](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    const auto& ps = n.parents[0]->shape;
    const int B = ps[0], C = ps[1];
    const int CC = n.shape[1];
    const int64_t hw = int64_t(ps[2]) * ps[3];
    auto& g = detail::pgrad(n, 0);
    for (int b = 0; b < B; ++b) {
      T* dst = g.data() + (int64_t(b) * C + c0) * hw;
      const T* src = n.grad.data() + int64_t(b) * CC * hw;
      for (int64_t i = 0; i < int64_t(CC) * hw; ++i) dst[i] += src[i];
    }
  });
}

// [B,Ca,H,W] ++ [B,Cb,H,W] -> [B,Ca+Cb,H,W].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 4 || b.ndim() != 4) throw DimError("concat_channels: expected rank 4");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimError("concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t hw = int64_t(H) * W;
  std::vector<T> y(size_t(B) * (Ca + Cb) * hw);
  for (int bb = 0; bb < B; ++bb) {
    std::copy(a.data().data() + int64_t(bb) * Ca * hw, a.data().data() + int64_t(bb + 1) * Ca * hw,
              y.data() + int64_t(bb) * (Ca + Cb) * hw);
    std::copy(b.data().data() + int64_t(bb) * Cb * hw, b.data().data() + int64_t(bb + 1) * Cb * hw,
              y.data() + int64_t(bb) * (Ca + Cb) * hw + int64_t(Ca) * hw);
  }
  return make_op<T>({B, Ca + Cb, H, W}, std::move(y), {a, b}, [](detail::Node<T>& n) {
    const int B = n.shape[0];
    const int Ca = n.parents[0]->shape[1];
    const int Cb = n.parents[1]->shape[1];
    const int64_t hw = int64_t(n.shape[2]) * n.shape[3];
    for (int bb = 0; bb < B; ++bb) {
      const T* src = n.grad.data() + int64_t(bb) * (Ca + Cb) * hw;
      if (detail::wants_grad(n, 0)) {
        T* dst = detail::pgrad(n, 0).data() + int64_t(bb) * Ca * hw;
        for (int64_t i = 0; i < int64_t(Ca) * hw; ++i) dst[i] += src[i];
      }
      if (detail::wants_grad(n, 1)) {
        T* dst = detail::pgrad(n, 1).data() + int64_t(bb) * Cb * hw;
        for (int64_t i = 0; i < int64_t(Cb) * hw; ++i) dst[i] += src[i + int64_t(Ca) * hw];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_op<T>({1}, {acc}, {a}, [](detail::Node<T>& n) {
    if (!detail::wants_grad(n, 0)) return;
    auto& g = detail::pgrad(n, 0);
    const T d = n.grad[0];
    for (auto& v : g) v += d;
  });
}

// Mean over frames of the per-frame masked MSE. pred/truth trailing two dims
// are the grid; mask has one byte per grid cell, nonzero = active. The
// divisor is the active-cell count, matching loss evaluation on active grids.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& truth,
                     const std::vector<uint8_t>& mask) {
  check_same_shape(pred, truth, "masked_mse");
  if (pred.ndim() < 2) throw DimError("masked_mse: expected rank >= 2");
  const int W = pred.dim(pred.ndim() - 1);
  const int H = pred.dim(pred.ndim() - 2);
  const int64_t hw = int64_t(H) * W;
  if (static_cast<int64_t>(mask.size()) != hw) {
    throw DimError("masked_mse: mask size " + std::to_string(mask.size()) +
                   " does not match grid " + std::to_string(H) + "x" + std::to_string(W));
  }
  int64_t active = 0;
  for (uint8_t m : mask) active += m ? 1 : 0;
  if (active == 0) throw UsageError("masked_mse: empty mask");
  const int64_t frames = pred.size() / hw;
  const T norm = T(1) / (T(active) * T(frames));

  T acc = 0;
  const T* pv = pred.data().data();
  const T* tv = truth.data().data();
  for (int64_t f = 0; f < frames; ++f) {
    const T* p = pv + f * hw;
    const T* t = tv + f * hw;
    for (int64_t i = 0; i < hw; ++i) {
      if (!mask[i]) continue;
      const T d = p[i] - t[i];
      acc += d * d;
    }
  }
  acc *= norm;
  return make_op<T>({1}, {acc}, {pred, truth}, [mask, hw, frames, norm](detail::Node<T>& n) {
    const auto& pv = detail::pval(n, 0);
    const auto& tv = detail::pval(n, 1);
    const T d0 = n.grad[0];
    for (size_t par = 0; par < 2; ++par) {
      if (!detail::wants_grad(n, par)) continue;
      auto& g = detail::pgrad(n, par);
      const T sign = par == 0 ? T(1) : T(-1);
      for (int64_t f = 0; f < frames; ++f) {
        for (int64_t i = 0; i < hw; ++i) {
          if (!mask[i]) continue;
          const int64_t k = f * hw + i;
          g[k] += sign * T(2) * (pv[k] - tv[k]) * norm * d0;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions, zero-padded "same"
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void conv2d_accumulate(const T* x, const T* k, T* y, int B, int Cin, int Cout, int H, int W,
                       int kh, int kw, const T* bias) {
  const int ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * hw * Cin * kh * kw > 65536)
  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Cout; ++oc) {
      T* out = y + (int64_t(b) * Cout + oc) * hw;
      const T bv = bias ? bias[oc] : T(0);
      for (int64_t i = 0; i < hw; ++i) out[i] = bv;
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xin = x + (int64_t(b) * Cin + ic) * hw;
        for (int kr = 0; kr < kh; ++kr) {
          const int oh_lo = std::max(0, ph - kr);
          const int oh_hi = std::min(H, H + ph - kr);
          for (int kc = 0; kc < kw; ++kc) {
            const T wv = k[((int64_t(oc) * Cin + ic) * kh + kr) * kw + kc];
            if (wv == T(0)) continue;
            const int ow_lo = std::max(0, pw - kc);
            const int ow_hi = std::min(W, W + pw - kc);
            const int dr = kr - ph, dc = kc - pw;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xrow = xin + int64_t(oh + dr) * W + dc;
              T* orow = out + int64_t(oh) * W;
              for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xrow[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* dy, const T* k, T* dx, int B, int Cin, int Cout, int H,
                           int W, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * hw * Cin * kh * kw > 65536)
  for (int b = 0; b < B; ++b) {
    for (int ic = 0; ic < Cin; ++ic) {
      T* dxin = dx + (int64_t(b) * Cin + ic) * hw;
      for (int oc = 0; oc < Cout; ++oc) {
        const T* dyo = dy + (int64_t(b) * Cout + oc) * hw;
        for (int kr = 0; kr < kh; ++kr) {
          const int oh_lo = std::max(0, ph - kr);
          const int oh_hi = std::min(H, H + ph - kr);
          for (int kc = 0; kc < kw; ++kc) {
            const T wv = k[((int64_t(oc) * Cin + ic) * kh + kr) * kw + kc];
            if (wv == T(0)) continue;
            const int ow_lo = std::max(0, pw - kc);
            const int ow_hi = std::min(W, W + pw - kc);
            const int dr = kr - ph, dc = kc - pw;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              T* dxrow = dxin + int64_t(oh + dr) * W + dc;
              const T* dyrow = dyo + int64_t(oh) * W;
              for (int ow = ow_lo; ow < ow_hi; ++ow) dxrow[ow] += wv * dyrow[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_kernel(const T* dy, const T* x, T* dk, int B, int Cin, int Cout, int H,
                            int W, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * hw * Cin * kh * kw > 65536)
  for (int oc = 0; oc < Cout; ++oc) {
    for (int ic = 0; ic < Cin; ++ic) {
      for (int kr = 0; kr < kh; ++kr) {
        const int oh_lo = std::max(0, ph - kr);
        const int oh_hi = std::min(H, H + ph - kr);
        for (int kc = 0; kc < kw; ++kc) {
          const int ow_lo = std::max(0, pw - kc);
          const int ow_hi = std::min(W, W + pw - kc);
          const int dr = kr - ph, dc = kc - pw;
          T acc = 0;
          for (int b = 0; b < B; ++b) {
            const T* dyo = dy + (int64_t(b) * Cout + oc) * hw;
            const T* xin = x + (int64_t(b) * Cin + ic) * hw;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xrow = xin + int64_t(oh + dr) * W + dc;
              const T* dyrow = dyo + int64_t(oh) * W;
              for (int ow = ow_lo; ow < ow_hi; ++ow) acc += dyrow[ow] * xrow[ow];
            }
          }
          dk[((int64_t(oc) * Cin + ic) * kh + kr) * kw + kc] += acc;
        }
      }
    }
  }
}

}  // namespace detail

// input [B,Cin,H,W] (*) kernels [Cout,Cin,kh,kw] + bias [Cout] -> [B,Cout,H,W].
// Zero padding keeps the spatial extent; kernel extents must be odd.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  if (input.ndim() != 4 || kernels.ndim() != 4) {
    throw DimError("conv2d_same: expected input rank 4 and kernels rank 4, got " +
                   shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  }
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ConfigError("conv2d_same: even kernel extent " + shape_str(kernels.shape()));
  }
  if (kernels.dim(1) != Cin) {
    throw DimError("conv2d_same: kernel channels " + std::to_string(kernels.dim(1)) +
                   " do not match input channels " + std::to_string(Cin));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw DimError("conv2d_same: bias shape " + shape_str(bias.shape()) + " wants [" +
                   std::to_string(Cout) + "]");
  }

  std::vector<T> y(size_t(B) * Cout * H * W);
  detail::conv2d_accumulate(input.data().data(), kernels.data().data(), y.data(), B, Cin, Cout,
                            H, W, kh, kw, has_bias ? bias.data().data() : nullptr);

  std::vector<Tensor<T>> parents = {input, kernels};
  if (has_bias) parents.push_back(bias);
  return make_op<T>({B, Cout, H, W}, std::move(y), std::move(parents), [](detail::Node<T>& n) {
    const auto& xs = n.parents[0]->shape;
    const auto& ks = n.parents[1]->shape;
    const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int Cout = ks[0], kh = ks[2], kw = ks[3];
    if (detail::wants_grad(n, 0)) {
      detail::conv2d_backward_input(n.grad.data(), detail::pval(n, 1).data(),
                                    detail::pgrad(n, 0).data(), B, Cin, Cout, H, W, kh, kw);
    }
    if (detail::wants_grad(n, 1)) {
      detail::conv2d_backward_kernel(n.grad.data(), detail::pval(n, 0).data(),
                                     detail::pgrad(n, 1).data(), B, Cin, Cout, H, W, kh, kw);
    }
    if (n.parents.size() > 2 && detail::wants_grad(n, 2)) {
      auto& db = detail::pgrad(n, 2);
      const int64_t hw = int64_t(H) * W;
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const T* dyo = n.grad.data() + (int64_t(b) * Cout + oc) * hw;
          T acc = 0;
          for (int64_t i = 0; i < hw; ++i) acc += dyo[i];
          db[oc] += acc;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& input, const Tensor<T>& kernels) {
  return conv2d_same(input, kernels, Tensor<T>());
}

namespace detail {

// 3-D "same" convolution; depth is handled as a third padded axis and the
// inner spatial work reuses the 2-D row kernels.
template <typename T>
void conv3d_accumulate(const T* x, const T* k, T* y, int B, int Cin, int Cout, int D, int H,
                       int W, int kd, int kh, int kw, const T* bias) {
  const int pd = kd / 2, ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
  const int64_t dhw = int64_t(D) * hw;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * dhw * Cin * kd * kh * kw > 65536)
  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Cout; ++oc) {
      T* out = y + (int64_t(b) * Cout + oc) * dhw;
      const T bv = bias ? bias[oc] : T(0);
      for (int64_t i = 0; i < dhw; ++i) out[i] = bv;
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xin = x + (int64_t(b) * Cin + ic) * dhw;
        for (int ks = 0; ks < kd; ++ks) {
          const int od_lo = std::max(0, pd - ks);
          const int od_hi = std::min(D, D + pd - ks);
          for (int kr = 0; kr < kh; ++kr) {
            const int oh_lo = std::max(0, ph - kr);
            const int oh_hi = std::min(H, H + ph - kr);
            for (int kc = 0; kc < kw; ++kc) {
              const T wv = k[(((int64_t(oc) * Cin + ic) * kd + ks) * kh + kr) * kw + kc];
              if (wv == T(0)) continue;
              const int ow_lo = std::max(0, pw - kc);
              const int ow_hi = std::min(W, W + pw - kc);
              const int dd = ks - pd, dr = kr - ph, dc = kc - pw;
              for (int od = od_lo; od < od_hi; ++od) {
                const T* xslab = xin + int64_t(od + dd) * hw;
                T* oslab = out + int64_t(od) * hw;
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* xrow = xslab + int64_t(oh + dr) * W + dc;
                  T* orow = oslab + int64_t(oh) * W;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xrow[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward_input(const T* dy, const T* k, T* dx, int B, int Cin, int Cout, int D,
                           int H, int W, int kd, int kh, int kw) {
  const int pd = kd / 2, ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
  const int64_t dhw = int64_t(D) * hw;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * dhw * Cin * kd * kh * kw > 65536)
  for (int b = 0; b < B; ++b) {
    for (int ic = 0; ic < Cin; ++ic) {
      T* dxin = dx + (int64_t(b) * Cin + ic) * dhw;
      for (int oc = 0; oc < Cout; ++oc) {
        const T* dyo = dy + (int64_t(b) * Cout + oc) * dhw;
        for (int ks = 0; ks < kd; ++ks) {
          const int od_lo = std::max(0, pd - ks);
          const int od_hi = std::min(D, D + pd - ks);
          for (int kr = 0; kr < kh; ++kr) {
            const int oh_lo = std::max(0, ph - kr);
            const int oh_hi = std::min(H, H + ph - kr);
            for (int kc = 0; kc < kw; ++kc) {
              const T wv = k[(((int64_t(oc) * Cin + ic) * kd + ks) * kh + kr) * kw + kc];
              if (wv == T(0)) continue;
              const int ow_lo = std::max(0, pw - kc);
              const int ow_hi = std::min(W, W + pw - kc);
              const int dd = ks - pd, dr = kr - ph, dc = kc - pw;
              for (int od = od_lo; od < od_hi; ++od) {
                T* dxslab = dxin + int64_t(od + dd) * hw;
                const T* dyslab = dyo + int64_t(od) * hw;
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                  T* dxrow = dxslab + int64_t(oh + dr) * W + dc;
                  const T* dyrow = dyslab + int64_t(oh) * W;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) dxrow[ow] += wv * dyrow[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_backward_kernel(const T* dy, const T* x, T* dk, int B, int Cin, int Cout, int D,
                            int H, int W, int kd, int kh, int kw) {
  const int pd = kd / 2, ph = kh / 2, pw = kw / 2;
  const int64_t hw = int64_t(H) * W;
  const int64_t dhw = int64_t(D) * hw;
#pragma omp parallel for collapse(2) schedule(static) num_threads(stpf::max_threads()) \
    if (int64_t(B) * Cout * dhw * Cin * kd * kh * kw > 65536)
  for (int oc = 0; oc < Cout; ++oc) {
    for (int ic = 0; ic < Cin; ++ic) {
      for (int ks = 0; ks < kd; ++ks) {
        const int od_lo = std::max(0, pd - ks);
        const int od_hi = std::min(D, D + pd - ks);
        for (int kr = 0; kr < kh; ++kr) {
          const int oh_lo = std::max(0, ph - kr);
          const int oh_hi = std::min(H, H + ph - kr);
          for (int kc = 0; kc < kw; ++kc) {
            const int ow_lo = std::max(0, pw - kc);
            const int ow_hi = std::min(W, W + pw - kc);
            const int dd = ks - pd, dr = kr - ph, dc = kc - pw;
            T acc = 0;
            for (int b = 0; b < B; ++b) {
              const T* dyo = dy + (int64_t(b) * Cout + oc) * dhw;
              const T* xin = x + (int64_t(b) * Cin + ic) * dhw;
              for (int od = od_lo; od < od_hi; ++od) {
                const T* xslab = xin + int64_t(od + dd) * hw;
                const T* dyslab = dyo + int64_t(od) * hw;
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* xrow = xslab + int64_t(oh + dr) * W + dc;
                  const T* dyrow = dyslab + int64_t(oh) * W;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) acc += dyrow[ow] * xrow[ow];
                }
              }
            }
            dk[(((int64_t(oc) * Cin + ic) * kd + ks) * kh + kr) * kw + kc] += acc;
          }
        }
      }
    }
  }
}

}  // namespace detail

// input [B,Cin,D,H,W] (*) kernels [Cout,Cin,kd,kh,kw] + bias -> [B,Cout,D,H,W].
template <typename T>
Tensor<T> conv3d_same(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  if (input.ndim() != 5 || kernels.ndim() != 5) {
    throw DimError("conv3d_same: expected input rank 5 and kernels rank 5, got " +
                   shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  }
  const int B = input.dim(0), Cin = input.dim(1), D = input.dim(2), H = input.dim(3),
            W = input.dim(4);
  const int Cout = kernels.dim(0), kd = kernels.dim(2), kh = kernels.dim(3), kw = kernels.dim(4);
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) {
    throw ConfigError("conv3d_same: even kernel extent " + shape_str(kernels.shape()));
  }
  if (kernels.dim(1) != Cin) {
    throw DimError("conv3d_same: kernel channels " + std::to_string(kernels.dim(1)) +
                   " do not match input channels " + std::to_string(Cin));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw DimError("conv3d_same: bias shape " + shape_str(bias.shape()) + " wants [" +
                   std::to_string(Cout) + "]");
  }

  std::vector<T> y(size_t(B) * Cout * D * H * W);
  detail::conv3d_accumulate(input.data().data(), kernels.data().data(), y.data(), B, Cin, Cout,
                            D, H, W, kd, kh, kw, has_bias ? bias.data().data() : nullptr);

  std::vector<Tensor<T>> parents = {input, kernels};
  if (has_bias) parents.push_back(bias);
  return make_op<T>({B, Cout, D, H, W}, std::move(y), std::move(parents),
                    [](detail::Node<T>& n) {
    const auto& xs = n.parents[0]->shape;
    const auto& ks = n.parents[1]->shape;
    const int B = xs[0], Cin = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const int Cout = ks[0], kd = ks[2], kh = ks[3], kw = ks[4];
    if (detail::wants_grad(n, 0)) {
      detail::conv3d_backward_input(n.grad.data(), detail::pval(n, 1).data(),
                                    detail::pgrad(n, 0).data(), B, Cin, Cout, D, H, W, kd, kh,
                                    kw);
    }
    if (detail::wants_grad(n, 1)) {
      detail::conv3d_backward_kernel(n.grad.data(), detail::pval(n, 0).data(),
                                     detail::pgrad(n, 1).data(), B, Cin, Cout, D, H, W, kd, kh,
                                     kw);
    }
    if (n.parents.size() > 2 && detail::wants_grad(n, 2)) {
      auto& db = detail::pgrad(n, 2);
      const int64_t dhw = int64_t(D) * H * W;
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const T* dyo = n.grad.data() + (int64_t(b) * Cout + oc) * dhw;
          T acc = 0;
          for (int64_t i = 0; i < dhw; ++i) acc += dyo[i];
          db[oc] += acc;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> conv3d_same(const Tensor<T>& input, const Tensor<T>& kernels) {
  return conv3d_same(input, kernels, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Channel axis is dim 1; statistics run over every other axis. Uses the
// biased variance (divide by m), same convention as the moving statistics.
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps, std::vector<T>* batch_mean = nullptr,
                          std::vector<T>* batch_var = nullptr) {
  if (x.ndim() < 2) throw DimError("batchnorm: expected rank >= 2");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t S = x.size() / (int64_t(B) * C);  // spatial extent per (b, c)
  if (gamma.size() != C || beta.size() != C) {
    throw DimError("batchnorm: gamma/beta length must equal channel count " + std::to_string(C));
  }
  const int64_t m = int64_t(B) * S;
  if (m == 0) throw UsageError("batchnorm: empty batch");

  const T* xv = x.data().data();
  std::vector<T> mean(C, T(0)), var(C, T(0));
  for (int c = 0; c < C; ++c) {
    T acc = 0;
    for (int b = 0; b < B; ++b) {
      const T* p = xv + (int64_t(b) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) acc += p[i];
    }
    mean[c] = acc / T(m);
    T vacc = 0;
    for (int b = 0; b < B; ++b) {
      const T* p = xv + (int64_t(b) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) {
        const T d = p[i] - mean[c];
        vacc += d * d;
      }
    }
    var[c] = vacc / T(m);
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

  auto xhat = std::make_shared<std::vector<T>>(size_t(x.size()));
  std::vector<T> y(size_t(x.size()));
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* p = xv + (int64_t(b) * C + c) * S;
      T* xh = xhat->data() + (int64_t(b) * C + c) * S;
      T* yo = y.data() + (int64_t(b) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) {
        xh[i] = (p[i] - mean[c]) * inv_std[c];
        yo[i] = gv[c] * xh[i] + bv[c];
      }
    }
  }

  return make_op<T>(x.shape(), std::move(y), {x, gamma, beta},
                    [xhat, inv_std, m](detail::Node<T>& n) {
    const int B = n.shape[0], C = n.shape[1];
    const int64_t S = int64_t(n.value.size()) / (int64_t(B) * C);
    const T* gv = detail::pval(n, 1).data();
    // per-channel reductions of dy and dy*xhat
    std::vector<T> sum_dy(C, T(0)), sum_dy_xh(C, T(0));
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const T* dy = n.grad.data() + (int64_t(b) * C + c) * S;
        const T* xh = xhat->data() + (int64_t(b) * C + c) * S;
        T a0 = 0, a1 = 0;
        for (int64_t i = 0; i < S; ++i) {
          a0 += dy[i];
          a1 += dy[i] * xh[i];
        }
        sum_dy[c] += a0;
        sum_dy_xh[c] += a1;
      }
    }
    if (detail::wants_grad(n, 1)) {
      auto& dg = detail::pgrad(n, 1);
      for (int c = 0; c < C; ++c) dg[c] += sum_dy_xh[c];
    }
    if (detail::wants_grad(n, 2)) {
      auto& db = detail::pgrad(n, 2);
      for (int c = 0; c < C; ++c) db[c] += sum_dy[c];
    }
    if (detail::wants_grad(n, 0)) {
      auto& dx = detail::pgrad(n, 0);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const T* dy = n.grad.data() + (int64_t(b) * C + c) * S;
          const T* xh = xhat->data() + (int64_t(b) * C + c) * S;
          T* out = dx.data() + (int64_t(b) * C + c) * S;
          const T k = gv[c] * inv_std[c];
          const T mdy = sum_dy[c] / T(m);
          const T mdyxh = sum_dy_xh[c] / T(m);
          for (int64_t i = 0; i < S; ++i) {
            out[i] += k * (dy[i] - mdy - xh[i] * mdyxh);
          }
        }
      }
    }
  });
}

// Inference-mode normalization with frozen statistics.
template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const std::vector<T>& mean, const std::vector<T>& var, T eps) {
  if (x.ndim() < 2) throw DimError("batchnorm: expected rank >= 2");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t S = x.size() / (int64_t(B) * C);
  if (gamma.size() != C || beta.size() != C || static_cast<int>(mean.size()) != C ||
      static_cast<int>(var.size()) != C) {
    throw DimError("batchnorm: statistics length must equal channel count " + std::to_string(C));
  }
  std::vector<T> scl(C), off(C);
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (int c = 0; c < C; ++c) {
    scl[c] = gv[c] / std::sqrt(var[c] + eps);
    off[c] = bv[c] - scl[c] * mean[c];
  }
  const T* xv = x.data().data();
  std::vector<T> y(size_t(x.size()));
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* p = xv + (int64_t(b) * C + c) * S;
      T* yo = y.data() + (int64_t(b) * C + c) * S;
      for (int64_t i = 0; i < S; ++i) yo[i] = scl[c] * p[i] + off[c];
    }
  }
  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  return make_op<T>(x.shape(), std::move(y), {x, gamma, beta},
                    [mean, inv_std](detail::Node<T>& n) {
    const int B = n.shape[0], C = n.shape[1];
    const int64_t S = int64_t(n.value.size()) / (int64_t(B) * C);
    const T* gv = detail::pval(n, 1).data();
    const T* xv = detail::pval(n, 0).data();
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const T* dy = n.grad.data() + (int64_t(b) * C + c) * S;
        const T* p = xv + (int64_t(b) * C + c) * S;
        if (detail::wants_grad(n, 0)) {
          T* dx = detail::pgrad(n, 0).data() + (int64_t(b) * C + c) * S;
          const T k = gv[c] * inv_std[c];
          for (int64_t i = 0; i < S; ++i) dx[i] += k * dy[i];
        }
        if (detail::wants_grad(n, 1)) {
          T acc = 0;
          for (int64_t i = 0; i < S; ++i) acc += dy[i] * (p[i] - mean[c]) * inv_std[c];
          detail::pgrad(n, 1)[c] += acc;
        }
        if (detail::wants_grad(n, 2)) {
          T acc = 0;
          for (int64_t i = 0; i < S; ++i) acc += dy[i];
          detail::pgrad(n, 2)[c] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
// loss. Gradients of tensors used multiple times sum over all uses.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward: loss does not depend on any requires_grad tensor");
  }

  using Node = detail::Node<T>;
  Node* root = loss.node_ptr().get();

  // Iterative DFS post-order: children (parents in graph terms) before users.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next >= node->parents.size()) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    n->grad.assign(n->value.size(), T(0));
    n->grad_valid = true;
  }
  root->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

// Compares backward() against central differences for the scalar loss
// produced by f, which must read x's current contents on every call.
// Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
// Meaningful in 64-bit mode; 32-bit cancellation swamps the quotient.
template <typename T>
T finite_diff_check(const std::function<Tensor<T>()>& f, Tensor<T> x, T h) {
  if (!x.requires_grad()) throw UsageError("finite_diff_check: x must require grad");

  Tensor<T> loss = f();
  if (loss.size() != 1) throw UsageError("finite_diff_check: f must produce a scalar");
  backward(loss);
  if (!x.has_grad()) throw UsageError("finite_diff_check: f does not touch x");
  std::vector<T> analytic(x.grad().begin(), x.grad().end());

  auto xv = x.mutable_data();
  T max_err = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const T saved = xv[i];
    xv[i] = saved + h;
    const T fp = f().item();
    xv[i] = saved - h;
    const T fm = f().item();
    xv[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_check: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    const T fd = (fp - fm) / (T(2) * h);
    const T err = std::abs(analytic[size_t(i)] - fd) /
                  std::max(T(1), std::abs(analytic[size_t(i)]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace stpf
