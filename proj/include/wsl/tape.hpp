#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "wsl/tensor.hpp"

namespace wsl {

// Handle into a Tape. Plain value type; only meaningful for the tape
// that produced it.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over dense tensors. One tape per training step;
// nodes own their values, gradients are allocated lazily during backward.
// Ops that receive only non-grad inputs push no closures, so frozen
// networks evaluate at plain forward cost.
template <typename T>
class Tape {
public:
  Var leaf(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad);
  }

  Var constant(Tensor<T> v) { return push(std::move(v), false); }

  const Tensor<T>& val(Var x) const { return nodes_[check(x)].val; }

  bool requires_grad(Var x) const { return nodes_[check(x)].rg; }

  // Gradient of the last backward() w.r.t. x. Zero tensor if untouched.
  const Tensor<T>& grad(Var x) {
    Node& n = nodes_[check(x)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.val.shape());
    return n.grad;
  }

  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.val.numel() != 1) throw Error("backward: loss must be scalar");
    grad_ref(loss.id).fill(T(0));
    grad_ref(loss.id)[0] = T(1);
    for (auto it = backs_.rbegin(); it != backs_.rend(); ++it) (*it)();
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise / linear algebra ----

  Var add(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw Error("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out = av;
    const T* bp = bv.data();
    T* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
    Var y = push(std::move(out), requires_grad(a) || requires_grad(b));
    if (requires_grad(y)) {
      backs_.push_back([this, a, b, y] {
        const Tensor<T>& g = grad_ref(y.id);
        if (requires_grad(a)) accumulate(a, g.data(), g.numel());
        if (requires_grad(b)) accumulate(b, g.data(), g.numel());
      });
    }
    return y;
  }

  Var sub(Var a, Var b) { return lincomb(T(1), a, T(-1), b); }

  // alpha*a + beta*b, same shapes.
  Var lincomb(T alpha, Var a, T beta, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw Error("lincomb: shape mismatch");
    Tensor<T> out(av.shape());
    const T* ap = av.data();
    const T* bp = bv.data();
    T* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] = alpha * ap[i] + beta * bp[i];
    Var y = push(std::move(out), requires_grad(a) || requires_grad(b));
    if (requires_grad(y)) {
      backs_.push_back([this, a, b, y, alpha, beta] {
        const Tensor<T>& g = grad_ref(y.id);
        if (requires_grad(a)) accumulate_scaled(a, g.data(), g.numel(), alpha);
        if (requires_grad(b)) accumulate_scaled(b, g.data(), g.numel(), beta);
      });
    }
    return y;
  }

  Var mul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw Error("mul: shape mismatch");
    Tensor<T> out(av.shape());
    const T* ap = av.data();
    const T* bp = bv.data();
    T* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] = ap[i] * bp[i];
    Var y = push(std::move(out), requires_grad(a) || requires_grad(b));
    if (requires_grad(y)) {
      backs_.push_back([this, a, b, y] {
        const Tensor<T>& g = grad_ref(y.id);
        const T* gp = g.data();
        if (requires_grad(a)) {
          const T* bp = val(b).data();
          Tensor<T>& ga = grad_ref(a.id);
          T* gap = ga.data();
          for (int64_t i = 0; i < g.numel(); ++i) gap[i] += gp[i] * bp[i];
        }
        if (requires_grad(b)) {
          const T* ap = val(a).data();
          Tensor<T>& gb = grad_ref(b.id);
          T* gbp = gb.data();
          for (int64_t i = 0; i < g.numel(); ++i) gbp[i] += gp[i] * ap[i];
        }
      });
    }
    return y;
  }

  Var scale(Var a, T s) {
    Tensor<T> out = val(a);
    T* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= s;
    Var y = push(std::move(out), requires_grad(a));
    if (requires_grad(y)) {
      backs_.push_back([this, a, y, s] {
        const Tensor<T>& g = grad_ref(y.id);
        accumulate_scaled(a, g.data(), g.numel(), s);
      });
    }
    return y;
  }

  Var reshape(Var a, std::vector<int64_t> shape) {
    Tensor<T> out = val(a).reshaped(std::move(shape));
    Var y = push(std::move(out), requires_grad(a));
    if (requires_grad(y)) {
      backs_.push_back([this, a, y] {
        const Tensor<T>& g = grad_ref(y.id);
        accumulate(a, g.data(), g.numel());
      });
    }
    return y;
  }

  // Flat-prefix view: y = flat(x)[offset : offset+len].
  Var slice_flat(Var a, int64_t offset, int64_t len) {
    const auto& av = val(a);
    if (offset < 0 || len < 0 || offset + len > av.numel())
      throw Error("slice_flat: range out of bounds");
    Tensor<T> out({len});
    std::copy(av.data() + offset, av.data() + offset + len, out.data());
    Var y = push(std::move(out), requires_grad(a));
    if (requires_grad(y)) {
      backs_.push_back([this, a, y, offset, len] {
        const Tensor<T>& g = grad_ref(y.id);
        Tensor<T>& ga = grad_ref(a.id);
        T* gap = ga.data() + offset;
        const T* gp = g.data();
        for (int64_t i = 0; i < len; ++i) gap[i] += gp[i];
      });
    }
    return y;
  }

  Var sum_all(Var a) {
    const auto& av = val(a);
    T s = T(0);
    for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
    Var y = push(Tensor<T>::scalar(s), requires_grad(a));
    if (requires_grad(y)) {
      backs_.push_back([this, a, y] {
        T g = grad_ref(y.id)[0];
        Tensor<T>& ga = grad_ref(a.id);
        T* gap = ga.data();
        for (int64_t i = 0; i < ga.numel(); ++i) gap[i] += g;
      });
    }
    return y;
  }

  Var mean_all(Var a) {
    int64_t n = val(a).numel();
    if (n == 0) throw Error("mean_all: empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(n));
  }

  // Sum of same-shape vars (used to total scalar loss terms in a
  // deterministic order).
  Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error("add_n: empty list");
    Var acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
  }

  // Scalar node carrying an externally computed value whose gradient
  // w.r.t. x is known. Bridges losses evaluated on a worker tape back
  // into this tape: grad(x) += upstream * grad_wrt_x.
  Var external_scalar(Var x, Tensor<T> grad_wrt_x, T value) {
    if (!grad_wrt_x.same_shape(val(x)))
      throw Error("external_scalar: gradient shape mismatch");
    Var y = push(Tensor<T>::scalar(value), requires_grad(x));
    if (requires_grad(y)) {
      auto gx = std::make_shared<Tensor<T>>(std::move(grad_wrt_x));
      backs_.push_back([this, x, y, gx] {
        T g = grad_ref(y.id)[0];
        accumulate_scaled(x, gx->data(), gx->numel(), g);
      });
    }
    return y;
  }

  // ---- hooks for ops defined outside this header (nn.hpp) ----

  Var make_node(Tensor<T> v, bool rg) { return push(std::move(v), rg); }

  void add_backward(std::function<void()> fn) { backs_.push_back(std::move(fn)); }

  Tensor<T>& grad_accum(Var x) { return grad_ref(check(x)); }

  void accumulate(Var x, const T* g, int64_t n) {
    Tensor<T>& gx = grad_ref(x.id);
    T* p = gx.data();
    for (int64_t i = 0; i < n; ++i) p[i] += g[i];
  }

  void accumulate_scaled(Var x, const T* g, int64_t n, T s) {
    Tensor<T>& gx = grad_ref(x.id);
    T* p = gx.data();
    for (int64_t i = 0; i < n; ++i) p[i] += s * g[i];
  }

private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool rg = false;
  };

  Var push(Tensor<T> v, bool rg) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, rg});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  int32_t check(Var x) const {
    if (!x.valid() || static_cast<size_t>(x.id) >= nodes_.size())
      throw Error("invalid tape variable");
    return x.id;
  }

  Tensor<T>& grad_ref(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.val.shape());
    return n.grad;
  }

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> backs_;
};

}  // namespace wsl
