#pragma once

// Reverse-mode automatic differentiation over dense tensors. The op set
// covers exactly what the network needs; broadcasting is limited to
// trailing-suffix and scalar alignment. Backward visits each node once in
// reverse topological order and accumulates (never overwrites) gradients.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stnet/errors.hpp"
#include "stnet/rng.hpp"
#include "stnet/tensor.hpp"

namespace stnet {

// Every primitive checks its output for NaN/Inf while this flag is on.
inline bool& finite_checks() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  if (!t.all_finite()) throw NumericError(std::string("non-finite values produced by ") + op);
}

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on demand; always matches value.shape
  bool requires_grad = false;
  const char* op = "leaf";
  std::string name;  // set for named parameters
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.data.size() != value.data.size()) grad = Tensor<T>(value.shape);
  }
  void accumulate(const Tensor<T>& g) {
    if (g.shape != value.shape)
      throw InvariantError("gradient shape " + shape_str(g.shape) + " does not match value shape " +
                           shape_str(value.shape));
    ensure_grad();
    for (std::size_t i = 0; i < g.data.size(); ++i) grad.data[i] += g.data[i];
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, const char* op,
                 std::function<void(Node<T>&)> backprop) {
  check_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs)
    if (in && in->requires_grad) {
      n->requires_grad = true;
      break;
    }
  n->inputs = std::move(inputs);
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> v, std::string name = "") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->name = std::move(name);
  check_finite(n->value, "constant");
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> v, std::string name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op = "param";
  n->name = std::move(name);
  check_finite(n->value, "parameter");
  return n;
}

template <typename T>
T value_of(const Var<T>& v) {
  if (v->value.numel() != 1) throw std::invalid_argument("value_of: tensor is not scalar");
  return v->value.data[0];
}

// Seeds the scalar root with gradient 1 and propagates through the
// requires_grad subgraph in reverse topological order, exactly once per node.
template <typename T>
void backward(const Var<T>& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root->value.shape));
  if (!root->requires_grad) return;  // constant graph: all parameter grads stay zero

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->inputs.size()) {
      Node<T>* child = f.n->inputs[f.next++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    n->ensure_grad();
    if (n->backprop) n->backprop(*n);
  }
}

// Named parameter registry; iteration order is creation order, which fixes
// the update order of the optimizer and the checkpoint layout.
template <typename T>
class ParamSet {
 public:
  Var<T> create(const std::string& name, Tensor<T> init) {
    if (lookup_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto v = parameter(std::move(init), name);
    lookup_[name] = items_.size();
    items_.push_back(v);
    return v;
  }
  const std::vector<Var<T>>& items() const { return items_; }
  Var<T> find(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw std::invalid_argument("no such parameter: " + name);
    return items_[it->second];
  }
  void zero_grads() {
    for (auto& p : items_)
      if (!p->grad.data.empty()) p->grad.fill(T(0));
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<Var<T>> items_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-suffix / scalar broadcast.
// ---------------------------------------------------------------------------

enum class BcMode { same, b_suffix, a_suffix, b_scalar, a_scalar };

inline BcMode broadcast_mode(const Shape& a, const Shape& b) {
  if (a == b) return BcMode::same;
  if (shape_numel(b) == 1) return BcMode::b_scalar;
  if (shape_numel(a) == 1) return BcMode::a_scalar;
  auto is_suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
  };
  if (is_suffix(a, b)) return BcMode::b_suffix;
  if (is_suffix(b, a)) return BcMode::a_suffix;
  throw std::invalid_argument("shapes not alignable: " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const BcMode m = broadcast_mode(a->value.shape, b->value.shape);
  const bool a_small = (m == BcMode::a_suffix || m == BcMode::a_scalar);
  const Tensor<T>& big = a_small ? b->value : a->value;
  const Tensor<T>& small = a_small ? a->value : b->value;
  const std::size_t sn = small.numel();
  Tensor<T> out(big.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = big.data[i] + small.data[i % sn];
  return make_node<T>(std::move(out), {a, b}, "add", [a_small, sn](Node<T>& self) {
    Node<T>& A = *self.inputs[0];
    Node<T>& B = *self.inputs[1];
    Node<T>& bigN = a_small ? B : A;
    Node<T>& smallN = a_small ? A : B;
    const auto& g = self.grad.data;
    if (bigN.requires_grad) {
      bigN.ensure_grad();
      auto& d = bigN.grad.data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (smallN.requires_grad) {
      smallN.ensure_grad();
      auto& d = smallN.grad.data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i % sn] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const BcMode m = broadcast_mode(a->value.shape, b->value.shape);
  const bool a_small = (m == BcMode::a_suffix || m == BcMode::a_scalar);
  const Tensor<T>& big = a_small ? b->value : a->value;
  const Tensor<T>& small = a_small ? a->value : b->value;
  const std::size_t sn = small.numel();
  Tensor<T> out(big.shape);
  if (a_small) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = small.data[i % sn] - big.data[i];
  } else {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = big.data[i] - small.data[i % sn];
  }
  return make_node<T>(std::move(out), {a, b}, "sub", [a_small, sn](Node<T>& self) {
    Node<T>& A = *self.inputs[0];
    Node<T>& B = *self.inputs[1];
    const auto& g = self.grad.data;
    if (A.requires_grad) {
      A.ensure_grad();
      auto& d = A.grad.data;
      if (a_small)
        for (std::size_t i = 0; i < g.size(); ++i) d[i % sn] += g[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      auto& d = B.grad.data;
      if (a_small)
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      else
        for (std::size_t i = 0; i < g.size(); ++i) d[i % sn] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const BcMode m = broadcast_mode(a->value.shape, b->value.shape);
  const bool a_small = (m == BcMode::a_suffix || m == BcMode::a_scalar);
  const Tensor<T>& big = a_small ? b->value : a->value;
  const Tensor<T>& small = a_small ? a->value : b->value;
  const std::size_t sn = small.numel();
  Tensor<T> out(big.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = big.data[i] * small.data[i % sn];
  return make_node<T>(std::move(out), {a, b}, "mul", [a_small, sn](Node<T>& self) {
    Node<T>& A = *self.inputs[0];
    Node<T>& B = *self.inputs[1];
    Node<T>& bigN = a_small ? B : A;
    Node<T>& smallN = a_small ? A : B;
    const auto& g = self.grad.data;
    const auto& bigV = bigN.value.data;
    const auto& smallV = smallN.value.data;
    if (bigN.requires_grad) {
      bigN.ensure_grad();
      auto& d = bigN.grad.data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * smallV[i % sn];
    }
    if (smallN.requires_grad) {
      smallN.ensure_grad();
      auto& d = smallN.grad.data;
      for (std::size_t i = 0; i < g.size(); ++i) d[i % sn] += g[i] * bigV[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] * s;
  return make_node<T>(std::move(out), {a}, "scale", [s](Node<T>& self) {
    Node<T>& A = *self.inputs[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    const auto& g = self.grad.data;
    auto& d = A.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

// ---------------------------------------------------------------------------
// Unary elementwise ops.
// ---------------------------------------------------------------------------

// df receives (input value, output value) and returns the local derivative.
template <typename T, typename F, typename DF>
Var<T> unary_op(const Var<T>& x, const char* op, F f, DF df) {
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(x->value.data[i]);
  return make_node<T>(std::move(out), {x}, op, [df](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const auto& g = self.grad.data;
    const auto& xv = X.value.data;
    const auto& yv = self.value.data;
    auto& d = X.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * df(xv[i], yv[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leakyrelu(const Var<T>& x, T slope) {
  return unary_op(
      x, "leakyrelu", [slope](T v) { return v >= T(0) ? v : slope * v; },
      [slope](T v, T) { return v >= T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary_op(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_(const Var<T>& x) {
  return unary_op(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp_(const Var<T>& x) {
  return unary_op(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> abs_(const Var<T>& x) {
  return unary_op(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> recip_eps(const Var<T>& x, T eps) {
  return unary_op(
      x, "recip_eps", [eps](T v) { return T(1) / (v + eps); },
      [](T, T y) { return -y * y; });
}

template <typename T>
Var<T> rsqrt_eps(const Var<T>& x, T eps) {
  return unary_op(
      x, "rsqrt_eps", [eps](T v) { return T(1) / std::sqrt(v + eps); },
      [](T, T y) { return T(-0.5) * y * y * y; });
}

// Numerically stabilized softmax over the last axis; rows sum to 1.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  if (x->value.ndim() < 1) throw std::invalid_argument("softmax: rank must be >= 1");
  const std::size_t F = x->value.shape.back();
  const std::size_t rows = x->value.numel() / F;
  Tensor<T> out(x->value.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x->value.data.data() + r * F;
    T* yi = out.data.data() + r * F;
    T mx = xi[0];
    for (std::size_t f = 1; f < F; ++f) mx = std::max(mx, xi[f]);
    T sum = T(0);
    for (std::size_t f = 0; f < F; ++f) {
      yi[f] = std::exp(xi[f] - mx);
      sum += yi[f];
    }
    for (std::size_t f = 0; f < F; ++f) yi[f] /= sum;
  }
  return make_node<T>(std::move(out), {x}, "softmax", [F, rows](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data.data() + r * F;
      const T* g = self.grad.data.data() + r * F;
      T* d = X.grad.data.data() + r * F;
      T dot = T(0);
      for (std::size_t f = 0; f < F; ++f) dot += g[f] * y[f];
      for (std::size_t f = 0; f < F; ++f) d[f] += y[f] * (g[f] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

// Batched matmul: [..., m, k] x [..., k, n] with identical leading dims.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a->value.shape;
  const Shape& bs = b->value.shape;
  if (as.size() < 2 || bs.size() != as.size())
    throw std::invalid_argument("matmul: ranks must match and be >= 2");
  for (std::size_t i = 0; i + 2 < as.size(); ++i)
    if (as[i] != bs[i]) throw std::invalid_argument("matmul: leading dims differ");
  const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  const std::size_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t batch = shape_numel(as) / (m * k);
  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(os);
  const T* av = a->value.data.data();
  const T* bv = b->value.data.data();
  T* ov = out.data.data();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const T* A = av + bt * m * k;
    const T* B = bv + bt * k * n;
    T* C = ov + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T aik = A[i * k + kk];
        if (aik == T(0)) continue;
        const T* Bk = B + kk * n;
        T* Ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aik * Bk[j];
      }
  }
  return make_node<T>(std::move(out), {a, b}, "matmul", [m, k, n, batch](Node<T>& self) {
    Node<T>& A = *self.inputs[0];
    Node<T>& B = *self.inputs[1];
    const T* g = self.grad.data.data();
    if (A.requires_grad) {
      A.ensure_grad();
      T* da = A.grad.data.data();
      const T* bv = B.value.data.data();
      for (std::size_t bt = 0; bt < batch; ++bt) {
        const T* G = g + bt * m * n;
        const T* Bm = bv + bt * k * n;
        T* dA = da + bt * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            T acc = T(0);
            const T* Gi = G + i * n;
            const T* Bk = Bm + kk * n;
            for (std::size_t j = 0; j < n; ++j) acc += Gi[j] * Bk[j];
            dA[i * k + kk] += acc;
          }
      }
    }
    if (B.requires_grad) {
      B.ensure_grad();
      T* db = B.grad.data.data();
      const T* av = A.value.data.data();
      for (std::size_t bt = 0; bt < batch; ++bt) {
        const T* G = g + bt * m * n;
        const T* Am = av + bt * m * k;
        T* dB = db + bt * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = Am[i * k + kk];
            if (aik == T(0)) continue;
            const T* Gi = G + i * n;
            T* dBk = dB + kk * n;
            for (std::size_t j = 0; j < n; ++j) dBk[j] += aik * Gi[j];
          }
      }
    }
  });
}

namespace detail {

template <typename T>
Var<T> dense_impl(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x->value.shape;
  if (xs.empty()) throw std::invalid_argument("dense: input rank must be >= 1");
  if (w->value.ndim() != 2) throw std::invalid_argument("dense: weight must be rank 2");
  const std::size_t k = xs.back();
  if (w->value.shape[0] != k)
    throw std::invalid_argument("dense: input feature dim " + std::to_string(k) +
                                " does not match weight " + shape_str(w->value.shape));
  const std::size_t n = w->value.shape[1];
  if (b && (b->value.ndim() != 1 || b->value.shape[0] != n))
    throw std::invalid_argument("dense: bias shape mismatch");
  const std::size_t rows = shape_numel(xs) / k;
  Shape os(xs.begin(), xs.end() - 1);
  os.push_back(n);
  Tensor<T> out(os);
  const T* xv = x->value.data.data();
  const T* wv = w->value.data.data();
  T* ov = out.data.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = ov + r * n;
    if (b) {
      const T* bv = b->value.data.data();
      for (std::size_t j = 0; j < n; ++j) o[j] = bv[j];
    }
    const T* xr = xv + r * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T xk = xr[kk];
      if (xk == T(0)) continue;
      const T* wk = wv + kk * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += xk * wk[j];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_node<T>(std::move(out), std::move(inputs), "dense", [k, n, rows](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    Node<T>& W = *self.inputs[1];
    const bool has_bias = self.inputs.size() == 3;
    const T* g = self.grad.data.data();
    if (X.requires_grad) {
      X.ensure_grad();
      T* dx = X.grad.data.data();
      const T* wv = W.value.data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * n;
        T* dxr = dx + r * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          T acc = T(0);
          const T* wk = wv + kk * n;
          for (std::size_t j = 0; j < n; ++j) acc += gr[j] * wk[j];
          dxr[kk] += acc;
        }
      }
    }
    if (W.requires_grad) {
      W.ensure_grad();
      T* dw = W.grad.data.data();
      const T* xv = X.value.data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * n;
        const T* xr = xv + r * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T xk = xr[kk];
          if (xk == T(0)) continue;
          T* dwk = dw + kk * n;
          for (std::size_t j = 0; j < n; ++j) dwk[j] += xk * gr[j];
        }
      }
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      Node<T>& B = *self.inputs[2];
      B.ensure_grad();
      T* db = B.grad.data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * n;
        for (std::size_t j = 0; j < n; ++j) db[j] += gr[j];
      }
    }
  });
}

}  // namespace detail

// Affine map over the last axis: out[..., n] = x[..., k] . w[k, n] (+ b[n]).
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return detail::dense_impl(x, w, b);
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w) {
  return detail::dense_impl(x, w, Var<T>{});
}

// ---------------------------------------------------------------------------
// Convolution and pooling over the last axis.
// ---------------------------------------------------------------------------

enum class Padding { valid, same };

// 1-D convolution over [..., C, L]. Normal mode: w is [C_out, C_in, ks].
// Depthwise mode: w is [C_in, mult, ks]; input channel c produces output
// channels c*mult .. c*mult+mult-1 and no cross-channel mixing occurs.
// 'same' keeps ceil(L/stride) positions, zero padding split left/right with
// the extra sample on the right.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride,
              Padding padding, bool depthwise) {
  const Shape& xs = x->value.shape;
  if (xs.size() < 2) throw std::invalid_argument("conv1d: input rank must be >= 2");
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be positive");
  if (w->value.ndim() != 3) throw std::invalid_argument("conv1d: weight must be rank 3");
  const std::size_t C = xs[xs.size() - 2];
  const std::size_t L = xs[xs.size() - 1];
  const std::size_t batch = shape_numel(xs) / (C * L);
  const std::size_t ks = w->value.shape[2];
  std::size_t mult = 0, cout = 0;
  if (depthwise) {
    if (w->value.shape[0] != C)
      throw std::invalid_argument("conv1d: depthwise weight channels " +
                                  std::to_string(w->value.shape[0]) + " != input channels " +
                                  std::to_string(C));
    mult = w->value.shape[1];
    if (mult == 0) throw std::invalid_argument("conv1d: depthwise multiplier must be positive");
    cout = C * mult;
  } else {
    if (w->value.shape[1] != C)
      throw std::invalid_argument("conv1d: weight input channels mismatch");
    cout = w->value.shape[0];
  }
  if (bias && (bias->value.ndim() != 1 || bias->value.shape[0] != cout))
    throw std::invalid_argument("conv1d: bias shape mismatch");

  std::size_t lout = 0, pad_left = 0;
  if (padding == Padding::valid) {
    if (ks > L) throw std::invalid_argument("conv1d: kernel longer than input (valid padding)");
    lout = (L - ks) / stride + 1;
  } else {
    lout = (L + stride - 1) / stride;
    const std::size_t span = (lout - 1) * stride + ks;
    const std::size_t pad_total = span > L ? span - L : 0;
    pad_left = pad_total / 2;  // extra padding sample goes to the right
  }

  Shape os(xs.begin(), xs.end() - 2);
  os.push_back(cout);
  os.push_back(lout);
  Tensor<T> out(os);
  const T* xv = x->value.data.data();
  const T* wv = w->value.data.data();
  const T* bv = bias ? bias->value.data.data() : nullptr;
  T* ov = out.data.data();
  const long pl = static_cast<long>(pad_left);
  const long Ll = static_cast<long>(L);

  for (std::size_t bt = 0; bt < batch; ++bt) {
    const T* xb = xv + bt * C * L;
    T* ob = ov + bt * cout * lout;
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t ci_begin = depthwise ? co / mult : 0;
      const std::size_t ci_end = depthwise ? ci_begin + 1 : C;
      T* oc = ob + co * lout;
      for (std::size_t t = 0; t < lout; ++t) {
        T acc = bv ? bv[co] : T(0);
        const long base = static_cast<long>(t * stride) - pl;
        for (std::size_t ci = ci_begin; ci < ci_end; ++ci) {
          const T* xc = xb + ci * L;
          const T* wk = depthwise ? wv + co * ks : wv + (co * C + ci) * ks;
          for (std::size_t j = 0; j < ks; ++j) {
            const long pos = base + static_cast<long>(j);
            if (pos >= 0 && pos < Ll) acc += xc[pos] * wk[j];
          }
        }
        oc[t] = acc;
      }
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return make_node<T>(
      std::move(out), std::move(inputs), "conv1d",
      [C, L, batch, ks, mult, cout, stride, pad_left, lout, depthwise](Node<T>& self) {
        Node<T>& X = *self.inputs[0];
        Node<T>& W = *self.inputs[1];
        Node<T>* B = self.inputs.size() == 3 ? self.inputs[2].get() : nullptr;
        const T* g = self.grad.data.data();
        const T* xv = X.value.data.data();
        const T* wv = W.value.data.data();
        const bool need_dx = X.requires_grad;
        const bool need_dw = W.requires_grad;
        const bool need_db = B && B->requires_grad;
        if (need_dx) X.ensure_grad();
        if (need_dw) W.ensure_grad();
        if (need_db) B->ensure_grad();
        T* dx = need_dx ? X.grad.data.data() : nullptr;
        T* dw = need_dw ? W.grad.data.data() : nullptr;
        T* db = need_db ? B->grad.data.data() : nullptr;
        const long pl = static_cast<long>(pad_left);
        const long Ll = static_cast<long>(L);
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const T* xb = xv + bt * C * L;
          T* dxb = need_dx ? dx + bt * C * L : nullptr;
          const T* gb = g + bt * cout * lout;
          for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t ci_begin = depthwise ? co / mult : 0;
            const std::size_t ci_end = depthwise ? ci_begin + 1 : C;
            const T* gc = gb + co * lout;
            for (std::size_t t = 0; t < lout; ++t) {
              const T gv = gc[t];
              if (gv == T(0)) continue;
              if (need_db) db[co] += gv;
              const long base = static_cast<long>(t * stride) - pl;
              for (std::size_t ci = ci_begin; ci < ci_end; ++ci) {
                const std::size_t wbase = depthwise ? co * ks : (co * C + ci) * ks;
                for (std::size_t j = 0; j < ks; ++j) {
                  const long pos = base + static_cast<long>(j);
                  if (pos < 0 || pos >= Ll) continue;
                  if (need_dw) dw[wbase + j] += gv * xb[ci * L + pos];
                  if (need_dx) dxb[ci * L + pos] += gv * wv[wbase + j];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, std::size_t stride, Padding padding,
              bool depthwise) {
  return conv1d(x, w, Var<T>{}, stride, padding, depthwise);
}

// Non-overlapping max pooling over the last axis; a trailing remainder
// shorter than the window is dropped. Gradient routes to the argmax only
// (first maximum on ties).
template <typename T>
Var<T> maxpool1d(const Var<T>& x, std::size_t window) {
  const Shape& xs = x->value.shape;
  if (xs.empty()) throw std::invalid_argument("maxpool1d: input rank must be >= 1");
  if (window == 0) throw std::invalid_argument("maxpool1d: window must be positive");
  const std::size_t L = xs.back();
  if (window > L)
    throw std::invalid_argument("maxpool1d: window " + std::to_string(window) +
                                " exceeds length " + std::to_string(L));
  const std::size_t lout = L / window;
  const std::size_t rows = shape_numel(xs) / L;
  Shape os(xs.begin(), xs.end() - 1);
  os.push_back(lout);
  Tensor<T> out(os);
  std::vector<std::size_t> arg(rows * lout);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x->value.data.data() + r * L;
    for (std::size_t t = 0; t < lout; ++t) {
      std::size_t best = t * window;
      T bv = xr[best];
      for (std::size_t j = 1; j < window; ++j) {
        const std::size_t p = t * window + j;
        if (xr[p] > bv) {
          bv = xr[p];
          best = p;
        }
      }
      out.data[r * lout + t] = bv;
      arg[r * lout + t] = r * L + best;
    }
  }
  return make_node<T>(std::move(out), {x}, "maxpool1d", [arg = std::move(arg)](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const auto& g = self.grad.data;
    auto& d = X.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[arg[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

// Per-sample normalization over the last axis with learnable scale/shift.
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape& xs = x->value.shape;
  if (xs.empty()) throw std::invalid_argument("layernorm: input rank must be >= 1");
  const std::size_t F = xs.back();
  if (gamma->value.shape != Shape{F} || beta->value.shape != Shape{F})
    throw std::invalid_argument("layernorm: scale/shift must be shape [" + std::to_string(F) + "]");
  const std::size_t rows = shape_numel(xs) / F;
  Tensor<T> out(xs);
  std::vector<T> mean(rows), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x->value.data.data() + r * F;
    T mu = T(0);
    for (std::size_t f = 0; f < F; ++f) mu += xr[f];
    mu /= T(F);
    T var = T(0);
    for (std::size_t f = 0; f < F; ++f) {
      const T c = xr[f] - mu;
      var += c * c;
    }
    var /= T(F);
    const T iv = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv[r] = iv;
    T* o = out.data.data() + r * F;
    const T* gm = gamma->value.data.data();
    const T* bt = beta->value.data.data();
    for (std::size_t f = 0; f < F; ++f) o[f] = gm[f] * ((xr[f] - mu) * iv) + bt[f];
  }
  return make_node<T>(std::move(out), {x, gamma, beta}, "layernorm",
                      [F, rows, mean = std::move(mean), inv = std::move(inv)](Node<T>& self) {
                        Node<T>& X = *self.inputs[0];
                        Node<T>& G = *self.inputs[1];
                        Node<T>& Bt = *self.inputs[2];
                        const T* g = self.grad.data.data();
                        const T* xv = X.value.data.data();
                        const T* gm = G.value.data.data();
                        if (G.requires_grad) G.ensure_grad();
                        if (Bt.requires_grad) Bt.ensure_grad();
                        if (X.requires_grad) X.ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* xr = xv + r * F;
                          const T* gr = g + r * F;
                          const T mu = mean[r], iv = inv[r];
                          if (G.requires_grad || Bt.requires_grad) {
                            for (std::size_t f = 0; f < F; ++f) {
                              const T xh = (xr[f] - mu) * iv;
                              if (G.requires_grad) G.grad.data[f] += gr[f] * xh;
                              if (Bt.requires_grad) Bt.grad.data[f] += gr[f];
                            }
                          }
                          if (!X.requires_grad) continue;
                          T s1 = T(0), s2 = T(0);
                          for (std::size_t f = 0; f < F; ++f) {
                            const T dxh = gr[f] * gm[f];
                            s1 += dxh;
                            s2 += dxh * (xr[f] - mu);
                          }
                          const T dvar = s2 * T(-0.5) * iv * iv * iv;
                          const T dmu = -iv * s1;
                          T* dxr = X.grad.data.data() + r * F;
                          for (std::size_t f = 0; f < F; ++f) {
                            const T dxh = gr[f] * gm[f];
                            dxr[f] += dxh * iv + dvar * T(2) * (xr[f] - mu) / T(F) + dmu / T(F);
                          }
                        }
                      });
}

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
  explicit BatchNormState(std::size_t channels)
      : running_mean({channels}), running_var(Tensor<T>::ones({channels})) {}
};

// Per-channel normalization over every non-channel axis. With batch
// statistics the layer normalizes over the current batch (and updates the
// running estimates when update_running is set); otherwise it is a pure
// affine map using the running statistics, so inference is deterministic and
// free of cross-sample coupling.
template <typename T>
Var<T> batchnorm(const Var<T>& x, std::size_t channel_axis, const Var<T>& gamma, const Var<T>& beta,
                 BatchNormState<T>& state, bool use_batch_stats, bool update_running) {
  const Shape& xs = x->value.shape;
  if (channel_axis >= xs.size()) throw std::invalid_argument("batchnorm: channel axis out of range");
  const std::size_t C = xs[channel_axis];
  if (gamma->value.shape != Shape{C} || beta->value.shape != Shape{C})
    throw std::invalid_argument("batchnorm: scale/shift must be shape [" + std::to_string(C) + "]");
  if (state.running_mean.shape != Shape{C})
    throw std::invalid_argument("batchnorm: state channel count mismatch");
  std::size_t inner = 1;
  for (std::size_t i = channel_axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t total = shape_numel(xs);
  const std::size_t n = total / C;
  const T* xv = x->value.data.data();

  std::vector<T> mean(C), inv(C);
  if (use_batch_stats) {
    std::vector<T> sum(C, T(0));
    for (std::size_t i = 0; i < total; ++i) sum[(i / inner) % C] += xv[i];
    for (std::size_t c = 0; c < C; ++c) mean[c] = sum[c] / T(n);
    std::vector<T> sq(C, T(0));
    for (std::size_t i = 0; i < total; ++i) {
      const T c = xv[i] - mean[(i / inner) % C];
      sq[(i / inner) % C] += c * c;
    }
    for (std::size_t c = 0; c < C; ++c) {
      const T var = sq[c] / T(n);  // biased variance, also stored in the running estimate
      inv[c] = T(1) / std::sqrt(var + state.eps);
      if (update_running) {
        state.running_mean.data[c] =
            (T(1) - state.momentum) * state.running_mean.data[c] + state.momentum * mean[c];
        state.running_var.data[c] =
            (T(1) - state.momentum) * state.running_var.data[c] + state.momentum * var;
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean.data[c];
      inv[c] = T(1) / std::sqrt(state.running_var.data[c] + state.eps);
    }
  }

  Tensor<T> out(xs);
  const T* gm = gamma->value.data.data();
  const T* bt = beta->value.data.data();
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t c = (i / inner) % C;
    out.data[i] = gm[c] * ((xv[i] - mean[c]) * inv[c]) + bt[c];
  }

  return make_node<T>(
      std::move(out), {x, gamma, beta}, "batchnorm",
      [C, inner, total, n, use_batch_stats, mean = std::move(mean),
       inv = std::move(inv)](Node<T>& self) {
        Node<T>& X = *self.inputs[0];
        Node<T>& G = *self.inputs[1];
        Node<T>& Bt = *self.inputs[2];
        const T* g = self.grad.data.data();
        const T* xv = X.value.data.data();
        const T* gm = G.value.data.data();
        if (G.requires_grad) G.ensure_grad();
        if (Bt.requires_grad) Bt.ensure_grad();
        if (X.requires_grad) X.ensure_grad();
        if (G.requires_grad || Bt.requires_grad) {
          for (std::size_t i = 0; i < total; ++i) {
            const std::size_t c = (i / inner) % C;
            const T xh = (xv[i] - mean[c]) * inv[c];
            if (G.requires_grad) G.grad.data[c] += g[i] * xh;
            if (Bt.requires_grad) Bt.grad.data[c] += g[i];
          }
        }
        if (!X.requires_grad) return;
        T* dx = X.grad.data.data();
        if (!use_batch_stats) {
          for (std::size_t i = 0; i < total; ++i) {
            const std::size_t c = (i / inner) % C;
            dx[i] += g[i] * gm[c] * inv[c];
          }
          return;
        }
        std::vector<T> s1(C, T(0)), s2(C, T(0));
        for (std::size_t i = 0; i < total; ++i) {
          const std::size_t c = (i / inner) % C;
          const T dxh = g[i] * gm[c];
          s1[c] += dxh;
          s2[c] += dxh * (xv[i] - mean[c]);
        }
        for (std::size_t i = 0; i < total; ++i) {
          const std::size_t c = (i / inner) % C;
          const T iv = inv[c];
          const T dxh = g[i] * gm[c];
          const T dvar = s2[c] * T(-0.5) * iv * iv * iv;
          const T dmu = -iv * s1[c];
          dx[i] += dxh * iv + dvar * T(2) * (xv[i] - mean[c]) / T(n) + dmu / T(n);
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x->value.numel())
    throw std::invalid_argument("reshape: element count mismatch: " + shape_str(x->value.shape) +
                                " -> " + shape_str(new_shape));
  Tensor<T> out(std::move(new_shape), x->value.data);
  return make_node<T>(std::move(out), {x}, "reshape", [](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const auto& g = self.grad.data;
    auto& d = X.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> unsqueeze(const Var<T>& x, std::size_t axis) {
  Shape s = x->value.shape;
  if (axis > s.size()) throw std::invalid_argument("unsqueeze: axis out of range");
  s.insert(s.begin() + static_cast<long>(axis), 1);
  return reshape(x, std::move(s));
}

template <typename T>
Var<T> transpose(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& xs = x->value.shape;
  if (perm.size() != xs.size()) throw std::invalid_argument("transpose: perm rank mismatch");
  std::vector<bool> used(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || used[p]) throw std::invalid_argument("transpose: invalid permutation");
    used[p] = true;
  }
  Shape os(xs.size());
  for (std::size_t d = 0; d < perm.size(); ++d) os[d] = xs[perm[d]];
  const Shape in_strides = shape_strides(xs);
  const std::size_t nd = xs.size();
  const std::size_t n = shape_numel(xs);
  Tensor<T> out(os);
  std::vector<std::size_t> idx(nd, 0);
  std::vector<std::size_t> src_stride(nd);
  for (std::size_t d = 0; d < nd; ++d) src_stride[d] = in_strides[perm[d]];
  for (std::size_t of = 0; of < n; ++of) {
    std::size_t inf = 0;
    for (std::size_t d = 0; d < nd; ++d) inf += idx[d] * src_stride[d];
    out.data[of] = x->value.data[inf];
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
    }
  }
  return make_node<T>(std::move(out), {x}, "transpose",
                      [os, src_stride, nd, n](Node<T>& self) {
                        Node<T>& X = *self.inputs[0];
                        if (!X.requires_grad) return;
                        X.ensure_grad();
                        std::vector<std::size_t> idx(nd, 0);
                        for (std::size_t of = 0; of < n; ++of) {
                          std::size_t inf = 0;
                          for (std::size_t d = 0; d < nd; ++d) inf += idx[d] * src_stride[d];
                          X.grad.data[inf] += self.grad.data[of];
                          for (std::size_t d = nd; d-- > 0;) {
                            if (++idx[d] < os[d]) break;
                            idx[d] = 0;
                          }
                        }
                      });
}

template <typename T>
Var<T> narrow(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& xs = x->value.shape;
  if (axis >= xs.size()) throw std::invalid_argument("narrow: axis out of range");
  if (len == 0 || start + len > xs[axis]) throw std::invalid_argument("narrow: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t dim = xs[axis];
  Shape os = xs;
  os[axis] = len;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < len; ++i) {
      const T* src = x->value.data.data() + (o * dim + start + i) * inner;
      T* dst = out.data.data() + (o * len + i) * inner;
      std::copy(src, src + inner, dst);
    }
  return make_node<T>(std::move(out), {x}, "narrow",
                      [outer, inner, dim, start, len](Node<T>& self) {
                        Node<T>& X = *self.inputs[0];
                        if (!X.requires_grad) return;
                        X.ensure_grad();
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t i = 0; i < len; ++i) {
                            const T* g = self.grad.data.data() + (o * len + i) * inner;
                            T* d = X.grad.data.data() + (o * dim + start + i) * inner;
                            for (std::size_t j = 0; j < inner; ++j) d[j] += g[j];
                          }
                      });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0]->value.shape;
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total_dim = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape;
    if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) throw std::invalid_argument("concat: shape mismatch");
    total_dim += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape os = s0;
  os[axis] = total_dim;
  Tensor<T> out(os);
  std::vector<std::size_t> dims(parts.size());
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t dim = parts[p]->value.shape[axis];
    dims[p] = dim;
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = parts[p]->value.data.data() + o * dim * inner;
      T* dst = out.data.data() + (o * total_dim + offset) * inner;
      std::copy(src, src + dim * inner, dst);
    }
    offset += dim;
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return make_node<T>(std::move(out), std::move(inputs), "concat",
                      [outer, inner, total_dim, dims](Node<T>& self) {
                        std::size_t offset = 0;
                        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                          Node<T>& P = *self.inputs[p];
                          const std::size_t dim = dims[p];
                          if (P.requires_grad) {
                            P.ensure_grad();
                            for (std::size_t o = 0; o < outer; ++o) {
                              const T* g =
                                  self.grad.data.data() + (o * total_dim + offset) * inner;
                              T* d = P.grad.data.data() + o * dim * inner;
                              for (std::size_t j = 0; j < dim * inner; ++j) d[j] += g[j];
                            }
                          }
                          offset += dim;
                        }
                      });
}

// Sum over the last axis; reducing a rank-1 tensor yields shape {1}.
template <typename T>
Var<T> reduce_sum_lastdim(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.empty()) throw std::invalid_argument("reduce_sum_lastdim: rank must be >= 1");
  const std::size_t F = xs.back();
  const std::size_t rows = x->value.numel() / F;
  Shape os(xs.begin(), xs.end() - 1);
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* xr = x->value.data.data() + r * F;
    for (std::size_t f = 0; f < F; ++f) acc += xr[f];
    out.data[r] = acc;
  }
  return make_node<T>(std::move(out), {x}, "reduce_sum", [F, rows](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = self.grad.data[r];
      T* d = X.grad.data.data() + r * F;
      for (std::size_t f = 0; f < F; ++f) d[f] += g;
    }
  });
}

template <typename T>
Var<T> reduce_mean_lastdim(const Var<T>& x) {
  const std::size_t F = x->value.shape.back();
  return scale(reduce_sum_lastdim(x), T(1) / T(F));
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  return reduce_sum_lastdim(reshape(x, {x->value.numel()}));
}

// [..., V] -> [..., V, V] with the input on the diagonal.
template <typename T>
Var<T> diag_embed(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.empty()) throw std::invalid_argument("diag_embed: rank must be >= 1");
  const std::size_t V = xs.back();
  const std::size_t batch = x->value.numel() / V;
  Shape os = xs;
  os.push_back(V);
  Tensor<T> out(os);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < V; ++i)
      out.data[(b * V + i) * V + i] = x->value.data[b * V + i];
  return make_node<T>(std::move(out), {x}, "diag_embed", [V, batch](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < V; ++i)
        X.grad.data[b * V + i] += self.grad.data[(b * V + i) * V + i];
  });
}

// [..., V, F] -> [..., V, V, F]; out[.., i, j, f] = |x[.., i, f] - x[.., j, f]|.
// Subgradient at zero is zero.
template <typename T>
Var<T> pairwise_abs_diff(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.size() < 2) throw std::invalid_argument("pairwise_abs_diff: rank must be >= 2");
  const std::size_t F = xs.back();
  const std::size_t V = xs[xs.size() - 2];
  const std::size_t batch = x->value.numel() / (V * F);
  Shape os(xs.begin(), xs.end() - 2);
  os.push_back(V);
  os.push_back(V);
  os.push_back(F);
  Tensor<T> out(os);
  const T* xv = x->value.data.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = xv + b * V * F;
    T* ob = out.data.data() + b * V * V * F;
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t j = 0; j < V; ++j) {
        const T* xi = xb + i * F;
        const T* xj = xb + j * F;
        T* o = ob + (i * V + j) * F;
        for (std::size_t f = 0; f < F; ++f) o[f] = std::abs(xi[f] - xj[f]);
      }
  }
  return make_node<T>(std::move(out), {x}, "pairwise_abs_diff", [V, F, batch](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const T* xv = X.value.data.data();
    T* dx = X.grad.data.data();
    const T* g = self.grad.data.data();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* xb = xv + b * V * F;
      T* dxb = dx + b * V * F;
      const T* gb = g + b * V * V * F;
      for (std::size_t i = 0; i < V; ++i)
        for (std::size_t j = 0; j < V; ++j) {
          const T* gij = gb + (i * V + j) * F;
          for (std::size_t f = 0; f < F; ++f) {
            const T diff = xb[i * F + f] - xb[j * F + f];
            const T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
            dxb[i * F + f] += s * gij[f];
            dxb[j * F + f] -= s * gij[f];
          }
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Training-specific ops.
// ---------------------------------------------------------------------------

// Gradient reversal: identity forward, -coefficient * upstream gradient
// backward. Everything upstream sees the reversed gradient.
template <typename T>
Var<T> grl(const Var<T>& x, T coefficient) {
  if (coefficient < T(0)) throw std::invalid_argument("grl: coefficient must be >= 0");
  Tensor<T> out = x->value;
  return make_node<T>(std::move(out), {x}, "grl", [coefficient](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const auto& g = self.grad.data;
    auto& d = X.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] -= coefficient * g[i];
  });
}

// Inverted-scaling dropout: kept units are scaled by 1/(1-rate) so the
// expectation matches inference, where this op is an identity.
template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng, bool active) {
  if (rate < T(0) || rate >= T(1)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!active || rate == T(0)) return x;
  const T keep_scale = T(1) / (T(1) - rate);
  std::vector<T> factor(x->value.numel());
  for (std::size_t i = 0; i < factor.size(); ++i)
    factor[i] = rng.uniform() >= static_cast<double>(rate) ? keep_scale : T(0);
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x->value.data[i] * factor[i];
  return make_node<T>(std::move(out), {x}, "dropout", [factor = std::move(factor)](Node<T>& self) {
    Node<T>& X = *self.inputs[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    const auto& g = self.grad.data;
    auto& d = X.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor[i];
  });
}

// Mean negative log-likelihood over rows of a probability matrix [N, G].
// Probabilities below the clamp contribute log(clamp) with zero gradient.
template <typename T>
Var<T> nll_mean(const Var<T>& probs, const std::vector<std::size_t>& labels,
                T clamp = T(1e-12)) {
  if (probs->value.ndim() != 2) throw std::invalid_argument("nll_mean: probs must be rank 2");
  const std::size_t N = probs->value.shape[0];
  const std::size_t G = probs->value.shape[1];
  if (labels.size() != N) throw std::invalid_argument("nll_mean: label count mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] >= G) throw std::invalid_argument("nll_mean: label out of range");
    const T p = probs->value.data[i * G + labels[i]];
    acc += std::log(std::max(p, clamp));
  }
  Tensor<T> out = Tensor<T>::scalar(-acc / T(N));
  return make_node<T>(std::move(out), {probs}, "nll_mean",
                      [labels, N, G, clamp](Node<T>& self) {
                        Node<T>& P = *self.inputs[0];
                        if (!P.requires_grad) return;
                        P.ensure_grad();
                        const T g0 = self.grad.data[0];
                        for (std::size_t i = 0; i < N; ++i) {
                          const T p = P.value.data[i * G + labels[i]];
                          if (p > clamp) P.grad.data[i * G + labels[i]] -= g0 / (T(N) * p);
                        }
                      });
}

// ---------------------------------------------------------------------------
// LSTM cell (composition of primitives; gate order i, f, g, o).
// ---------------------------------------------------------------------------

template <typename T>
struct LstmParams {
  Var<T> wx;  // [F, 4H]
  Var<T> wh;  // [H, 4H]
  Var<T> b;   // [4H]
};

template <typename T>
struct LstmState {
  Var<T> h, c;  // each [N, H]
};

// One step of the standard gate equations:
//   i = sig(Wx_i x + Wh_i h + b_i), f = sig(...), g = tanh(...), o = sig(...)
//   c' = f*c + i*g, h' = o * tanh(c')
template <typename T>
LstmState<T> lstm_cell(const Var<T>& x, const Var<T>& h, const Var<T>& c,
                       const LstmParams<T>& p) {
  if (x->value.ndim() != 2 || h->value.ndim() != 2 || c->value.ndim() != 2)
    throw std::invalid_argument("lstm_cell: x, h, c must be rank 2");
  const std::size_t H = h->value.shape[1];
  if (p.wx->value.shape[1] != 4 * H || p.wh->value.shape != Shape{H, 4 * H} ||
      p.b->value.shape != Shape{4 * H})
    throw std::invalid_argument("lstm_cell: parameter shapes inconsistent with hidden size");
  auto z = add(dense(x, p.wx), dense(h, p.wh, p.b));  // [N, 4H]
  auto gi = sigmoid(narrow(z, 1, 0, H));
  auto gf = sigmoid(narrow(z, 1, H, H));
  auto gg = tanh_(narrow(z, 1, 2 * H, H));
  auto go = sigmoid(narrow(z, 1, 3 * H, H));
  auto c_next = add(mul(gf, c), mul(gi, gg));
  auto h_next = mul(go, tanh_(c_next));
  return {h_next, c_next};
}

}  // namespace stnet
