#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "useg/tensor.hpp"

namespace useg {

// Reverse-mode node: a value plus a gradient slot and the closure that pushes
// this node's gradient into its parents. Each node is produced by at most one
// operation, so the graph is a DAG rooted at the loss.
template <typename T>
struct VarNode {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily; see grad_live
  bool grad_live = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<VarNode<T>>> parents;
  std::function<void()> backprop;  // may be empty for leaves

  explicit VarNode(Tensor<T> v) : value(std::move(v)) {}

  // Accumulates into the gradient slot, allocating it on first touch.
  void accumulate(const Tensor<T>& delta) {
    if (!grad_live) {
      grad = zeros_like(value);
      grad_live = true;
    }
    if (!grad.same_shape(delta)) {
      throw ShapeError("gradient shape " + delta.shape().str() +
                       " does not match value shape " + value.shape().str());
    }
    T* g = grad.data();
    const T* d = delta.data();
    for (std::int64_t i = 0; i < grad.size(); ++i) g[i] += d[i];
  }

  void zero_grad() {
    if (grad_live) grad.fill(T(0));
  }
};

template <typename T>
using Variable = std::shared_ptr<VarNode<T>>;

// Thread-local switch that disables graph recording (inference fast path).
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
Variable<T> make_variable(Tensor<T> value, bool requires_grad = false) {
  auto v = std::make_shared<VarNode<T>>(std::move(value));
  v->requires_grad = requires_grad;
  return v;
}

template <typename T>
Variable<T> constant(Tensor<T> value) {
  return make_variable(std::move(value), false);
}

namespace detail {

// Creates the result node of an op; wires parents only while grad recording
// is on and at least one parent needs gradients.
template <typename T>
Variable<T> make_op_node(Tensor<T> value, const char* op,
                         std::initializer_list<Variable<T>> parents) {
  auto node = std::make_shared<VarNode<T>>(std::move(value));
  node->op = op;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p && p->requires_grad) needs = true;
    }
    if (needs) {
      node->requires_grad = true;
      for (const auto& p : parents) {
        if (p) node->parents.push_back(p);
      }
    }
  }
  return node;
}

template <typename T>
Variable<T> make_op_node(Tensor<T> value, const char* op,
                         const std::vector<Variable<T>>& parents) {
  auto node = std::make_shared<VarNode<T>>(std::move(value));
  node->op = op;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p && p->requires_grad) needs = true;
    }
    if (needs) {
      node->requires_grad = true;
      for (const auto& p : parents) {
        if (p) node->parents.push_back(p);
      }
    }
  }
  return node;
}

}  // namespace detail

// Reverse topological traversal from a scalar root. Gradients accumulate
// additively; call zero_grad on parameters between steps.
template <typename T>
void backward(const Variable<T>& root) {
  const Shape4 s = root->value.shape();
  if (s.elems() != 1) {
    throw ValueError("backward requires a scalar (1,1,1,1) root, got " +
                     s.str());
  }
  // Iterative post-order DFS.
  std::vector<VarNode<T>*> order;
  std::unordered_set<VarNode<T>*> seen;
  std::vector<std::pair<VarNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      VarNode<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->accumulate(ones<T>({1, 1, 1, 1}));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode<T>* node = *it;
    if (node->backprop && node->grad_live) node->backprop();
  }
}

// ---- elementwise graph ops -------------------------------------------------

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b) {
  auto node = detail::make_op_node(add(a->value, b->value), "add", {a, b});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> pa = a, pb = b;
    node->backprop = [self, pa, pb] {
      if (pa->requires_grad) pa->accumulate(self->grad);
      if (pb->requires_grad)
        pb->accumulate(reduce_to(self->grad, pb->value.shape()));
    };
  }
  return node;
}

template <typename T>
Variable<T> sub(const Variable<T>& a, const Variable<T>& b) {
  auto node = detail::make_op_node(sub(a->value, b->value), "sub", {a, b});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> pa = a, pb = b;
    node->backprop = [self, pa, pb] {
      if (pa->requires_grad) pa->accumulate(self->grad);
      if (pb->requires_grad) {
        Tensor<T> g = reduce_to(self->grad, pb->value.shape());
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] = -g[i];
        pb->accumulate(g);
      }
    };
  }
  return node;
}

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b) {
  auto node = detail::make_op_node(mul(a->value, b->value), "mul", {a, b});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> pa = a, pb = b;
    node->backprop = [self, pa, pb] {
      if (pa->requires_grad) pa->accumulate(mul(self->grad, pb->value));
      if (pb->requires_grad) {
        pb->accumulate(
            reduce_to(mul(self->grad, pa->value), pb->value.shape()));
      }
    };
  }
  return node;
}

// y = scale * x + shift with compile-time constants (not differentiable
// through scale/shift).
template <typename T>
Variable<T> affine(const Variable<T>& x, T scale, T shift) {
  Tensor<T> out(x->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i)
    out[i] = scale * x->value[i] + shift;
  auto node = detail::make_op_node(std::move(out), "affine", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px, scale] {
      Tensor<T> g = self->grad;
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= scale;
      px->accumulate(g);
    };
  }
  return node;
}

template <typename T>
Variable<T> sum(const Variable<T>& x) {
  Tensor<T> out({1, 1, 1, 1});
  out[0] = sum_all(x->value);
  auto node = detail::make_op_node(std::move(out), "sum", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px] {
      px->accumulate(full<T>(px->value.shape(), self->grad[0]));
    };
  }
  return node;
}

template <typename T>
Variable<T> mean(const Variable<T>& x) {
  const T inv = T(1) / static_cast<T>(x->value.size());
  Tensor<T> out({1, 1, 1, 1});
  out[0] = sum_all(x->value) * inv;
  auto node = detail::make_op_node(std::move(out), "mean", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px, inv] {
      px->accumulate(full<T>(px->value.shape(), self->grad[0] * inv));
    };
  }
  return node;
}

// Scalar division of two (1,1,1,1) variables.
template <typename T>
Variable<T> div_scalar(const Variable<T>& a, const Variable<T>& b) {
  if (a->value.size() != 1 || b->value.size() != 1) {
    throw ValueError("div_scalar expects scalar variables");
  }
  Tensor<T> out({1, 1, 1, 1});
  out[0] = a->value[0] / b->value[0];
  auto node = detail::make_op_node(std::move(out), "div", {a, b});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> pa = a, pb = b;
    node->backprop = [self, pa, pb] {
      const T g = self->grad[0];
      const T bv = pb->value[0];
      if (pa->requires_grad) {
        Tensor<T> ga({1, 1, 1, 1});
        ga[0] = g / bv;
        pa->accumulate(ga);
      }
      if (pb->requires_grad) {
        Tensor<T> gb({1, 1, 1, 1});
        gb[0] = -g * pa->value[0] / (bv * bv);
        pb->accumulate(gb);
      }
    };
  }
  return node;
}

template <typename T>
Variable<T> concat_channels(const std::vector<Variable<T>>& parts) {
  std::vector<Tensor<T>> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p->value);
  auto node =
      detail::make_op_node(concat_channels(vals), "concat_channels", parts);
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    std::vector<Variable<T>> ps = parts;
    node->backprop = [self, ps] {
      const Shape4 s = self->value.shape();
      const std::int64_t hw = s.h * s.w;
      std::int64_t co = 0;
      for (const auto& p : ps) {
        const std::int64_t pc = p->value.shape().c;
        if (p->requires_grad) {
          Tensor<T> g(p->value.shape());
          for (std::int64_t in = 0; in < s.n; ++in) {
            const T* src = self->grad.data() + (in * s.c + co) * hw;
            T* dst = g.data() + in * pc * hw;
            for (std::int64_t i = 0; i < pc * hw; ++i) dst[i] = src[i];
          }
          p->accumulate(g);
        }
        co += pc;
      }
    };
  }
  return node;
}

template <typename T>
std::vector<Variable<T>> split_channels(const Variable<T>& x, std::int64_t k) {
  std::vector<Tensor<T>> vals = split_channels(x->value, k);
  std::vector<Variable<T>> outs;
  outs.reserve(vals.size());
  const std::int64_t ck = x->value.shape().c / k;
  for (std::int64_t j = 0; j < k; ++j) {
    auto node = detail::make_op_node(std::move(vals[static_cast<std::size_t>(j)]),
                                     "split_channels", {x});
    if (node->requires_grad) {
      VarNode<T>* self = node.get();
      Variable<T> px = x;
      const std::int64_t c0 = j * ck;
      node->backprop = [self, px, c0] {
        const Shape4 sx = px->value.shape();
        const Shape4 sp = self->value.shape();
        const std::int64_t hw = sx.h * sx.w;
        Tensor<T> g(sx, T(0));
        for (std::int64_t in = 0; in < sx.n; ++in) {
          const T* src = self->grad.data() + in * sp.c * hw;
          T* dst = g.data() + (in * sx.c + c0) * hw;
          for (std::int64_t i = 0; i < sp.c * hw; ++i) dst[i] = src[i];
        }
        px->accumulate(g);
      };
    }
    outs.push_back(node);
  }
  return outs;
}

template <typename T>
Variable<T> channel_mean(const Variable<T>& x) {
  auto node =
      detail::make_op_node(channel_mean(x->value), "channel_mean", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    node->backprop = [self, px] {
      const Shape4 s = px->value.shape();
      const std::int64_t hw = s.h * s.w;
      const T inv_c = T(1) / static_cast<T>(s.c);
      Tensor<T> g(s);
      for (std::int64_t in = 0; in < s.n; ++in) {
        const T* src = self->grad.data() + in * hw;
        for (std::int64_t ic = 0; ic < s.c; ++ic) {
          T* dst = g.data() + (in * s.c + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * inv_c;
        }
      }
      px->accumulate(g);
    };
  }
  return node;
}

template <typename T>
Variable<T> permute_channels(const Variable<T>& x, std::vector<int> perm) {
  auto node = detail::make_op_node(permute_channels(x->value, perm),
                                   "permute_channels", {x});
  if (node->requires_grad) {
    VarNode<T>* self = node.get();
    Variable<T> px = x;
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
      inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    node->backprop = [self, px, inv] {
      px->accumulate(permute_channels(self->grad, inv));
    };
  }
  return node;
}

}  // namespace useg
