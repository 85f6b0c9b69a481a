#pragma once

// Dense row-major tensors with reverse-mode autodiff on a dynamic graph.
// The production path runs in float; a double instantiation exists for
// oracle comparisons and gradient checks.
//
// Layout conventions used across the project:
//   feature maps  {H, W, C}   channels-last
//   token sets    {k, d}
//   vectors       {n}
//   scalars       {1}

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace smat {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void fail_shape(const std::string& msg) {
  throw std::invalid_argument(msg);
}

namespace detail {
inline uint64_t& node_seq() {
  thread_local uint64_t c = 0;
  return c;
}
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording for the current thread while alive.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Scalar-multiply instrumentation. Ops report the multiplies they actually
// perform whenever a scope is active; used by complexity tests and the
// operation-count oracles.
struct MulCounter {
  unsigned long long mults = 0;
};

namespace detail {
inline MulCounter*& mul_counter_slot() {
  thread_local MulCounter* c = nullptr;
  return c;
}
}  // namespace detail

inline void count_mults(unsigned long long n) {
  if (auto* c = detail::mul_counter_slot()) c->mults += n;
}

struct MulCountScope {
  MulCounter counter;
  MulCounter* prev;
  MulCountScope() : prev(detail::mul_counter_slot()) {
    detail::mul_counter_slot() = &counter;
  }
  ~MulCountScope() { detail::mul_counter_slot() = prev; }
  MulCountScope(const MulCountScope&) = delete;
  MulCountScope& operator=(const MulCountScope&) = delete;
  unsigned long long count() const { return counter.mults; }
};

template <typename T>
struct NodeT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized on first accumulation
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;  // null for leaves

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape s) {
    return make(std::move(s), {});
  }
  static TensorT full(Shape s, T v) {
    auto t = make(std::move(s), {});
    std::fill(t.n_->data.begin(), t.n_->data.end(), v);
    return t;
  }
  static TensorT from(Shape s, std::vector<T> d) {
    if ((long long)d.size() != numel(s))
      fail_shape("tensor init: " + std::to_string(d.size()) +
                 " values for shape " + shape_str(s));
    auto t = make(std::move(s), {});
    t.n_->data = std::move(d);
    return t;
  }
  static TensorT scalar(T v) { return from({1}, {v}); }
  static TensorT wrap(std::shared_ptr<NodeT<T>> n) {
    TensorT t;
    t.n_ = std::move(n);
    return t;
  }

  bool defined() const { return (bool)n_; }
  const Shape& shape() const { return n_->shape; }
  long long size() const { return (long long)n_->data.size(); }
  std::vector<T>& vec() { return n_->data; }
  const std::vector<T>& vec() const { return n_->data; }

  T item() const {
    if (size() != 1)
      fail_shape("item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }
  const std::vector<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

  // Reverse pass from a scalar root. Nodes run in exact reverse construction
  // order; every gradient contribution is summed, never overwritten.
  void backward() const {
    if (!n_) fail_shape("backward: undefined tensor");
    if (size() != 1)
      fail_shape("backward: root must be scalar, got " + shape_str(shape()));
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> seen;
    std::vector<NodeT<T>*> stack{n_.get()};
    while (!stack.empty()) {
      NodeT<T>* cur = stack.back();
      stack.pop_back();
      if (!cur->requires_grad) continue;
      if (!seen.insert(cur).second) continue;
      order.push_back(cur);
      for (auto& p : cur->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](NodeT<T>* a, NodeT<T>* b) { return a->seq > b->seq; });
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (NodeT<T>* node : order) {
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }

  std::shared_ptr<NodeT<T>>& node() { return n_; }
  const std::shared_ptr<NodeT<T>>& node() const { return n_; }

 private:
  static TensorT make(Shape s, std::vector<T> d) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(s);
    if (numel(n->shape) <= 0)
      fail_shape("tensor shape must have positive dims: " +
                 shape_str(n->shape));
    n->data = d.empty() ? std::vector<T>(numel(n->shape), T(0)) : std::move(d);
    n->seq = ++detail::node_seq();
    return wrap(std::move(n));
  }

  std::shared_ptr<NodeT<T>> n_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

// Allocates the result of an op. Parents are linked only when the graph is
// recording and some input carries gradient.
template <typename T>
TensorT<T> op_result(Shape shape,
                     std::initializer_list<const TensorT<T>*> inputs) {
  auto out = TensorT<T>::zeros(std::move(shape));
  if (!grad_enabled()) return out;
  bool any = false;
  for (auto* in : inputs) any = any || (*in).requires_grad();
  if (!any) return out;
  out.node()->requires_grad = true;
  for (auto* in : inputs) out.node()->parents.push_back((*in).node());
  return out;
}

template <typename T>
void accum(const std::shared_ptr<NodeT<T>>& n, long long i, T v) {
  n->grad[i] += v;
}

}  // namespace detail

}  // namespace smat
