#pragma once

// Differentiable operations over TensorT. Each op validates shapes up front,
// fills the forward result, and attaches a backward closure when some input
// is on a gradient path. Backward closures accumulate with +=, so a tensor
// used twice receives the sum of both path gradients.

#include <cmath>

#include "smat/tensor.hpp"

namespace smat {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const TensorT<T>& a,
                        const TensorT<T>& b) {
  if (a.shape() != b.shape())
    fail_shape(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
               " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank2(const char* op, const TensorT<T>& t) {
  if (t.shape().size() != 2)
    fail_shape(std::string(op) + ": expected rank-2 tensor, got " +
               shape_str(t.shape()));
}

}  // namespace detail

// ---- elementwise binary ----

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("add", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("sub", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("mul", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  count_mults(ov.size());
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] += self.grad[i] * an->data[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("div", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] / bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] -= self.grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
      }
    };
  }
  return out;
}

// Ties select the first argument; its subgradient takes the whole pull.
template <typename T>
TensorT<T> minimum(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("minimum", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] <= bv[i] ? av[i] : bv[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        bool take_a = an->data[i] <= bn->data[i];
        if (take_a && an->requires_grad) {
          an->ensure_grad();
          an->grad[i] += self.grad[i];
        } else if (!take_a && bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] += self.grad[i];
        }
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> maximum(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("maximum", a, b);
  auto out = detail::op_result<T>(a.shape(), {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] >= bv[i] ? av[i] : bv[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn](NodeT<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        bool take_a = an->data[i] >= bn->data[i];
        if (take_a && an->requires_grad) {
          an->ensure_grad();
          an->grad[i] += self.grad[i];
        } else if (!take_a && bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] += self.grad[i];
        }
      }
    };
  }
  return out;
}

// ---- elementwise unary ----

// Subgradient at 0 is 0.
template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (xn->data[i] > T(0)) xn->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
TensorT<T> abs_elem(const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::abs(xv[i]);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        if (xn->data[i] > T(0)) xn->grad[i] += self.grad[i];
        else if (xn->data[i] < T(0)) xn->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> log_elem(const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i] / xn->data[i];
    };
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
  if (out.requires_grad()) {
    auto xn = x.node();
    // reading the output through `self` (not a captured shared_ptr) keeps the
    // node from owning itself through its backward_fn
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        T y = self.data[i];
        xn->grad[i] += self.grad[i] * y * (T(1) - y);
      }
    };
  }
  return out;
}

// Gradient passes only strictly inside (lo, hi).
template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = std::min(std::max(xv[i], lo), hi);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, lo, hi](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (xn->data[i] > lo && xn->data[i] < hi) xn->grad[i] += self.grad[i];
    };
  }
  return out;
}

// exp(x - max(x)). The shift is treated as constant in backward, which is
// exact for any downstream expression that divides by the summed weights
// (the shift cancels), i.e. the softmax composite.
template <typename T>
TensorT<T> exp_shift(const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  T m = xv[0];
  for (T v : xv) m = std::max(m, v);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i] - m);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i] * self.data[i];
    };
  }
  return out;
}

// ---- scalar constants ----

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  count_mults(ov.size());
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, c](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[i] += self.grad[i] * c;
    };
  }
  return out;
}

// c - x
template <typename T>
TensorT<T> rsub_scalar(T c, const TensorT<T>& x) {
  auto out = detail::op_result<T>(x.shape(), {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = c - xv[i];
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] -= self.grad[i];
    };
  }
  return out;
}

// ---- broadcast helpers (only the patterns the model needs) ----

// M {k,d} + v {d}, v added to every row.
template <typename T>
TensorT<T> add_row_broadcast(const TensorT<T>& m, const TensorT<T>& v) {
  detail::require_rank2("add_row_broadcast", m);
  int k = m.shape()[0], d = m.shape()[1];
  if (v.shape() != Shape{d})
    fail_shape("add_row_broadcast: vector " + shape_str(v.shape()) +
               " does not match row width of " + shape_str(m.shape()));
  auto out = detail::op_result<T>(m.shape(), {&m, &v});
  const auto& mv = m.vec();
  const auto& vv = v.vec();
  auto& ov = out.vec();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) ov[(size_t)i * d + j] = mv[(size_t)i * d + j] + vv[j];
  if (out.requires_grad()) {
    auto mn = m.node(), vn = v.node();
    out.node()->backward_fn = [mn, vn, k, d](NodeT<T>& self) {
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) mn->grad[i] += self.grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j) vn->grad[j] += self.grad[(size_t)i * d + j];
      }
    };
  }
  return out;
}

// map {H,W,C} + b {C}
template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.shape().size() != 3)
    fail_shape("add_channel_bias: expected {H,W,C}, got " + shape_str(x.shape()));
  int c = x.shape()[2];
  if (b.shape() != Shape{c})
    fail_shape("add_channel_bias: bias " + shape_str(b.shape()) +
               " does not match channels of " + shape_str(x.shape()));
  auto out = detail::op_result<T>(x.shape(), {&x, &b});
  const auto& xv = x.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  size_t n = ov.size();
  for (size_t i = 0; i < n; ++i) ov[i] = xv[i] + bv[i % c];
  if (out.requires_grad()) {
    auto xn = x.node(), bn = b.node();
    out.node()->backward_fn = [xn, bn, c](NodeT<T>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i % c] += self.grad[i];
      }
    };
  }
  return out;
}

// out[i,j] = M[i,j] * s[i]
template <typename T>
TensorT<T> row_scale(const TensorT<T>& m, const TensorT<T>& s) {
  detail::require_rank2("row_scale", m);
  int k = m.shape()[0], d = m.shape()[1];
  if (numel(s.shape()) != k)
    fail_shape("row_scale: scale " + shape_str(s.shape()) +
               " does not match rows of " + shape_str(m.shape()));
  auto out = detail::op_result<T>(m.shape(), {&m, &s});
  const auto& mv = m.vec();
  const auto& sv = s.vec();
  auto& ov = out.vec();
  for (int i = 0; i < k; ++i) {
    T si = sv[i];
    for (int j = 0; j < d; ++j) ov[(size_t)i * d + j] = mv[(size_t)i * d + j] * si;
  }
  count_mults((unsigned long long)k * d);
  if (out.requires_grad()) {
    auto mn = m.node(), sn = s.node();
    out.node()->backward_fn = [mn, sn, k, d](NodeT<T>& self) {
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j)
            mn->grad[(size_t)i * d + j] += self.grad[(size_t)i * d + j] * sn->data[i];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (int i = 0; i < k; ++i) {
          T acc = 0;
          for (int j = 0; j < d; ++j)
            acc += self.grad[(size_t)i * d + j] * mn->data[(size_t)i * d + j];
          sn->grad[i] += acc;
        }
      }
    };
  }
  return out;
}

// out[i,j] = M[i,j] * a[j]
template <typename T>
TensorT<T> col_scale(const TensorT<T>& m, const TensorT<T>& a) {
  detail::require_rank2("col_scale", m);
  int k = m.shape()[0], d = m.shape()[1];
  if (numel(a.shape()) != d)
    fail_shape("col_scale: scale " + shape_str(a.shape()) +
               " does not match columns of " + shape_str(m.shape()));
  auto out = detail::op_result<T>(m.shape(), {&m, &a});
  const auto& mv = m.vec();
  const auto& av = a.vec();
  auto& ov = out.vec();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j)
      ov[(size_t)i * d + j] = mv[(size_t)i * d + j] * av[j];
  count_mults((unsigned long long)k * d);
  if (out.requires_grad()) {
    auto mn = m.node(), an = a.node();
    out.node()->backward_fn = [mn, an, k, d](NodeT<T>& self) {
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j)
            mn->grad[(size_t)i * d + j] += self.grad[(size_t)i * d + j] * an->data[j];
      }
      if (an->requires_grad) {
        an->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j)
            an->grad[j] += self.grad[(size_t)i * d + j] * mn->data[(size_t)i * d + j];
      }
    };
  }
  return out;
}

// t / s where s is a one-element tensor.
template <typename T>
TensorT<T> div_by_scalar(const TensorT<T>& t, const TensorT<T>& s) {
  if (numel(s.shape()) != 1)
    fail_shape("div_by_scalar: divisor must be scalar, got " + shape_str(s.shape()));
  auto out = detail::op_result<T>(t.shape(), {&t, &s});
  const auto& tv = t.vec();
  T sv = s.vec()[0];
  T inv = T(1) / sv;
  auto& ov = out.vec();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = tv[i] * inv;
  count_mults(ov.size());
  if (out.requires_grad()) {
    auto tn = t.node(), sn = s.node();
    out.node()->backward_fn = [tn, sn](NodeT<T>& self) {
      T sval = sn->data[0];
      if (tn->requires_grad) {
        tn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          tn->grad[i] += self.grad[i] / sval;
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        T acc = 0;
        for (size_t i = 0; i < self.grad.size(); ++i)
          acc += self.grad[i] * tn->data[i];
        sn->grad[0] -= acc / (sval * sval);
      }
    };
  }
  return out;
}

// ---- reductions ----

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  auto out = detail::op_result<T>({1}, {&x});
  const auto& xv = x.vec();
  T acc = 0;
  for (T v : xv) acc += v;
  out.vec()[0] = acc;
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      T g = self.grad[0];
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
  }
  return out;
}

// Column sums of a {k,d} matrix -> {d}.
template <typename T>
TensorT<T> col_sum(const TensorT<T>& m) {
  detail::require_rank2("col_sum", m);
  int k = m.shape()[0], d = m.shape()[1];
  auto out = detail::op_result<T>({d}, {&m});
  const auto& mv = m.vec();
  auto& ov = out.vec();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < d; ++j) ov[j] += mv[(size_t)i * d + j];
  if (out.requires_grad()) {
    auto mn = m.node();
    out.node()->backward_fn = [mn, k, d](NodeT<T>& self) {
      if (!mn->requires_grad) return;
      mn->ensure_grad();
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < d; ++j) mn->grad[(size_t)i * d + j] += self.grad[j];
    };
  }
  return out;
}

// ---- linear algebra ----

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  int m = a.shape()[0], n = a.shape()[1];
  int n2 = b.shape()[0], p = b.shape()[1];
  if (n != n2)
    fail_shape("matmul: inner dimensions differ, " + shape_str(a.shape()) +
               " vs " + shape_str(b.shape()));
  auto out = detail::op_result<T>({m, p}, {&a, &b});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < n; ++kk) {
      T av_ik = av[(size_t)i * n + kk];
      const T* brow = &bv[(size_t)kk * p];
      T* orow = &ov[(size_t)i * p];
      for (int j = 0; j < p; ++j) orow[j] += av_ik * brow[j];
    }
  }
  count_mults((unsigned long long)m * n * p);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn, m, n, p](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < n; ++kk) {
            T acc = 0;
            const T* grow = &self.grad[(size_t)i * p];
            const T* brow = &bn->data[(size_t)kk * p];
            for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
            an->grad[(size_t)i * n + kk] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * G
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < n; ++kk) {
            T av_ik = an->data[(size_t)i * n + kk];
            const T* grow = &self.grad[(size_t)i * p];
            T* brow = &bn->grad[(size_t)kk * p];
            for (int j = 0; j < p; ++j) brow[j] += av_ik * grow[j];
          }
      }
    };
  }
  return out;
}

template <typename T>
TensorT<T> transpose2(const TensorT<T>& a) {
  detail::require_rank2("transpose2", a);
  int m = a.shape()[0], n = a.shape()[1];
  auto out = detail::op_result<T>({n, m}, {&a});
  const auto& av = a.vec();
  auto& ov = out.vec();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) ov[(size_t)j * m + i] = av[(size_t)i * n + j];
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward_fn = [an, m, n](NodeT<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[(size_t)i * n + j] += self.grad[(size_t)j * m + i];
    };
  }
  return out;
}

// Softmax over `axis` of a rank-1 or rank-2 tensor, max-shifted per slice.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const Shape& s = x.shape();
  int rank = (int)s.size();
  if (rank != 1 && rank != 2)
    fail_shape("softmax: expected rank 1 or 2, got " + shape_str(s));
  if (axis < 0 || axis >= rank)
    fail_shape("softmax: axis " + std::to_string(axis) + " out of range for " +
               shape_str(s));
  int slices, len, slice_stride, elem_stride;
  if (rank == 1) {
    slices = 1; len = s[0]; slice_stride = 0; elem_stride = 1;
  } else if (axis == 1) {
    slices = s[0]; len = s[1]; slice_stride = s[1]; elem_stride = 1;
  } else {
    slices = s[1]; len = s[0]; slice_stride = 1; elem_stride = s[1];
  }
  auto out = detail::op_result<T>(s, {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (int sl = 0; sl < slices; ++sl) {
    size_t base = (size_t)sl * slice_stride;
    T m = xv[base];
    for (int i = 1; i < len; ++i) m = std::max(m, xv[base + (size_t)i * elem_stride]);
    T sum = 0;
    for (int i = 0; i < len; ++i) {
      T e = std::exp(xv[base + (size_t)i * elem_stride] - m);
      ov[base + (size_t)i * elem_stride] = e;
      sum += e;
    }
    for (int i = 0; i < len; ++i) ov[base + (size_t)i * elem_stride] /= sum;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, slices, len, slice_stride,
                               elem_stride](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int sl = 0; sl < slices; ++sl) {
        size_t base = (size_t)sl * slice_stride;
        T dot = 0;
        for (int i = 0; i < len; ++i) {
          size_t idx = base + (size_t)i * elem_stride;
          dot += self.grad[idx] * self.data[idx];
        }
        for (int i = 0; i < len; ++i) {
          size_t idx = base + (size_t)i * elem_stride;
          xn->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    };
  }
  return out;
}

// ---- shape ops ----

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape s) {
  if (numel(s) != x.size())
    fail_shape("reshape: cannot view " + shape_str(x.shape()) + " as " +
               shape_str(s));
  auto out = detail::op_result<T>(std::move(s), {&x});
  out.vec() = x.vec();
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_rank2("concat_rows", a);
  detail::require_rank2("concat_rows", b);
  if (a.shape()[1] != b.shape()[1])
    fail_shape("concat_rows: widths differ, " + shape_str(a.shape()) + " vs " +
               shape_str(b.shape()));
  int ka = a.shape()[0], kb = b.shape()[0], d = a.shape()[1];
  auto out = detail::op_result<T>({ka + kb, d}, {&a, &b});
  auto& ov = out.vec();
  std::copy(a.vec().begin(), a.vec().end(), ov.begin());
  std::copy(b.vec().begin(), b.vec().end(), ov.begin() + (size_t)ka * d);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward_fn = [an, bn, ka, kb, d](NodeT<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < (size_t)ka * d; ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < (size_t)kb * d; ++i)
          bn->grad[i] += self.grad[(size_t)ka * d + i];
      }
    };
  }
  return out;
}

// Rows [r0, r1) of a {k,d} matrix.
template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1) {
  detail::require_rank2("slice_rows", x);
  int k = x.shape()[0], d = x.shape()[1];
  if (r0 < 0 || r1 > k || r0 >= r1)
    fail_shape("slice_rows: range [" + std::to_string(r0) + "," +
               std::to_string(r1) + ") invalid for " + shape_str(x.shape()));
  auto out = detail::op_result<T>({r1 - r0, d}, {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  std::copy(xv.begin() + (size_t)r0 * d, xv.begin() + (size_t)r1 * d, ov.begin());
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, r0, d](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[(size_t)r0 * d + i] += self.grad[i];
    };
  }
  return out;
}

// Channels [c0, c1) of a {H,W,C} map.
template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1) {
  if (x.shape().size() != 3)
    fail_shape("slice_channels: expected {H,W,C}, got " + shape_str(x.shape()));
  int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (c0 < 0 || c1 > c || c0 >= c1)
    fail_shape("slice_channels: range [" + std::to_string(c0) + "," +
               std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
  int cw = c1 - c0;
  auto out = detail::op_result<T>({h, w, cw}, {&x});
  const auto& xv = x.vec();
  auto& ov = out.vec();
  for (int p = 0; p < h * w; ++p)
    for (int j = 0; j < cw; ++j)
      ov[(size_t)p * cw + j] = xv[(size_t)p * c + c0 + j];
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, h, w, c, c0, cw](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int p = 0; p < h * w; ++p)
        for (int j = 0; j < cw; ++j)
          xn->grad[(size_t)p * c + c0 + j] += self.grad[(size_t)p * cw + j];
    };
  }
  return out;
}

// Single element of a {H,W,C} map as a scalar tensor.
template <typename T>
TensorT<T> select3(const TensorT<T>& x, int r, int c, int ch) {
  if (x.shape().size() != 3)
    fail_shape("select3: expected {H,W,C}, got " + shape_str(x.shape()));
  int h = x.shape()[0], w = x.shape()[1], nc = x.shape()[2];
  if (r < 0 || r >= h || c < 0 || c >= w || ch < 0 || ch >= nc)
    fail_shape("select3: index (" + std::to_string(r) + "," + std::to_string(c) +
               "," + std::to_string(ch) + ") out of bounds for " +
               shape_str(x.shape()));
  size_t idx = ((size_t)r * w + c) * nc + ch;
  auto out = detail::op_result<T>({1}, {&x});
  out.vec()[0] = x.vec()[idx];
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backward_fn = [xn, idx](NodeT<T>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      xn->grad[idx] += self.grad[0];
    };
  }
  return out;
}

// ---- convolution ----

// x {H,W,Cin}, w {kh,kw,Cin/groups,Cout} -> {H',W',Cout}. Zero padding.
// Cout must be divisible by groups and each output channel reads only its
// group's input slice; groups == Cin with Cout == Cin is depthwise.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride,
                  int pad, int groups = 1) {
  if (x.shape().size() != 3)
    fail_shape("conv2d: input must be {H,W,C}, got " + shape_str(x.shape()));
  if (w.shape().size() != 4)
    fail_shape("conv2d: weight must be {kh,kw,Cin/g,Cout}, got " +
               shape_str(w.shape()));
  if (stride < 1 || pad < 0 || groups < 1)
    fail_shape("conv2d: bad stride/pad/groups");
  int H = x.shape()[0], W = x.shape()[1], Cin = x.shape()[2];
  int kh = w.shape()[0], kw = w.shape()[1], wc = w.shape()[2], Cout = w.shape()[3];
  if (Cin % groups != 0 || Cout % groups != 0)
    fail_shape("conv2d: channels not divisible by groups, input " +
               shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  int cin_g = Cin / groups, cout_g = Cout / groups;
  if (wc != cin_g)
    fail_shape("conv2d: weight input slice " + shape_str(w.shape()) +
               " does not match input " + shape_str(x.shape()) + " with " +
               std::to_string(groups) + " groups");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    fail_shape("conv2d: kernel " + shape_str(w.shape()) +
               " does not fit input " + shape_str(x.shape()));
  auto out = detail::op_result<T>({Ho, Wo, Cout}, {&x, &w});
  const auto& xv = x.vec();
  const auto& wv = w.vec();
  auto& ov = out.vec();
  unsigned long long mults = 0;
  for (int oh = 0; oh < Ho; ++oh) {
    for (int ow = 0; ow < Wo; ++ow) {
      T* opix = &ov[((size_t)oh * Wo + ow) * Cout];
      for (int ky = 0; ky < kh; ++ky) {
        int ih = oh * stride + ky - pad;
        if (ih < 0 || ih >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int iw = ow * stride + kx - pad;
          if (iw < 0 || iw >= W) continue;
          const T* xpix = &xv[((size_t)ih * W + iw) * Cin];
          const T* wtap = &wv[(((size_t)ky * kw + kx) * cin_g) * Cout];
          for (int g = 0; g < groups; ++g) {
            for (int ci = 0; ci < cin_g; ++ci) {
              T xval = xpix[g * cin_g + ci];
              const T* wrow = wtap + (size_t)ci * Cout + g * cout_g;
              T* orow = opix + g * cout_g;
              for (int co = 0; co < cout_g; ++co) orow[co] += xval * wrow[co];
            }
          }
          mults += (unsigned long long)Cin * cout_g;
        }
      }
    }
  }
  count_mults(mults);
  if (out.requires_grad()) {
    auto xn = x.node(), wn = w.node();
    out.node()->backward_fn = [xn, wn, H, W, Cin, kh, kw, Cout, cin_g, cout_g,
                               groups, stride, pad, Ho, Wo](NodeT<T>& self) {
      bool dx = xn->requires_grad, dw = wn->requires_grad;
      if (dx) xn->ensure_grad();
      if (dw) wn->ensure_grad();
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          const T* gpix = &self.grad[((size_t)oh * Wo + ow) * Cout];
          for (int ky = 0; ky < kh; ++ky) {
            int ih = oh * stride + ky - pad;
            if (ih < 0 || ih >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int iw = ow * stride + kx - pad;
              if (iw < 0 || iw >= W) continue;
              size_t xbase = ((size_t)ih * W + iw) * Cin;
              size_t wbase = ((size_t)ky * kw + kx) * cin_g * Cout;
              for (int g = 0; g < groups; ++g) {
                for (int ci = 0; ci < cin_g; ++ci) {
                  size_t xi = xbase + g * cin_g + ci;
                  size_t wrow = wbase + (size_t)ci * Cout + g * cout_g;
                  const T* grow = gpix + g * cout_g;
                  if (dx) {
                    T acc = 0;
                    const T* wp = &wn->data[wrow];
                    for (int co = 0; co < cout_g; ++co) acc += grow[co] * wp[co];
                    xn->grad[xi] += acc;
                  }
                  if (dw) {
                    T xval = xn->data[xi];
                    T* wp = &wn->grad[wrow];
                    for (int co = 0; co < cout_g; ++co) wp[co] += xval * grow[co];
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// ---- layer norm ----

// Per-row normalization of {k,d} tokens to mean 0 / variance 1 over the
// feature axis, then affine gamma/beta. Fused backward.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps = T(1e-5)) {
  detail::require_rank2("layer_norm", x);
  int k = x.shape()[0], d = x.shape()[1];
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    fail_shape("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
               shape_str(beta.shape()) + " do not match token width of " +
               shape_str(x.shape()));
  auto out = detail::op_result<T>(x.shape(), {&x, &gamma, &beta});
  const auto& xv = x.vec();
  const auto& gv = gamma.vec();
  const auto& bv = beta.vec();
  auto& ov = out.vec();
  std::vector<T> xhat((size_t)k * d);
  std::vector<T> inv_std(k);
  for (int i = 0; i < k; ++i) {
    const T* row = &xv[(size_t)i * d];
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    T inv = T(1) / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int j = 0; j < d; ++j) {
      T h = (row[j] - mean) * inv;
      xhat[(size_t)i * d + j] = h;
      ov[(size_t)i * d + j] = h * gv[j] + bv[j];
    }
  }
  count_mults((unsigned long long)k * d * 3 + k);
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    out.node()->backward_fn = [xn, gn, bn, k, d, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](NodeT<T>& self) {
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j) bn->grad[j] += self.grad[(size_t)i * d + j];
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < d; ++j)
            gn->grad[j] += self.grad[(size_t)i * d + j] * xhat[(size_t)i * d + j];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int i = 0; i < k; ++i) {
          T mean_dh = 0, mean_dh_h = 0;
          for (int j = 0; j < d; ++j) {
            T dh = self.grad[(size_t)i * d + j] * gn->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[(size_t)i * d + j];
          }
          mean_dh /= d;
          mean_dh_h /= d;
          for (int j = 0; j < d; ++j) {
            T dh = self.grad[(size_t)i * d + j] * gn->data[j];
            xn->grad[(size_t)i * d + j] +=
                inv_std[i] * (dh - mean_dh - xhat[(size_t)i * d + j] * mean_dh_h);
          }
        }
      }
    };
  }
  return out;
}

}  // namespace smat
