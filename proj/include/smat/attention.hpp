#pragma once

// Separable token attention and the fusion variants built from it.
//
// The core computes, for k tokens of width d:
//   context  a[j] = sum_i softmax(q)[i] * K[i,j]
//   output   M[i,j] = a[j] * max(V[i,j], 0)
// which is linear in k: the production path performs exactly 2*k*d + d
// scalar multiplies (k*d weighting K, d normalizing the context, k*d
// modulating V). The softmax division is deferred to the d-wide context
// vector, which is algebraically identical to normalizing q first.
//
// Mixed attention runs the same layer over the concatenation of template
// and search tokens (template rows first), covering self and cross
// interaction in one pass. A standard softmax(Q K^T / sqrt(d)) V layer is
// kept as the quadratic-cost baseline.

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "smat/nn.hpp"
#include "smat/ops.hpp"
#include "smat/tensor.hpp"

namespace smat {

enum class FusionVariant { A, B, C, D };

inline char fusion_variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::A: return 'A';
    case FusionVariant::B: return 'B';
    case FusionVariant::C: return 'C';
    case FusionVariant::D: return 'D';
  }
  return '?';
}

inline FusionVariant parse_fusion_variant(const std::string& s) {
  if (s == "A" || s == "a") return FusionVariant::A;
  if (s == "B" || s == "b") return FusionVariant::B;
  if (s == "C" || s == "c") return FusionVariant::C;
  if (s == "D" || s == "d") return FusionVariant::D;
  throw std::invalid_argument("unknown fusion variant '" + s +
                              "' (expected A, B, C or D)");
}

// ---- attention traces ----
// When a sink is installed the core records its intermediates (with the
// literal normalize-first evaluation order, so the recorded identities are
// bit-exact). Used by the attention-map export and the trace invariants.

template <typename T>
struct AttentionTraceT {
  int k = 0, d = 0;
  std::vector<T> q;       // logits, k
  std::vector<T> q_soft;  // softmax(q), sums to 1
  std::vector<T> key;     // k*d
  std::vector<T> value;   // k*d
  std::vector<T> a;       // context, d
  std::vector<T> m;       // modulated output, k*d
  // geometry annotations filled by the caller that knows the token layout
  int split = 0;          // template rows when tokens are a concatenation
  int search_offset = 0;  // first search-aligned row of q_soft
  int search_rows = 0, search_cols = 0;
};

template <typename T>
struct AttnTraceSinkT {
  std::vector<AttentionTraceT<T>> traces;
};

namespace detail {
template <typename T>
AttnTraceSinkT<T>*& trace_slot() {
  thread_local AttnTraceSinkT<T>* s = nullptr;
  return s;
}
}  // namespace detail

template <typename T>
AttnTraceSinkT<T>* active_trace_sink() {
  return detail::trace_slot<T>();
}

template <typename T>
struct TraceScope {
  AttnTraceSinkT<T>* prev;
  AttnTraceSinkT<T> sink;
  TraceScope() : prev(detail::trace_slot<T>()) {
    detail::trace_slot<T>() = &sink;
  }
  ~TraceScope() { detail::trace_slot<T>() = prev; }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;
};

// ---- separable core ----

inline unsigned long long separable_core_mults(long long k, long long d) {
  return (unsigned long long)(2 * k * d + d);
}

namespace detail {

// Context vector over the rows that supply q and K. Deferred normalization:
// a = (sum_i exp(q_i - max) K_i) / sum_i exp(q_i - max).
template <typename T>
TensorT<T> separable_context(const TensorT<T>& q_logits, const TensorT<T>& key) {
  auto e = exp_shift(q_logits);
  auto s = sum_all(e);
  auto raw = col_sum(row_scale(key, e));
  return div_by_scalar(raw, s);
}

}  // namespace detail

// Q holds one logit per token ({k} or {k,1}); K and V are {k,d}.
template <typename T>
TensorT<T> separable_core(const TensorT<T>& q, const TensorT<T>& key,
                          const TensorT<T>& value) {
  detail::require_rank2("separable_core", key);
  detail::require_same_shape("separable_core", key, value);
  int k = key.shape()[0], d = key.shape()[1];
  if (numel(q.shape()) != k)
    fail_shape("separable_core: query " + shape_str(q.shape()) +
               " does not hold one logit per row of " + shape_str(key.shape()));
  auto q_flat = q.shape().size() == 1 ? q : reshape(q, {k});

  if (auto* sink = active_trace_sink<T>()) {
    // literal evaluation order so recorded identities hold bit-for-bit
    auto q_soft = softmax(q_flat, 0);
    auto a = col_sum(row_scale(key, q_soft));
    auto m = col_scale(relu(value), a);
    AttentionTraceT<T> tr;
    tr.k = k;
    tr.d = d;
    tr.q = q_flat.vec();
    tr.q_soft = q_soft.vec();
    tr.key = key.vec();
    tr.value = value.vec();
    tr.a = a.vec();
    tr.m = m.vec();
    sink->traces.push_back(std::move(tr));
    return m;
  }
  auto a = detail::separable_context(q_flat, key);
  return col_scale(relu(value), a);
}

// ---- separable attention layer ----
// pre-norm -> q/k/v projections -> core -> residual -> linear ffn with its
// own residual. Queries project to a single logit per token.

template <typename T>
struct SeparableAttentionParamsT {
  int d = 0;
  NormParamsT<T> norm;
  TensorT<T> wq, bq;      // {d,1}, {1}
  TensorT<T> wk, bk;      // {d,d}, {d}
  TensorT<T> wv, bv;      // {d,d}, {d}
  TensorT<T> wffn, bffn;  // {d,d}, {d}
};

template <typename T>
SeparableAttentionParamsT<T> make_separable_attention(int d,
                                                      std::mt19937_64& rng) {
  SeparableAttentionParamsT<T> p;
  p.d = d;
  p.norm = make_norm_params<T>(d);
  p.wq = init_params<T>({d, 1}, d, rng);
  p.bq = zeros_param<T>({1});
  p.wk = init_params<T>({d, d}, d, rng);
  p.bk = zeros_param<T>({d});
  p.wv = init_params<T>({d, d}, d, rng);
  p.bv = zeros_param<T>({d});
  p.wffn = init_params<T>({d, d}, d, rng);
  p.bffn = zeros_param<T>({d});
  return p;
}

template <typename T>
void register_separable_attention(ParamRegistry<T>& reg,
                                  const std::string& prefix,
                                  SeparableAttentionParamsT<T>& p,
                                  bool backbone) {
  register_norm(reg, prefix + ".norm", p.norm, backbone);
  reg.add(prefix + ".wq", p.wq, backbone);
  reg.add(prefix + ".bq", p.bq, backbone);
  reg.add(prefix + ".wk", p.wk, backbone);
  reg.add(prefix + ".bk", p.bk, backbone);
  reg.add(prefix + ".wv", p.wv, backbone);
  reg.add(prefix + ".bv", p.bv, backbone);
  reg.add(prefix + ".wffn", p.wffn, backbone);
  reg.add(prefix + ".bffn", p.bffn, backbone);
}

template <typename T>
TensorT<T> separable_layer_forward(const TensorT<T>& tokens,
                                   const SeparableAttentionParamsT<T>& p) {
  detail::require_rank2("separable_layer_forward", tokens);
  if (tokens.shape()[1] != p.d)
    fail_shape("separable_layer_forward: tokens " + shape_str(tokens.shape()) +
               " vs layer width " + std::to_string(p.d));
  int k = tokens.shape()[0];
  auto n = layer_norm(tokens, p.norm.gamma, p.norm.beta);
  auto q = reshape(add_row_broadcast(matmul(n, p.wq), p.bq), {k});
  auto key = add_row_broadcast(matmul(n, p.wk), p.bk);
  auto value = add_row_broadcast(matmul(n, p.wv), p.bv);
  auto h = add(tokens, separable_core(q, key, value));
  return add(h, add_row_broadcast(matmul(h, p.wffn), p.bffn));
}

// Cross direction: q and K come from kv_tokens (the attended region), V from
// q_tokens, the context modulates and residually updates q_tokens.
template <typename T>
TensorT<T> separable_cross_forward(const TensorT<T>& q_tokens,
                                   const TensorT<T>& kv_tokens,
                                   const SeparableAttentionParamsT<T>& p) {
  detail::require_rank2("separable_cross_forward", q_tokens);
  detail::require_rank2("separable_cross_forward", kv_tokens);
  if (q_tokens.shape()[1] != p.d || kv_tokens.shape()[1] != p.d)
    fail_shape("separable_cross_forward: token widths " +
               shape_str(q_tokens.shape()) + "/" + shape_str(kv_tokens.shape()) +
               " vs layer width " + std::to_string(p.d));
  int k_kv = kv_tokens.shape()[0];
  auto nq = layer_norm(q_tokens, p.norm.gamma, p.norm.beta);
  auto nkv = layer_norm(kv_tokens, p.norm.gamma, p.norm.beta);
  auto q = reshape(add_row_broadcast(matmul(nkv, p.wq), p.bq), {k_kv});
  auto key = add_row_broadcast(matmul(nkv, p.wk), p.bk);
  auto value = add_row_broadcast(matmul(nq, p.wv), p.bv);

  TensorT<T> m;
  if (auto* sink = active_trace_sink<T>()) {
    auto q_soft = softmax(q, 0);
    auto a = col_sum(row_scale(key, q_soft));
    m = col_scale(relu(value), a);
    AttentionTraceT<T> tr;
    tr.k = k_kv;
    tr.d = p.d;
    tr.q = q.vec();
    tr.q_soft = q_soft.vec();
    tr.key = key.vec();
    tr.value = value.vec();
    tr.a = a.vec();
    tr.m = m.vec();
    sink->traces.push_back(std::move(tr));
  } else {
    auto a = detail::separable_context(q, key);
    m = col_scale(relu(value), a);
  }
  auto h = add(q_tokens, m);
  return add(h, add_row_broadcast(matmul(h, p.wffn), p.bffn));
}

// Self and cross interaction in one pass over [template; search] rows.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> mixed_attention_forward(
    const TensorT<T>& z_tokens, const TensorT<T>& x_tokens,
    const SeparableAttentionParamsT<T>& p) {
  int kz = z_tokens.shape()[0];
  int kx = x_tokens.shape()[0];
  auto joint = separable_layer_forward(concat_rows(z_tokens, x_tokens), p);
  if (auto* sink = active_trace_sink<T>()) {
    if (!sink->traces.empty()) sink->traces.back().split = kz;
  }
  return {slice_rows(joint, 0, kz), slice_rows(joint, kz, kz + kx)};
}

// ---- standard attention baseline ----

template <typename T>
struct StandardAttentionParamsT {
  int d = 0;
  NormParamsT<T> norm;
  TensorT<T> wq, bq, wk, bk, wv, bv;  // {d,d}, {d}
  TensorT<T> wffn, bffn;
};

template <typename T>
StandardAttentionParamsT<T> make_standard_attention(int d,
                                                    std::mt19937_64& rng) {
  StandardAttentionParamsT<T> p;
  p.d = d;
  p.norm = make_norm_params<T>(d);
  p.wq = init_params<T>({d, d}, d, rng);
  p.bq = zeros_param<T>({d});
  p.wk = init_params<T>({d, d}, d, rng);
  p.bk = zeros_param<T>({d});
  p.wv = init_params<T>({d, d}, d, rng);
  p.bv = zeros_param<T>({d});
  p.wffn = init_params<T>({d, d}, d, rng);
  p.bffn = zeros_param<T>({d});
  return p;
}

// softmax(Q K^T / sqrt(d)) V with the same residual/ffn arrangement as the
// separable layer. Quadratic in token count.
template <typename T>
TensorT<T> standard_attention_forward(const TensorT<T>& tokens,
                                      const StandardAttentionParamsT<T>& p) {
  detail::require_rank2("standard_attention_forward", tokens);
  if (tokens.shape()[1] != p.d)
    fail_shape("standard_attention_forward: tokens " +
               shape_str(tokens.shape()) + " vs layer width " +
               std::to_string(p.d));
  auto n = layer_norm(tokens, p.norm.gamma, p.norm.beta);
  auto q = add_row_broadcast(matmul(n, p.wq), p.bq);
  auto key = add_row_broadcast(matmul(n, p.wk), p.bk);
  auto value = add_row_broadcast(matmul(n, p.wv), p.bv);
  auto scores = mul_scalar(matmul(q, transpose2(key)),
                           T(1) / std::sqrt((T)p.d));
  auto probs = softmax(scores, 1);
  auto h = add(tokens, matmul(probs, value));
  return add(h, add_row_broadcast(matmul(h, p.wffn), p.bffn));
}

// ---- fusion variants ----
// A: shared self-attention per region (template output independent of the
//    search region, so a tracker can compute it once per sequence).
// B: shared separable cross-attention, both directions.
// C: self-attention cascaded into cross-attention (separate layer params).
// D: mixed attention over the concatenation; the production default.

template <typename T>
struct FusionParamsT {
  FusionVariant variant = FusionVariant::D;
  int d = 0;
  SeparableAttentionParamsT<T> attn;
  std::optional<SeparableAttentionParamsT<T>> cross;  // variant C only
};

template <typename T>
FusionParamsT<T> make_fusion_params(FusionVariant v, int d,
                                    std::mt19937_64& rng) {
  FusionParamsT<T> p;
  p.variant = v;
  p.d = d;
  p.attn = make_separable_attention<T>(d, rng);
  if (v == FusionVariant::C)
    p.cross = make_separable_attention<T>(d, rng);
  return p;
}

template <typename T>
void register_fusion_params(ParamRegistry<T>& reg, const std::string& prefix,
                            FusionParamsT<T>& p, bool backbone) {
  register_separable_attention(reg, prefix + ".attn", p.attn, backbone);
  if (p.cross)
    register_separable_attention(reg, prefix + ".cross", *p.cross, backbone);
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> fusion_forward(const FusionParamsT<T>& p,
                                                 const TensorT<T>& z_tokens,
                                                 const TensorT<T>& x_tokens) {
  switch (p.variant) {
    case FusionVariant::A:
      return {separable_layer_forward(z_tokens, p.attn),
              separable_layer_forward(x_tokens, p.attn)};
    case FusionVariant::B:
      return {separable_cross_forward(z_tokens, x_tokens, p.attn),
              separable_cross_forward(x_tokens, z_tokens, p.attn)};
    case FusionVariant::C: {
      auto z1 = separable_layer_forward(z_tokens, p.attn);
      auto x1 = separable_layer_forward(x_tokens, p.attn);
      return {separable_cross_forward(z1, x1, *p.cross),
              separable_cross_forward(x1, z1, *p.cross)};
    }
    case FusionVariant::D:
      return mixed_attention_forward(z_tokens, x_tokens, p.attn);
  }
  fail_shape("fusion_forward: bad variant");
}

}  // namespace smat
