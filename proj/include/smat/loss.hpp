#pragma once

// Training objective: weighted focal loss on the score map plus l1 and
// generalized-IoU losses on the box decoded at the groundtruth cell,
// combined as total = focal + 5*l1 + 2*giou.

#include <cmath>

#include "smat/geometry.hpp"
#include "smat/head.hpp"
#include "smat/ops.hpp"
#include "smat/tensor.hpp"

namespace smat {

struct LossWeights {
  double l1 = 5.0;
  double iou = 2.0;
};

// y[r,c] = exp(-((r-r0)^2 + (c-c0)^2) / (2 sigma^2)); the center cell is
// exactly 1.
template <typename T>
TensorT<T> gaussian_target_map(int r0, int c0, int side, double sigma) {
  if (r0 < 0 || r0 >= side || c0 < 0 || c0 >= side)
    fail_shape("gaussian_target_map: center (" + std::to_string(r0) + "," +
               std::to_string(c0) + ") outside a " + std::to_string(side) +
               "-cell map");
  if (sigma <= 0) fail_shape("gaussian_target_map: sigma must be positive");
  auto y = TensorT<T>::zeros({side, side});
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      double d2 = double(r - r0) * (r - r0) + double(c - c0) * (c - c0);
      y.vec()[r * side + c] = (T)std::exp(-d2 / (2.0 * sigma * sigma));
    }
  y.vec()[r0 * side + c0] = T(1);
  return y;
}

// Per-positive-normalized focal loss with alpha = 2, beta = 4:
//   positives (y == 1):  (1-R)^2 * -log R
//   elsewhere:           (1-y)^4 * R^2 * -log(1-R)
// summed and divided by the positive count; R clamped to [1e-6, 1-1e-6].
template <typename T>
TensorT<T> focal_loss(const TensorT<T>& r, const TensorT<T>& y) {
  if (r.shape() != y.shape())
    fail_shape("focal_loss: prediction " + shape_str(r.shape()) +
               " vs target " + shape_str(y.shape()));
  int n_pos = 0;
  auto pos = TensorT<T>::zeros(r.shape());
  auto neg_w = TensorT<T>::zeros(r.shape());
  for (size_t i = 0; i < y.vec().size(); ++i) {
    if (y.vec()[i] == T(1)) {
      pos.vec()[i] = T(1);
      ++n_pos;
    } else {
      T u = T(1) - y.vec()[i];
      neg_w.vec()[i] = u * u * u * u;
    }
  }
  if (n_pos == 0) fail_shape("focal_loss: target has no positive cell");
  auto rc = clamp(r, (T)1e-6, (T)(1.0 - 1e-6));
  auto one_m = rsub_scalar(T(1), rc);
  auto pos_term = mul(pos, mul(mul(one_m, one_m),
                               mul_scalar(log_elem(rc), T(-1))));
  auto neg_term = mul(neg_w, mul(mul(rc, rc),
                                 mul_scalar(log_elem(one_m), T(-1))));
  return mul_scalar(sum_all(add(pos_term, neg_term)), T(1.0 / n_pos));
}

// Differentiable box in normalized coordinates, all entries {1} tensors.
template <typename T>
struct BoxTensorT {
  TensorT<T> x, y, w, h;
};

template <typename T>
BoxTensorT<T> box_tensor_from(const BoundingBox& b) {
  BoxTensorT<T> t;
  t.x = TensorT<T>::scalar((T)b.x);
  t.y = TensorT<T>::scalar((T)b.y);
  t.w = TensorT<T>::scalar((T)b.w);
  t.h = TensorT<T>::scalar((T)b.h);
  return t;
}

// Box decoded at one cell of the head output, in [0,1] coordinates.
template <typename T>
BoxTensorT<T> decode_box_at_cell(const HeadOutputT<T>& out, int r, int c) {
  int hh = out.r.shape()[0], ww = out.r.shape()[1];
  auto off_x = select3(out.offset, r, c, 0);
  auto off_y = select3(out.offset, r, c, 1);
  BoxTensorT<T> b;
  b.w = select3(out.size, r, c, 0);
  b.h = select3(out.size, r, c, 1);
  auto cx = mul_scalar(add_scalar(off_x, (T)c), T(1.0 / ww));
  auto cy = mul_scalar(add_scalar(off_y, (T)r), T(1.0 / hh));
  b.x = sub(cx, mul_scalar(b.w, T(0.5)));
  b.y = sub(cy, mul_scalar(b.h, T(0.5)));
  return b;
}

// mean |delta| over the four (x, y, w, h) coordinates
template <typename T>
TensorT<T> l1_loss(const BoxTensorT<T>& a, const BoxTensorT<T>& b) {
  auto s = add(add(abs_elem(sub(a.x, b.x)), abs_elem(sub(a.y, b.y))),
               add(abs_elem(sub(a.w, b.w)), abs_elem(sub(a.h, b.h))));
  return mul_scalar(sum_all(s), T(0.25));
}

// 1 - GIoU with GIoU = IoU - (enclosure - union)/enclosure.
template <typename T>
TensorT<T> giou_loss(const BoxTensorT<T>& a, const BoxTensorT<T>& b) {
  for (const auto* box : {&a, &b})
    if (box->w.vec()[0] <= T(0) || box->h.vec()[0] <= T(0))
      fail_shape("giou_loss: boxes need positive sizes");
  auto ax2 = add(a.x, a.w), ay2 = add(a.y, a.h);
  auto bx2 = add(b.x, b.w), by2 = add(b.y, b.h);
  auto iw = relu(sub(minimum(ax2, bx2), maximum(a.x, b.x)));
  auto ih = relu(sub(minimum(ay2, by2), maximum(a.y, b.y)));
  auto inter = mul(iw, ih);
  auto uni = sub(add(mul(a.w, a.h), mul(b.w, b.h)), inter);
  auto ew = sub(maximum(ax2, bx2), minimum(a.x, b.x));
  auto eh = sub(maximum(ay2, by2), minimum(a.y, b.y));
  auto enc = mul(ew, eh);
  auto g = sub(div(inter, uni), div(sub(enc, uni), enc));
  return sum_all(rsub_scalar(T(1), g));
}

template <typename T>
struct LossBreakdownT {
  TensorT<T> focal, l1, iou, total;
};

// total = focal + (w.l1 * l1 + w.iou * iou); the stored total is computed
// with exactly this association so the decomposition identity is bitwise.
template <typename T>
LossBreakdownT<T> total_loss(const TensorT<T>& focal, const TensorT<T>& l1,
                             const TensorT<T>& iou, const LossWeights& w) {
  LossBreakdownT<T> out;
  out.focal = focal;
  out.l1 = l1;
  out.iou = iou;
  out.total = add(focal, add(mul_scalar(l1, (T)w.l1), mul_scalar(iou, (T)w.iou)));
  return out;
}

// Target construction + all three terms for one template/search pair.
// gt_box is in search-crop pixels; map cells follow the head output grid.
template <typename T>
LossBreakdownT<T> pair_loss(const HeadOutputT<T>& out, const BoundingBox& gt_box,
                            double search_side, const LossWeights& w) {
  int hh = out.r.shape()[0], ww = out.r.shape()[1];
  if (hh != ww)
    fail_shape("pair_loss: expected a square score map, got " +
               shape_str(out.r.shape()));
  BoundingBox gt_n{gt_box.x / search_side, gt_box.y / search_side,
                   gt_box.w / search_side, gt_box.h / search_side};
  int r0 = std::clamp((int)std::floor(gt_n.cy() * hh), 0, hh - 1);
  int c0 = std::clamp((int)std::floor(gt_n.cx() * ww), 0, ww - 1);
  double sigma = std::max(0.5, std::min(gt_n.w * ww, gt_n.h * hh) / 6.0);
  auto target = gaussian_target_map<T>(r0, c0, hh, sigma);
  auto focal = focal_loss(out.r, target);
  auto pred = decode_box_at_cell(out, r0, c0);
  auto gt_t = box_tensor_from<T>(gt_n);
  auto l1 = l1_loss(pred, gt_t);
  auto gl = giou_loss(pred, gt_t);
  return total_loss(focal, l1, gl, w);
}

}  // namespace smat
