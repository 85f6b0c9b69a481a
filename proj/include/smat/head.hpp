#pragma once

// Correlation fusion and the two-branch prediction head.
//
// The search/template features are fused by parameter-free pixel-wise
// cross-correlation: every template position acts as a 1x1 kernel over the
// search map, giving one response channel per template cell. A learned 1x1
// conv lifts those channels to the head width. The head runs a shared 3x3
// conv, then a classification branch (2 separable self-attention layers ->
// 3x3 conv -> sigmoid score map) and a regression branch (4 layers -> 3x3
// conv -> sigmoid offset and size maps).

#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "smat/attention.hpp"
#include "smat/backbone.hpp"
#include "smat/geometry.hpp"
#include "smat/nn.hpp"
#include "smat/ops.hpp"

namespace smat {

// x {Hx,Wx,C} correlated with z {Hz,Wz,C} -> {Hx,Wx,Hz*Wz}:
//   out[h,w, i*Wz+j] = sum_c x[h,w,c] * z[i,j,c]
template <typename T>
TensorT<T> pixelwise_xcorr(const TensorT<T>& x, const TensorT<T>& z) {
  if (x.shape().size() != 3 || z.shape().size() != 3)
    fail_shape("pixelwise_xcorr: expected {H,W,C} maps, got " +
               shape_str(x.shape()) + " and " + shape_str(z.shape()));
  if (x.shape()[2] != z.shape()[2])
    fail_shape("pixelwise_xcorr: channel mismatch " + shape_str(x.shape()) +
               " vs " + shape_str(z.shape()));
  int hx = x.shape()[0], wx = x.shape()[1];
  auto corr = matmul(tokenize(x), transpose2(tokenize(z)));
  return reshape(corr, {hx, wx, z.shape()[0] * z.shape()[1]});
}

struct HeadConfig {
  int channels = 128;  // width after the 1x1 lift
  int cls_layers = 2;
  int reg_layers = 4;
};

template <typename T>
struct HeadParamsT {
  HeadConfig cfg;
  int corr_channels = 0;  // template cells feeding the 1x1 lift
  TensorT<T> fuse_w, fuse_b;      // 1x1, corr_channels -> channels
  TensorT<T> shared_w, shared_b;  // 3x3, channels -> channels
  std::vector<SeparableAttentionParamsT<T>> cls;
  TensorT<T> cls_out_w, cls_out_b;  // 3x3, channels -> 1
  std::vector<SeparableAttentionParamsT<T>> reg;
  TensorT<T> reg_out_w, reg_out_b;  // 3x3, channels -> 4
};

template <typename T>
HeadParamsT<T> make_head(int corr_channels, const HeadConfig& cfg,
                         std::mt19937_64& rng) {
  if (cfg.cls_layers < 1 || cfg.reg_layers < 1 || cfg.channels < 1)
    fail_shape("make_head: bad head config");
  HeadParamsT<T> p;
  p.cfg = cfg;
  p.corr_channels = corr_channels;
  int ch = cfg.channels;
  p.fuse_w = init_params<T>({1, 1, corr_channels, ch}, corr_channels, rng);
  p.fuse_b = zeros_param<T>({ch});
  p.shared_w = init_params<T>({3, 3, ch, ch}, 9 * ch, rng);
  p.shared_b = zeros_param<T>({ch});
  for (int i = 0; i < cfg.cls_layers; ++i)
    p.cls.push_back(make_separable_attention<T>(ch, rng));
  p.cls_out_w = init_params<T>({3, 3, ch, 1}, 9 * ch, rng);
  p.cls_out_b = zeros_param<T>({1});
  for (int i = 0; i < cfg.reg_layers; ++i)
    p.reg.push_back(make_separable_attention<T>(ch, rng));
  p.reg_out_w = init_params<T>({3, 3, ch, 4}, 9 * ch, rng);
  p.reg_out_b = zeros_param<T>({4});
  return p;
}

template <typename T>
void register_head(ParamRegistry<T>& reg, const std::string& prefix,
                   HeadParamsT<T>& p) {
  reg.add(prefix + ".fuse_w", p.fuse_w, false);
  reg.add(prefix + ".fuse_b", p.fuse_b, false);
  reg.add(prefix + ".shared_w", p.shared_w, false);
  reg.add(prefix + ".shared_b", p.shared_b, false);
  for (std::size_t i = 0; i < p.cls.size(); ++i)
    register_separable_attention(reg, prefix + ".cls" + std::to_string(i),
                                 p.cls[i], false);
  reg.add(prefix + ".cls_out_w", p.cls_out_w, false);
  reg.add(prefix + ".cls_out_b", p.cls_out_b, false);
  for (std::size_t i = 0; i < p.reg.size(); ++i)
    register_separable_attention(reg, prefix + ".reg" + std::to_string(i),
                                 p.reg[i], false);
  reg.add(prefix + ".reg_out_w", p.reg_out_w, false);
  reg.add(prefix + ".reg_out_b", p.reg_out_b, false);
}

// learned 1x1 lift from correlation channels to the head width
template <typename T>
TensorT<T> fuse_encoding(const TensorT<T>& corr, const HeadParamsT<T>& p) {
  if (corr.shape().size() != 3 || corr.shape()[2] != p.corr_channels)
    fail_shape("fuse_encoding: correlation map " + shape_str(corr.shape()) +
               " vs expected " + std::to_string(p.corr_channels) + " channels");
  return add_channel_bias(conv2d(corr, p.fuse_w, 1, 0), p.fuse_b);
}

template <typename T>
struct HeadOutputT {
  TensorT<T> r;       // {H,W} score map in (0,1)
  TensorT<T> offset;  // {H,W,2}: x then y sub-cell offsets
  TensorT<T> size;    // {H,W,2}: normalized w then h
};

template <typename T>
HeadOutputT<T> head_forward(const TensorT<T>& fused, const HeadParamsT<T>& p) {
  if (fused.shape().size() != 3 || fused.shape()[2] != p.cfg.channels)
    fail_shape("head_forward: fused encoding " + shape_str(fused.shape()) +
               " vs head width " + std::to_string(p.cfg.channels));
  int h = fused.shape()[0], w = fused.shape()[1];
  auto shared = relu(add_channel_bias(conv2d(fused, p.shared_w, 1, 1),
                                      p.shared_b));

  auto ct = tokenize(shared);
  for (const auto& layer : p.cls) ct = separable_layer_forward(ct, layer);
  auto cmap = untokenize(ct, h, w);
  auto r = sigmoid(add_channel_bias(conv2d(cmap, p.cls_out_w, 1, 1),
                                    p.cls_out_b));

  auto rt = tokenize(shared);
  for (const auto& layer : p.reg) rt = separable_layer_forward(rt, layer);
  auto rmap = untokenize(rt, h, w);
  auto box4 = sigmoid(add_channel_bias(conv2d(rmap, p.reg_out_w, 1, 1),
                                       p.reg_out_b));

  HeadOutputT<T> out;
  out.r = reshape(r, {h, w});
  out.offset = slice_channels(box4, 0, 2);
  out.size = slice_channels(box4, 2, 4);
  return out;
}

// Argmax decode of the head maps into a box in search-crop pixels. The
// window, when given, multiplies the score map first; ties resolve to the
// smallest row-major index.
template <typename T>
BoundingBox decode_box(const HeadOutputT<T>& out, const TensorT<T>* window,
                       double search_side, double window_influence = 0.3) {
  NoGradGuard ng;
  const auto& r = out.r;
  if (r.shape().size() != 2)
    fail_shape("decode_box: score map must be {H,W}, got " + shape_str(r.shape()));
  int h = r.shape()[0], w = r.shape()[1];
  if (window && (*window).shape() != r.shape())
    fail_shape("decode_box: window " + shape_str(window->shape()) +
               " does not match score map " + shape_str(r.shape()));
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < h * w; ++i) {
    double v = (double)r.vec()[i];
    // convex blend rather than a hard product: a multiplicative window zeroes
    // the border ring outright, so an edge target could never be selected
    if (window)
      v = (1.0 - window_influence) * v +
          window_influence * (double)window->vec()[i];
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  int br = best / w, bc = best % w;
  double off_x = (double)out.offset.vec()[(br * w + bc) * 2 + 0];
  double off_y = (double)out.offset.vec()[(br * w + bc) * 2 + 1];
  double size_w = (double)out.size.vec()[(br * w + bc) * 2 + 0];
  double size_h = (double)out.size.vec()[(br * w + bc) * 2 + 1];
  double cx = (bc + off_x) / w * search_side;
  double cy = (br + off_y) / h * search_side;
  BoundingBox b;
  b.w = size_w * search_side;
  b.h = size_h * search_side;
  b.x = cx - b.w / 2;
  b.y = cy - b.h / 2;
  return b;
}

}  // namespace smat
