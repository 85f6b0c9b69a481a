#pragma once

// Hybrid CNN+ViT backbone shared between the template and search streams.
//
// Layout: stem conv (stride 2) -> IR stage -> IR stage -> two ViT stages.
// Each ViT stage is a stride-2 inverted-residual downsample followed by a
// vit block (shared 3x3 conv -> shared 1x1 C->d -> tokenize -> fusion ->
// untokenize -> 1x1 d->C, residual around the whole block). The product of
// all strides is 16, so 128/256 inputs land at 8x8 / 16x16 and the two
// fusion stages see the search region at 32x32 and 16x16.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "smat/attention.hpp"
#include "smat/nn.hpp"
#include "smat/ops.hpp"
#include "smat/tensor.hpp"

namespace smat {

enum class StageKind { IR, ViT };

struct StageSpec {
  StageKind kind = StageKind::IR;
  int stride = 1;      // total downsample applied by the stage
  int channels = 0;    // output channels
  int attn_width = 0;  // token width d (ViT stages only)
};

struct BackboneConfig {
  int stem_stride = 2;
  int stem_channels = 16;
  std::vector<StageSpec> stages;
  int template_side = 128;
  int search_side = 256;

  static BackboneConfig desk() {
    BackboneConfig c;
    c.stem_stride = 2;
    c.stem_channels = 16;
    c.stages = {{StageKind::IR, 1, 24, 0},
                {StageKind::IR, 2, 48, 0},
                {StageKind::ViT, 2, 64, 32},
                {StageKind::ViT, 2, 96, 48}};
    c.template_side = 128;
    c.search_side = 256;
    return c;
  }

  // width plan used for parameter-count reporting
  static BackboneConfig full() {
    BackboneConfig c;
    c.stem_stride = 2;
    c.stem_channels = 32;
    c.stages = {{StageKind::IR, 1, 64, 0},
                {StageKind::IR, 2, 128, 0},
                {StageKind::ViT, 2, 256, 128},
                {StageKind::ViT, 2, 384, 192}};
    c.template_side = 128;
    c.search_side = 256;
    return c;
  }

  // narrow widths and small inputs for fast tests
  static BackboneConfig mini() {
    BackboneConfig c;
    c.stem_stride = 2;
    c.stem_channels = 8;
    c.stages = {{StageKind::IR, 1, 12, 0},
                {StageKind::IR, 2, 16, 0},
                {StageKind::ViT, 2, 16, 8},
                {StageKind::ViT, 2, 24, 12}};
    c.template_side = 32;
    c.search_side = 64;
    return c;
  }
};

// Enforced on every load, not just the presets.
inline void validate_backbone_config(const BackboneConfig& cfg) {
  int total = cfg.stem_stride;
  int ir = 0, vit = 0;
  std::vector<int> vit_strides;
  for (const auto& s : cfg.stages) {
    if (s.stride < 1) throw std::invalid_argument("backbone config: stage stride must be >= 1");
    if (s.channels < 1) throw std::invalid_argument("backbone config: stage channels must be >= 1");
    total *= s.stride;
    if (s.kind == StageKind::ViT) {
      ++vit;
      vit_strides.push_back(total);
      if (s.attn_width < 1)
        throw std::invalid_argument("backbone config: ViT stage needs attn width");
    } else {
      ++ir;
      if (s.attn_width != 0)
        throw std::invalid_argument("backbone config: IR stage must not set attn width");
    }
  }
  if (total != 16)
    throw std::invalid_argument("backbone config: stride product must be 16, got " +
                                std::to_string(total));
  if (ir != 2 || vit != 2)
    throw std::invalid_argument("backbone config: expected 2 IR and 2 ViT stages, got " +
                                std::to_string(ir) + " IR / " + std::to_string(vit) + " ViT");
  if (vit_strides != std::vector<int>{8, 16})
    throw std::invalid_argument(
        "backbone config: ViT stages must sit at cumulative strides 8 and 16");
  if (cfg.template_side % 16 != 0 || cfg.search_side % 16 != 0)
    throw std::invalid_argument("backbone config: input sides must be divisible by 16");
}

// ---- tokenization ----
// token order is row-major over (h, w); a map cell (h, w) is token h*W + w.

template <typename T>
TensorT<T> tokenize(const TensorT<T>& fmap) {
  if (fmap.shape().size() != 3)
    fail_shape("tokenize: expected {H,W,C}, got " + shape_str(fmap.shape()));
  int h = fmap.shape()[0], w = fmap.shape()[1], c = fmap.shape()[2];
  return reshape(fmap, {h * w, c});
}

template <typename T>
TensorT<T> untokenize(const TensorT<T>& tokens, int h, int w) {
  if (tokens.shape().size() != 2)
    fail_shape("untokenize: expected {k,d}, got " + shape_str(tokens.shape()));
  if (tokens.shape()[0] != h * w)
    fail_shape("untokenize: " + std::to_string(tokens.shape()[0]) +
               " tokens cannot fill a " + std::to_string(h) + "x" +
               std::to_string(w) + " map");
  return reshape(tokens, {h, w, tokens.shape()[1]});
}

// ---- parameters ----

template <typename T>
struct VitBlockParamsT {
  int channels = 0, d = 0;
  TensorT<T> conv3_w, conv3_b;    // shared 3x3, C->C
  TensorT<T> proj_w, proj_b;      // 1x1, C->d
  FusionParamsT<T> fusion;
  // quadratic-baseline ablation: replaces the separable fusion with a
  // standard attention layer over the concatenated token streams
  std::optional<StandardAttentionParamsT<T>> std_attn;
  TensorT<T> reproj_w, reproj_b;  // 1x1, d->C
};

template <typename T>
VitBlockParamsT<T> make_vit_block(int channels, int d, FusionVariant variant,
                                  std::mt19937_64& rng,
                                  bool standard_attention = false) {
  VitBlockParamsT<T> p;
  p.channels = channels;
  p.d = d;
  p.conv3_w = init_params<T>({3, 3, channels, channels}, 9 * channels, rng);
  p.conv3_b = zeros_param<T>({channels});
  p.proj_w = init_params<T>({1, 1, channels, d}, channels, rng);
  p.proj_b = zeros_param<T>({d});
  p.fusion = make_fusion_params<T>(variant, d, rng);
  if (standard_attention) p.std_attn = make_standard_attention<T>(d, rng);
  p.reproj_w = init_params<T>({1, 1, d, channels}, d, rng);
  p.reproj_b = zeros_param<T>({channels});
  return p;
}

template <typename T>
void register_vit_block(ParamRegistry<T>& reg, const std::string& prefix,
                        VitBlockParamsT<T>& p, bool backbone) {
  reg.add(prefix + ".conv3_w", p.conv3_w, backbone);
  reg.add(prefix + ".conv3_b", p.conv3_b, backbone);
  reg.add(prefix + ".proj_w", p.proj_w, backbone);
  reg.add(prefix + ".proj_b", p.proj_b, backbone);
  if (p.std_attn) {
    auto& s = *p.std_attn;
    register_norm(reg, prefix + ".std.norm", s.norm, backbone);
    reg.add(prefix + ".std.wq", s.wq, backbone);
    reg.add(prefix + ".std.bq", s.bq, backbone);
    reg.add(prefix + ".std.wk", s.wk, backbone);
    reg.add(prefix + ".std.bk", s.bk, backbone);
    reg.add(prefix + ".std.wv", s.wv, backbone);
    reg.add(prefix + ".std.bv", s.bv, backbone);
    reg.add(prefix + ".std.wffn", s.wffn, backbone);
    reg.add(prefix + ".std.bffn", s.bffn, backbone);
  } else {
    register_fusion_params(reg, prefix + ".fusion", p.fusion, backbone);
  }
  reg.add(prefix + ".reproj_w", p.reproj_w, backbone);
  reg.add(prefix + ".reproj_b", p.reproj_b, backbone);
}

template <typename T>
struct BackboneStageParamsT {
  StageSpec spec;
  InvertedResidualT<T> ir;  // the stage body, or the downsample into a vit block
  std::optional<VitBlockParamsT<T>> vit;
};

template <typename T>
struct BackboneParamsT {
  BackboneConfig cfg;
  FusionVariant variant = FusionVariant::D;
  TensorT<T> stem_w, stem_b;  // 3x3, 3->stem_channels
  std::vector<BackboneStageParamsT<T>> stages;
};

template <typename T>
BackboneParamsT<T> make_backbone(const BackboneConfig& cfg, FusionVariant variant,
                                 std::mt19937_64& rng,
                                 bool standard_attention = false) {
  validate_backbone_config(cfg);
  BackboneParamsT<T> p;
  p.cfg = cfg;
  p.variant = variant;
  p.stem_w = init_params<T>({3, 3, 3, cfg.stem_channels}, 27, rng);
  p.stem_b = zeros_param<T>({cfg.stem_channels});
  int c = cfg.stem_channels;
  for (const auto& s : cfg.stages) {
    BackboneStageParamsT<T> st;
    st.spec = s;
    st.ir = make_inverted_residual<T>(c, s.channels, s.stride, 2, rng);
    if (s.kind == StageKind::ViT)
      st.vit = make_vit_block<T>(s.channels, s.attn_width, variant, rng,
                                 standard_attention);
    p.stages.push_back(std::move(st));
    c = s.channels;
  }
  return p;
}

template <typename T>
void register_backbone(ParamRegistry<T>& reg, const std::string& prefix,
                       BackboneParamsT<T>& p) {
  reg.add(prefix + ".stem_w", p.stem_w, true);
  reg.add(prefix + ".stem_b", p.stem_b, true);
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    std::string sp = prefix + ".stage" + std::to_string(i);
    register_inverted_residual(reg, sp + ".ir", p.stages[i].ir, true);
    if (p.stages[i].vit) register_vit_block(reg, sp + ".vit", *p.stages[i].vit, true);
  }
}

// ---- forward ----

template <typename T>
struct TemplateSearchFeaturesT {
  TensorT<T> z, x;  // final stage outputs, {Hz,Wz,C} / {Hx,Wx,C}
  int channels = 0;
};

namespace detail {

template <typename T>
TensorT<T> vit_conv_in(const TensorT<T>& fmap, const VitBlockParamsT<T>& p) {
  auto h = relu(add_channel_bias(conv2d(fmap, p.conv3_w, 1, 1), p.conv3_b));
  return add_channel_bias(conv2d(h, p.proj_w, 1, 0), p.proj_b);
}

template <typename T>
TensorT<T> vit_conv_out(const TensorT<T>& tokens, int h, int w,
                        const TensorT<T>& residual, const VitBlockParamsT<T>& p) {
  auto fmap = untokenize(tokens, h, w);
  auto out = add_channel_bias(conv2d(fmap, p.reproj_w, 1, 0), p.reproj_b);
  return add(residual, out);
}

// Geometry labels for traces produced by one fusion call, so exports can
// pick out search-aligned query maps. Entries with search_rows == 0 have
// their query weights over template tokens only.
template <typename T>
void label_trace(std::size_t idx, bool search_q, int offset, int hx, int wx) {
  auto* sink = active_trace_sink<T>();
  if (!sink || idx >= sink->traces.size()) return;
  auto& tr = sink->traces[idx];
  if (search_q) {
    tr.search_offset = offset;
    tr.search_rows = hx;
    tr.search_cols = wx;
  } else {
    tr.search_rows = tr.search_cols = 0;
  }
}

template <typename T>
void annotate_traces(std::size_t first, FusionVariant v, int kz, int hx, int wx) {
  if (!active_trace_sink<T>()) return;
  auto label = [&](std::size_t idx, bool search_q, int offset) {
    label_trace<T>(idx, search_q, offset, hx, wx);
  };
  switch (v) {
    case FusionVariant::A:   // self(z), self(x)
      label(first, false, 0);
      label(first + 1, true, 0);
      break;
    case FusionVariant::B:   // q over x, then q over z
      label(first, true, 0);
      label(first + 1, false, 0);
      break;
    case FusionVariant::C:   // self(z), self(x), q over x, q over z
      label(first, false, 0);
      label(first + 1, true, 0);
      label(first + 2, true, 0);
      label(first + 3, false, 0);
      break;
    case FusionVariant::D:   // joint pass, search rows after the split
      label(first, true, kz);
      break;
  }
}

}  // namespace detail

template <typename T>
std::pair<TensorT<T>, TensorT<T>> vit_block_forward(const TensorT<T>& z,
                                                    const TensorT<T>& x,
                                                    const VitBlockParamsT<T>& p) {
  if (z.shape()[2] != p.channels || x.shape()[2] != p.channels)
    fail_shape("vit_block_forward: inputs " + shape_str(z.shape()) + "/" +
               shape_str(x.shape()) + " vs block channels " +
               std::to_string(p.channels));
  int hz = z.shape()[0], wz = z.shape()[1];
  int hx = x.shape()[0], wx = x.shape()[1];
  auto zt = tokenize(detail::vit_conv_in(z, p));
  auto xt = tokenize(detail::vit_conv_in(x, p));
  TensorT<T> zf, xf;
  if (p.std_attn) {
    int kz = hz * wz;
    auto joint = standard_attention_forward(concat_rows(zt, xt), *p.std_attn);
    zf = slice_rows(joint, 0, kz);
    xf = slice_rows(joint, kz, kz + hx * wx);
  } else {
    std::size_t first = 0;
    if (auto* sink = active_trace_sink<T>()) first = sink->traces.size();
    std::tie(zf, xf) = fusion_forward(p.fusion, zt, xt);
    detail::annotate_traces<T>(first, p.fusion.variant, hz * wz, hx, wx);
  }
  return {detail::vit_conv_out(zf, hz, wz, z, p),
          detail::vit_conv_out(xf, hx, wx, x, p)};
}

template <typename T>
TemplateSearchFeaturesT<T> backbone_forward(const BackboneParamsT<T>& p,
                                            const TensorT<T>& z_img,
                                            const TensorT<T>& x_img) {
  for (const auto* img : {&z_img, &x_img}) {
    if (img->shape().size() != 3 || img->shape()[2] != 3 ||
        img->shape()[0] % 16 != 0 || img->shape()[1] % 16 != 0)
      fail_shape("backbone_forward: input must be {H,W,3} with sides divisible "
                 "by 16, got " + shape_str(img->shape()));
  }
  auto z = relu(add_channel_bias(conv2d(z_img, p.stem_w, p.cfg.stem_stride, 1),
                                 p.stem_b));
  auto x = relu(add_channel_bias(conv2d(x_img, p.stem_w, p.cfg.stem_stride, 1),
                                 p.stem_b));
  for (const auto& st : p.stages) {
    z = inverted_residual_forward(z, st.ir);
    x = inverted_residual_forward(x, st.ir);
    if (st.vit) std::tie(z, x) = vit_block_forward(z, x, *st.vit);
  }
  TemplateSearchFeaturesT<T> out;
  out.z = z;
  out.x = x;
  out.channels = z.shape()[2];
  return out;
}

// ---- frozen-template inference path ----
// Variants A-C compute template features once per sequence. The cached
// per-stage fusion inputs let the per-frame search forward run without the
// template image; under B and C the template-side fusion at init runs
// against the template itself (no search exists yet), which is the frozen
// approximation the two-stream protocol implies. Variant A needs no
// approximation (its streams never interact).

template <typename T>
struct TemplateCacheT {
  TensorT<T> z_feat;                      // final template features
  std::vector<TensorT<T>> fusion_tokens;  // per ViT stage, what the search
                                          // side consumes (unused under A)
};

template <typename T>
TemplateCacheT<T> backbone_template_init(const BackboneParamsT<T>& p,
                                         const TensorT<T>& z_img) {
  if (p.variant == FusionVariant::D)
    fail_shape("backbone_template_init: the joint variant retains the template "
               "image and recomputes features per frame; no frozen cache exists");
  TemplateCacheT<T> cache;
  auto z = relu(add_channel_bias(conv2d(z_img, p.stem_w, p.cfg.stem_stride, 1),
                                 p.stem_b));
  for (const auto& st : p.stages) {
    z = inverted_residual_forward(z, st.ir);
    if (!st.vit) continue;
    const auto& vb = *st.vit;
    if (vb.std_attn)
      fail_shape("backbone_template_init: the standard-attention baseline "
                 "tracks with the joint forward only");
    int h = z.shape()[0], w = z.shape()[1];
    auto zt = tokenize(detail::vit_conv_in(z, vb));
    TensorT<T> zf;
    switch (p.variant) {
      case FusionVariant::A:
        zf = separable_layer_forward(zt, vb.fusion.attn);
        cache.fusion_tokens.push_back(TensorT<T>());
        break;
      case FusionVariant::B:
        cache.fusion_tokens.push_back(zt);
        zf = separable_cross_forward(zt, zt, vb.fusion.attn);
        break;
      case FusionVariant::C: {
        auto z1 = separable_layer_forward(zt, vb.fusion.attn);
        cache.fusion_tokens.push_back(z1);
        zf = separable_cross_forward(z1, z1, *vb.fusion.cross);
        break;
      }
      case FusionVariant::D:
        break;  // rejected above
    }
    z = detail::vit_conv_out(zf, h, w, z, vb);
  }
  cache.z_feat = z;
  return cache;
}

template <typename T>
TensorT<T> backbone_forward_search(const BackboneParamsT<T>& p,
                                   const TemplateCacheT<T>& cache,
                                   const TensorT<T>& x_img) {
  auto x = relu(add_channel_bias(conv2d(x_img, p.stem_w, p.cfg.stem_stride, 1),
                                 p.stem_b));
  std::size_t vit_idx = 0;
  for (const auto& st : p.stages) {
    x = inverted_residual_forward(x, st.ir);
    if (!st.vit) continue;
    const auto& vb = *st.vit;
    int h = x.shape()[0], w = x.shape()[1];
    auto xt = tokenize(detail::vit_conv_in(x, vb));
    std::size_t first = 0;
    if (auto* sink = active_trace_sink<T>()) first = sink->traces.size();
    TensorT<T> xf;
    switch (p.variant) {
      case FusionVariant::A:
        xf = separable_layer_forward(xt, vb.fusion.attn);
        detail::label_trace<T>(first, true, 0, h, w);
        break;
      case FusionVariant::B:
        // query weights land on the cached template tokens
        xf = separable_cross_forward(xt, cache.fusion_tokens[vit_idx],
                                     vb.fusion.attn);
        detail::label_trace<T>(first, false, 0, h, w);
        break;
      case FusionVariant::C: {
        auto x1 = separable_layer_forward(xt, vb.fusion.attn);
        detail::label_trace<T>(first, true, 0, h, w);
        xf = separable_cross_forward(x1, cache.fusion_tokens[vit_idx],
                                     *vb.fusion.cross);
        detail::label_trace<T>(first + 1, false, 0, h, w);
        break;
      }
      case FusionVariant::D:
        fail_shape("backbone_forward_search: variant D tracks with the joint "
                   "forward, not the frozen-template path");
    }
    x = detail::vit_conv_out(xf, h, w, x, vb);
    ++vit_idx;
  }
  return x;
}

}  // namespace smat
