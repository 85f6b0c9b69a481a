#pragma once

// Full tracking model: shared backbone -> pixel-wise correlation -> learned
// 1x1 lift -> prediction head.

#include <cstdint>
#include <random>

#include "smat/backbone.hpp"
#include "smat/head.hpp"

namespace smat {

enum class AttentionKind { Separable, Standard };

inline const char* attention_kind_name(AttentionKind k) {
  return k == AttentionKind::Separable ? "separable" : "standard";
}

inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "separable") return AttentionKind::Separable;
  if (s == "standard") return AttentionKind::Standard;
  throw std::invalid_argument("unknown attention kind '" + s +
                              "' (expected separable or standard)");
}

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::desk();
  HeadConfig head;
  FusionVariant variant = FusionVariant::D;
  AttentionKind attention = AttentionKind::Separable;
  std::uint64_t seed = 1;
  int preset_code = 0;  // 0 desk, 1 mini, 2 full

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig mini() {
    ModelConfig c;
    c.backbone = BackboneConfig::mini();
    c.head.channels = 24;
    c.preset_code = 1;
    return c;
  }

  static ModelConfig full() {
    ModelConfig c;
    c.backbone = BackboneConfig::full();
    c.head.channels = 256;
    c.preset_code = 2;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "mini") return mini();
    if (name == "full") return full();
    throw std::invalid_argument("unknown preset '" + name +
                                "' (expected desk, mini, or full)");
  }

  const char* preset_name() const {
    return preset_code == 1 ? "mini" : preset_code == 2 ? "full" : "desk";
  }

  // template cells at the final stride feed the correlation lift
  int corr_channels() const {
    int side = backbone.template_side / 16;
    return side * side;
  }
};

template <typename T>
struct TrackModelT {
  ModelConfig cfg;
  BackboneParamsT<T> backbone;
  HeadParamsT<T> head;
};

template <typename T>
TrackModelT<T> make_track_model(const ModelConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  TrackModelT<T> m;
  m.cfg = cfg;
  m.backbone = make_backbone<T>(cfg.backbone, cfg.variant, rng,
                                cfg.attention == AttentionKind::Standard);
  m.head = make_head<T>(cfg.corr_channels(), cfg.head, rng);
  return m;
}

template <typename T>
ParamRegistry<T> build_registry(TrackModelT<T>& m) {
  ParamRegistry<T> reg;
  register_backbone(reg, "backbone", m.backbone);
  register_head(reg, "head", m.head);
  return reg;
}

template <typename T>
struct ModelOutputT {
  TemplateSearchFeaturesT<T> feats;
  TensorT<T> corr;
  HeadOutputT<T> head;
};

template <typename T>
ModelOutputT<T> model_forward(const TrackModelT<T>& m, const TensorT<T>& z_img,
                              const TensorT<T>& x_img) {
  ModelOutputT<T> out;
  out.feats = backbone_forward(m.backbone, z_img, x_img);
  out.corr = pixelwise_xcorr(out.feats.x, out.feats.z);
  out.head = head_forward(fuse_encoding(out.corr, m.head), m.head);
  return out;
}

// Per-frame inference against frozen template features (variants A-C).
template <typename T>
HeadOutputT<T> model_forward_search(const TrackModelT<T>& m,
                                    const TemplateCacheT<T>& cache,
                                    const TensorT<T>& x_img) {
  auto x = backbone_forward_search(m.backbone, cache, x_img);
  auto corr = pixelwise_xcorr(x, cache.z_feat);
  return head_forward(fuse_encoding(corr, m.head), m.head);
}

}  // namespace smat
