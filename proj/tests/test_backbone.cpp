#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "smat/backbone.hpp"

using namespace smat;

namespace {

template <typename T>
TensorT<T> random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto t = TensorT<T>::zeros({h, w, 3});
  for (auto& v : t.vec()) v = (T)u(rng);
  return t;
}

}  // namespace

TEST_CASE("preset configs validate") {
  CHECK_NOTHROW(validate_backbone_config(BackboneConfig::desk()));
  CHECK_NOTHROW(validate_backbone_config(BackboneConfig::full()));
  CHECK_NOTHROW(validate_backbone_config(BackboneConfig::mini()));
}

TEST_CASE("config validation rejects broken stride plans") {
  auto c = BackboneConfig::desk();
  c.stages[1].stride = 1;  // stride product 8
  CHECK_THROWS_AS(validate_backbone_config(c), std::invalid_argument);

  c = BackboneConfig::desk();
  c.stages[0].stride = 2;  // product 32 and ViT stages shifted to 16/32
  CHECK_THROWS_AS(validate_backbone_config(c), std::invalid_argument);

  c = BackboneConfig::desk();
  c.stages.push_back({StageKind::IR, 1, 96, 0});  // 3 IR stages
  CHECK_THROWS_AS(validate_backbone_config(c), std::invalid_argument);

  c = BackboneConfig::desk();
  c.stages[0].attn_width = 8;  // IR stage with attention width
  CHECK_THROWS_AS(validate_backbone_config(c), std::invalid_argument);

  c = BackboneConfig::desk();
  c.template_side = 100;  // not divisible by 16
  CHECK_THROWS_AS(validate_backbone_config(c), std::invalid_argument);
}

TEST_CASE("tokenize flattens row-major and round-trips") {
  auto m = TensorD::from({2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  auto t = tokenize(m);
  CHECK(t.shape() == Shape{4, 3});
  // token order (0,0), (0,1), (1,0), (1,1)
  CHECK(t.vec() == m.vec());
  auto back = untokenize(t, 2, 2);
  CHECK(back.shape() == m.shape());
  CHECK(back.vec() == m.vec());
  CHECK_THROWS_AS(untokenize(t, 3, 2), std::invalid_argument);
}

TEST_CASE("mini backbone produces stride-16 feature maps") {
  std::mt19937_64 rng(7);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::D, rng);
  auto z = random_image<double>(32, 32, 1);
  auto x = random_image<double>(64, 64, 2);
  NoGradGuard ng;
  auto f = backbone_forward(p, z, x);
  CHECK(f.z.shape() == Shape{2, 2, 24});
  CHECK(f.x.shape() == Shape{4, 4, 24});
  CHECK(f.channels == 24);
}

TEST_CASE("desk backbone maps 128/256 inputs to 8x8 and 16x16") {
  std::mt19937_64 rng(8);
  auto p = make_backbone<float>(BackboneConfig::desk(), FusionVariant::D, rng);
  auto z = random_image<float>(128, 128, 3);
  auto x = random_image<float>(256, 256, 4);
  NoGradGuard ng;
  auto f = backbone_forward(p, z, x);
  CHECK(f.z.shape() == Shape{8, 8, 96});
  CHECK(f.x.shape() == Shape{16, 16, 96});
}

TEST_CASE("backbone rejects bad input geometry") {
  std::mt19937_64 rng(9);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::D, rng);
  auto bad = TensorD::zeros({30, 30, 3});
  auto ok = random_image<double>(32, 32, 5);
  CHECK_THROWS_AS(backbone_forward(p, bad, ok), std::invalid_argument);
  auto bad_c = TensorD::zeros({32, 32, 4});
  CHECK_THROWS_AS(backbone_forward(p, bad_c, ok), std::invalid_argument);
}

TEST_CASE("identical inputs share weights and outputs") {
  auto cfg = BackboneConfig::mini();
  cfg.template_side = 64;  // symmetric geometry
  std::mt19937_64 rng(10);
  auto p = make_backbone<double>(cfg, FusionVariant::A, rng);
  auto img = random_image<double>(64, 64, 6);
  NoGradGuard ng;
  auto f = backbone_forward(p, img, img);
  CHECK(f.z.vec() == f.x.vec());
}

TEST_CASE("vit block with equal inputs is symmetric under the joint variant") {
  std::mt19937_64 rng(11);
  auto vb = make_vit_block<double>(8, 4, FusionVariant::D, rng);
  auto f = TensorD::zeros({4, 4, 8});
  std::mt19937_64 rng2(12);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : f.vec()) v = u(rng2);
  NoGradGuard ng;
  auto [a, b] = vit_block_forward(f, f, vb);
  CHECK(a.vec() == b.vec());
}

TEST_CASE("vit block with zeroed transformer reduces to conv projections") {
  std::mt19937_64 rng(13);
  auto vb = make_vit_block<double>(6, 4, FusionVariant::D, rng);
  auto& at = vb.fusion.attn;
  for (auto* t : {&at.wq, &at.bq, &at.wk, &at.bk, &at.wv, &at.bv, &at.wffn,
                  &at.bffn})
    std::fill(t->vec().begin(), t->vec().end(), 0.0);
  auto f = TensorD::zeros({4, 4, 6});
  std::mt19937_64 rng2(14);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : f.vec()) v = u(rng2);
  NoGradGuard ng;
  auto [a, b] = vit_block_forward(f, f, vb);
  // conv-only composition: residual + reproject(project(conv3(f)))
  auto h = relu(add_channel_bias(conv2d(f, vb.conv3_w, 1, 1), vb.conv3_b));
  auto proj = add_channel_bias(conv2d(h, vb.proj_w, 1, 0), vb.proj_b);
  auto ref = add(f, add_channel_bias(conv2d(proj, vb.reproj_w, 1, 0), vb.reproj_b));
  CHECK(a.vec() == ref.vec());
  CHECK(b.vec() == ref.vec());
  for (double v : a.vec()) CHECK(std::isfinite(v));
}

TEST_CASE("search output ignores the template under the self variant") {
  std::mt19937_64 rng(15);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::A, rng);
  auto x = random_image<double>(64, 64, 16);
  NoGradGuard ng;
  auto f1 = backbone_forward(p, random_image<double>(32, 32, 17), x);
  auto f2 = backbone_forward(p, random_image<double>(32, 32, 18), x);
  CHECK(f1.x.vec() == f2.x.vec());
  CHECK(f1.z.vec() != f2.z.vec());
}

TEST_CASE("joint variant records search-aligned traces at both vit stages") {
  std::mt19937_64 rng(19);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::D, rng);
  auto z = random_image<double>(32, 32, 20);
  auto x = random_image<double>(64, 64, 21);
  NoGradGuard ng;
  TraceScope<double> scope;
  backbone_forward(p, z, x);
  REQUIRE(scope.sink.traces.size() == 2);
  // stage at stride 8: template 4x4, search 8x8
  const auto& t1 = scope.sink.traces[0];
  CHECK(t1.k == 16 + 64);
  CHECK(t1.split == 16);
  CHECK(t1.search_offset == 16);
  CHECK(t1.search_rows == 8);
  CHECK(t1.search_cols == 8);
  // stage at stride 16: template 2x2, search 4x4
  const auto& t2 = scope.sink.traces[1];
  CHECK(t2.k == 4 + 16);
  CHECK(t2.split == 4);
  CHECK(t2.search_offset == 4);
  CHECK(t2.search_rows == 4);
  CHECK(t2.search_cols == 4);
}

TEST_CASE("frozen template path is exact for the self variant") {
  std::mt19937_64 rng(22);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::A, rng);
  auto z = random_image<double>(32, 32, 23);
  auto x = random_image<double>(64, 64, 24);
  NoGradGuard ng;
  auto full = backbone_forward(p, z, x);
  auto cache = backbone_template_init(p, z);
  CHECK(cache.z_feat.vec() == full.z.vec());
  auto xs = backbone_forward_search(p, cache, x);
  CHECK(xs.vec() == full.x.vec());
}

TEST_CASE("frozen template path runs for the cross variants") {
  for (auto v : {FusionVariant::B, FusionVariant::C}) {
    std::mt19937_64 rng(25);
    auto p = make_backbone<double>(BackboneConfig::mini(), v, rng);
    auto z = random_image<double>(32, 32, 26);
    auto x = random_image<double>(64, 64, 27);
    NoGradGuard ng;
    auto cache = backbone_template_init(p, z);
    CHECK(cache.z_feat.shape() == Shape{2, 2, 24});
    auto xs1 = backbone_forward_search(p, cache, x);
    auto xs2 = backbone_forward_search(p, cache, x);
    CHECK(xs1.shape() == Shape{4, 4, 24});
    CHECK(xs1.vec() == xs2.vec());
  }
  std::mt19937_64 rng(28);
  auto pd = make_backbone<double>(BackboneConfig::mini(), FusionVariant::D, rng);
  auto z = random_image<double>(32, 32, 29);
  NoGradGuard ng;
  CHECK_THROWS_AS(backbone_template_init(pd, z), std::invalid_argument);
}

TEST_CASE("gradient reaches every backbone parameter") {
  std::mt19937_64 rng(31);
  auto p = make_backbone<double>(BackboneConfig::mini(), FusionVariant::D, rng);
  ParamRegistry<double> reg;
  register_backbone(reg, "backbone", p);
  CHECK(reg.total_count() > 0);
  auto z = random_image<double>(32, 32, 32);
  auto x = random_image<double>(64, 64, 33);
  auto f = backbone_forward(p, z, x);
  auto loss = add(sum_all(mul(f.z, f.z)), sum_all(mul(f.x, f.x)));
  loss.backward();
  for (const auto& e : reg.entries) {
    bool any = false;
    for (double g : e.tensor.grad())
      if (g != 0.0) any = true;
    INFO("parameter ", e.name);
    CHECK(any);
  }
}
