#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "smat/gradcheck.hpp"
#include "smat/model.hpp"

using namespace smat;

namespace {

template <typename T>
TensorT<T> random_map(int h, int w, int c, std::uint64_t seed, double lo = -1,
                      double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  auto t = TensorT<T>::zeros({h, w, c});
  for (auto& v : t.vec()) v = (T)u(rng);
  return t;
}

}  // namespace

TEST_CASE("pixelwise correlation matches a direct quadruple loop") {
  auto x = random_map<double>(5, 4, 3, 1);
  auto z = random_map<double>(2, 3, 3, 2);
  NoGradGuard ng;
  auto f = pixelwise_xcorr(x, z);
  REQUIRE(f.shape() == Shape{5, 4, 6});
  for (int h = 0; h < 5; ++h)
    for (int w = 0; w < 4; ++w)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
          double want = 0;
          for (int c = 0; c < 3; ++c)
            want += x.vec()[(h * 4 + w) * 3 + c] * z.vec()[(i * 3 + j) * 3 + c];
          double got = f.vec()[(h * 4 + w) * 6 + (i * 3 + j)];
          CHECK(std::abs(got - want) <= 1e-12);
        }
}

TEST_CASE("pixelwise correlation basis and zero cases") {
  NoGradGuard ng;
  auto x = random_map<double>(3, 3, 2, 3);
  auto z0 = TensorD::zeros({2, 2, 2});
  auto f0 = pixelwise_xcorr(x, z0);
  for (double v : f0.vec()) CHECK(v == 0.0);

  // 1x1 template selecting channel 0
  auto z = TensorD::from({1, 1, 2}, {1.0, 0.0});
  auto f = pixelwise_xcorr(x, z);
  REQUIRE(f.shape() == Shape{3, 3, 1});
  for (int i = 0; i < 9; ++i) CHECK(f.vec()[i] == x.vec()[i * 2]);

  CHECK_THROWS_AS(pixelwise_xcorr(x, TensorD::zeros({2, 2, 3})),
                  std::invalid_argument);
}

TEST_CASE("pixelwise correlation is bilinear at 32-bit") {
  NoGradGuard ng;
  auto x = random_map<float>(4, 4, 5, 4);
  auto z1 = random_map<float>(2, 2, 5, 5);
  auto z2 = random_map<float>(2, 2, 5, 6);
  auto lhs = pixelwise_xcorr(x, add(z1, z2));
  auto rhs = add(pixelwise_xcorr(x, z1), pixelwise_xcorr(x, z2));
  for (std::size_t i = 0; i < lhs.vec().size(); ++i)
    CHECK(std::abs(lhs.vec()[i] - rhs.vec()[i]) <= 1e-5f);
  auto sx = pixelwise_xcorr(mul_scalar(x, 3.0f), z1);
  auto xs = mul_scalar(pixelwise_xcorr(x, z1), 3.0f);
  for (std::size_t i = 0; i < sx.vec().size(); ++i)
    CHECK(std::abs(sx.vec()[i] - xs.vec()[i]) <= 1e-5f);
}

TEST_CASE("head carries the configured layer counts") {
  std::mt19937_64 rng(7);
  HeadConfig cfg;  // defaults
  auto p = make_head<double>(4, cfg, rng);
  CHECK(p.cls.size() == 2);
  CHECK(p.reg.size() == 4);
  CHECK(cfg.channels == 128);
}

TEST_CASE("head output shapes and ranges") {
  std::mt19937_64 rng(8);
  HeadConfig cfg;
  cfg.channels = 12;
  auto p = make_head<double>(4, cfg, rng);
  NoGradGuard ng;
  auto corr = random_map<double>(6, 6, 4, 9);
  auto out = head_forward(fuse_encoding(corr, p), p);
  CHECK(out.r.shape() == Shape{6, 6});
  CHECK(out.offset.shape() == Shape{6, 6, 2});
  CHECK(out.size.shape() == Shape{6, 6, 2});
  for (double v : out.r.vec()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (double v : out.size.vec()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("all-zero input gives spatially constant head maps") {
  std::mt19937_64 rng(10);
  HeadConfig cfg;
  cfg.channels = 10;
  auto p = make_head<double>(4, cfg, rng);
  NoGradGuard ng;
  auto out = head_forward(fuse_encoding(TensorD::zeros({5, 5, 4}), p), p);
  for (double v : out.r.vec()) CHECK(v == out.r.vec()[0]);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 25; ++i)
      CHECK(out.offset.vec()[i * 2 + c] == out.offset.vec()[c]);
}

TEST_CASE("decode_box arithmetic on a hand-made output") {
  HeadOutputT<double> out;
  auto r = TensorD::zeros({16, 16});
  r.vec()[8 * 16 + 8] = 0.9;
  out.r = r;
  out.offset = TensorD::zeros({16, 16, 2});
  out.size = TensorD::full({16, 16, 2}, 0.25);
  auto b = decode_box<double>(out, nullptr, 256);
  CHECK(b.x == doctest::Approx(96.0));
  CHECK(b.y == doctest::Approx(96.0));
  CHECK(b.w == doctest::Approx(64.0));
  CHECK(b.h == doctest::Approx(64.0));

  // positive rescale of the scores cannot move the argmax
  HeadOutputT<double> out2 = out;
  out2.r = mul_scalar(r, 7.5);
  auto b2 = decode_box<double>(out2, nullptr, 256);
  CHECK(b2.x == b.x);
  CHECK(b2.w == b.w);

  // all-ones window changes nothing
  auto ones = TensorD::full({16, 16}, 1.0);
  auto b3 = decode_box<double>(out, &ones, 256);
  CHECK(b3.x == b.x);
  CHECK(b3.y == b.y);

  // ties break to the smallest row-major index
  HeadOutputT<double> flat = out;
  flat.r = TensorD::full({16, 16}, 0.5);
  auto b4 = decode_box<double>(flat, nullptr, 256);
  CHECK(b4.cx() == doctest::Approx(0.0));
  CHECK(b4.cy() == doctest::Approx(0.0));

  // offsets shift the center within the cell
  HeadOutputT<double> off = out;
  auto o = TensorD::zeros({16, 16, 2});
  o.vec()[(8 * 16 + 8) * 2 + 0] = 0.5;  // x
  o.vec()[(8 * 16 + 8) * 2 + 1] = 0.25; // y
  off.offset = o;
  auto b5 = decode_box<double>(off, nullptr, 256);
  CHECK(b5.cx() == doctest::Approx((8.5 / 16) * 256));
  CHECK(b5.cy() == doctest::Approx((8.25 / 16) * 256));
}

TEST_CASE("decode_box rejects a mismatched window") {
  HeadOutputT<double> out;
  out.r = TensorD::zeros({4, 4});
  out.offset = TensorD::zeros({4, 4, 2});
  out.size = TensorD::full({4, 4, 2}, 0.5);
  auto wrong = TensorD::full({5, 5}, 1.0);
  CHECK_THROWS_AS(decode_box<double>(out, &wrong, 64), std::invalid_argument);
}

TEST_CASE("gradients flow through correlation and head") {
  std::mt19937_64 rng(11);
  HeadConfig cfg;
  cfg.channels = 6;
  cfg.cls_layers = 1;
  cfg.reg_layers = 1;
  auto p = make_head<double>(4, cfg, rng);
  auto x = random_map<double>(4, 4, 3, 12, 0.1, 1.0);
  auto z = random_map<double>(2, 2, 3, 13, 0.1, 1.0);

  ScalarFn<double> f = [&](const TensorD& t) {
    auto out = head_forward(fuse_encoding(pixelwise_xcorr(t, z), p), p);
    return add(sum_all(mul(out.r, out.r)),
               add(sum_all(out.offset), sum_all(out.size)));
  };
  CHECK(grad_check<double>(f, x, 1e-5) < 1e-4);

  ScalarFn<double> g = [&](const TensorD& t) {
    HeadParamsT<double> q = p;
    q.fuse_w = t;
    auto out = head_forward(fuse_encoding(pixelwise_xcorr(x, z), q), q);
    return add(sum_all(mul(out.r, out.r)),
               add(sum_all(out.offset), sum_all(out.size)));
  };
  CHECK(grad_check<double>(g, p.fuse_w, 1e-5) < 1e-4);
}

TEST_CASE("mini model forward produces consistent shapes") {
  auto m = make_track_model<double>(ModelConfig::mini());
  std::mt19937_64 rng(14);
  auto z = random_map<double>(32, 32, 3, 15, 0, 1);
  auto x = random_map<double>(64, 64, 3, 16, 0, 1);
  NoGradGuard ng;
  auto out = model_forward(m, z, x);
  CHECK(out.feats.z.shape() == Shape{2, 2, 24});
  CHECK(out.feats.x.shape() == Shape{4, 4, 24});
  CHECK(out.corr.shape() == Shape{4, 4, 4});
  CHECK(out.head.r.shape() == Shape{4, 4});
  CHECK(out.head.offset.shape() == Shape{4, 4, 2});
}

TEST_CASE("desk model forward meets the published geometry") {
  auto m = make_track_model<float>(ModelConfig::desk());
  std::mt19937_64 rng(17);
  auto z = random_map<float>(128, 128, 3, 18, 0, 1);
  auto x = random_map<float>(256, 256, 3, 19, 0, 1);
  NoGradGuard ng;
  auto out = model_forward(m, z, x);
  CHECK(out.feats.z.shape() == Shape{8, 8, 96});
  CHECK(out.feats.x.shape() == Shape{16, 16, 96});
  CHECK(out.corr.shape() == Shape{16, 16, 64});
  CHECK(out.head.r.shape() == Shape{16, 16});
  CHECK(out.head.offset.shape() == Shape{16, 16, 2});
  CHECK(out.head.size.shape() == Shape{16, 16, 2});
}

TEST_CASE("registry groups backbone and head parameters") {
  auto m = make_track_model<double>(ModelConfig::mini());
  auto reg = build_registry(m);
  long long bb = 0, hd = 0;
  for (const auto& e : reg.entries) {
    if (e.name.rfind("backbone.", 0) == 0) {
      CHECK(e.backbone);
      bb += e.tensor.size();
    } else {
      CHECK(e.name.rfind("head.", 0) == 0);
      CHECK(!e.backbone);
      hd += e.tensor.size();
    }
  }
  CHECK(bb > 0);
  CHECK(hd > 0);
  CHECK(bb + hd == reg.total_count());
}

TEST_CASE("standard attention baseline leaves no search-aligned traces") {
  auto cfg = ModelConfig::mini();
  cfg.attention = AttentionKind::Standard;
  auto m = make_track_model<double>(cfg);
  std::mt19937_64 rng(20);
  auto z = random_map<double>(32, 32, 3, 21, 0, 1);
  auto x = random_map<double>(64, 64, 3, 22, 0, 1);
  NoGradGuard ng;
  TraceScope<double> scope;
  auto out = model_forward(m, z, x);
  CHECK(out.head.r.shape() == Shape{4, 4});
  // the head's separable layers still trace; the swapped-out backbone
  // fusion must not contribute any search-aligned entries
  CHECK(scope.sink.traces.size() == 6);  // 2 cls + 4 reg layers
  for (const auto& tr : scope.sink.traces) CHECK(tr.search_rows == 0);
}
