#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "smat/checkpoint.hpp"
#include "smat/gradcheck.hpp"
#include "smat/loss.hpp"
#include "smat/optim.hpp"
#include "smat/train.hpp"

using namespace smat;

// ---- objective terms ----

TEST_CASE("focal loss hand values") {
  // one positive cell predicted at 0.5: (1-0.5)^2 * -log(0.5)
  auto y1 = TensorD::from({1}, {1.0});
  auto r1 = TensorD::from({1}, {0.5});
  CHECK(focal_loss(r1, y1).vec()[0] ==
        doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));

  // soft neighbor y=0.5 at the same prediction adds (0.5)^4 * 0.25 * log 2
  auto y2 = TensorD::from({1, 2}, {1.0, 0.5});
  auto r2 = TensorD::from({1, 2}, {0.5, 0.5});
  double pos = 0.25 * std::log(2.0);
  double soft = 0.0625 * 0.25 * std::log(2.0);
  CHECK(focal_loss(r2, y2).vec()[0] ==
        doctest::Approx(pos + soft).epsilon(1e-12));

  // normalization is per positive: two identical positives keep the value
  auto y3 = TensorD::from({1, 2}, {1.0, 1.0});
  auto r3 = TensorD::from({1, 2}, {0.5, 0.5});
  CHECK(focal_loss(r3, y3).vec()[0] == doctest::Approx(pos).epsilon(1e-12));

  // a perfect positive costs (almost) nothing
  auto rp = TensorD::from({1}, {1.0});
  CHECK(focal_loss(rp, y1).vec()[0] < 1e-10);

  auto y0 = TensorD::from({1}, {0.5});
  CHECK_THROWS(focal_loss(r1, y0));  // no positive cell
  CHECK_THROWS(focal_loss(TensorD::from({2}, {0.5, 0.5}), y1));
}

TEST_CASE("focal loss gradient") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  auto y = gaussian_target_map<double>(1, 2, 4, 0.9);
  auto r = TensorD::zeros({4, 4});
  for (auto& v : r.vec()) v = u(rng);
  r.set_requires_grad(true);
  auto fn = [&](const TensorD& t) { return focal_loss(t, y); };
  CHECK(grad_check<double>(fn, r, 1e-6) < 1e-6);
}

TEST_CASE("gaussian target map shape and decay") {
  auto y = gaussian_target_map<double>(2, 2, 5, 1.0);
  CHECK(y.vec()[2 * 5 + 2] == 1.0);  // center exactly one
  CHECK(y.vec()[2 * 5 + 3] == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(y.vec()[0] == doctest::Approx(std::exp(-4.0)).epsilon(1e-12));
  // symmetric around the center
  CHECK(y.vec()[2 * 5 + 1] == y.vec()[2 * 5 + 3]);
  CHECK(y.vec()[1 * 5 + 2] == y.vec()[3 * 5 + 2]);
  // the sigma floor keeps tiny targets from collapsing to a delta
  auto yf = gaussian_target_map<double>(1, 1, 3, 0.5);
  CHECK(yf.vec()[1 * 3 + 2] == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
  CHECK_THROWS(gaussian_target_map<double>(5, 0, 3, 1.0));
  CHECK_THROWS(gaussian_target_map<double>(0, 0, 3, 0.0));
}

TEST_CASE("l1 term averages the four coordinate gaps") {
  auto a = box_tensor_from<double>({0.2, 0.3, 0.4, 0.5});
  auto b = box_tensor_from<double>({0.3, 0.4, 0.5, 0.6});
  CHECK(l1_loss(a, b).vec()[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(l1_loss(a, a).vec()[0] == 0.0);
}

TEST_CASE("giou loss matches the closed-form overlap case") {
  // unit-ish boxes offset diagonally: inter 1, union 7, enclosure 9
  auto a = box_tensor_from<double>({0, 0, 2, 2});
  auto b = box_tensor_from<double>({1, 1, 2, 2});
  double expect = 1.0 / 7.0 - 2.0 / 9.0;  // = -5/63
  CHECK(expect == doctest::Approx(-5.0 / 63.0).epsilon(1e-12));
  CHECK(giou_loss(a, b).vec()[0] ==
        doctest::Approx(1.0 + 5.0 / 63.0).epsilon(1e-12));
  // perfect agreement scores zero loss
  CHECK(giou_loss(a, a).vec()[0] == doctest::Approx(0.0).epsilon(1e-12));
  auto bad = box_tensor_from<double>({0, 0, -1, 1});
  CHECK_THROWS(giou_loss(a, bad));
}

TEST_CASE("giou loss gradient through box decode") {
  HeadOutputT<double> out;
  out.r = TensorD::from({1, 1}, {0.5});
  out.offset = TensorD::from({1, 1, 2}, {0.4, 0.6});
  out.size = TensorD::from({1, 1, 2}, {0.5, 0.4});
  out.offset.set_requires_grad(true);
  auto gt = box_tensor_from<double>({0.2, 0.2, 0.5, 0.5});
  auto fn = [&](const TensorD& t) {
    HeadOutputT<double> o;
    o.r = out.r;
    o.offset = t;
    o.size = out.size;
    return giou_loss(decode_box_at_cell(o, 0, 0), gt);
  };
  CHECK(grad_check<double>(fn, out.offset, 1e-6) < 1e-6);
}

TEST_CASE("total loss composes the documented weighting") {
  auto f = TensorD::scalar(0.2);
  auto l = TensorD::scalar(0.1);
  auto g = TensorD::scalar(0.5);
  LossWeights w;
  auto bd = total_loss(f, l, g, w);
  CHECK(bd.total.vec()[0] == doctest::Approx(1.7).epsilon(1e-12));
  // decomposition is bitwise: recompute with the same association
  double again =
      bd.focal.vec()[0] + (5.0 * bd.l1.vec()[0] + 2.0 * bd.iou.vec()[0]);
  CHECK(bd.total.vec()[0] == again);
}

TEST_CASE("pair loss builds its target at the groundtruth cell") {
  HeadOutputT<double> out;
  out.r = TensorD::zeros({4, 4});
  for (auto& v : out.r.vec()) v = 0.5;
  out.offset = TensorD::zeros({4, 4, 2});
  for (auto& v : out.offset.vec()) v = 0.5;
  out.size = TensorD::zeros({4, 4, 2});
  for (auto& v : out.size.vec()) v = 0.25;
  LossWeights w;
  // a 16 px box centered at (40, 40) in a 64 px crop lands in cell (2,2)
  BoundingBox gt{32, 32, 16, 16};
  auto bd = pair_loss(out, gt, 64.0, w);
  CHECK(bd.total.vec()[0] > 0.0);
  // the decoded cell-(2,2) box is exactly the gt: l1 and giou vanish
  CHECK(bd.l1.vec()[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(bd.iou.vec()[0] == doctest::Approx(0.0).epsilon(1e-12));
  // non-square maps are rejected
  HeadOutputT<double> ns;
  ns.r = TensorD::zeros({2, 4});
  ns.offset = TensorD::zeros({2, 4, 2});
  ns.size = TensorD::zeros({2, 4, 2});
  CHECK_THROWS(pair_loss(ns, gt, 64.0, w));
}

// ---- optimizer ----

namespace {

// param with a constant gradient g injected through a one-op graph
TensorT<float> with_grad(float value, float g) {
  auto p = TensorT<float>::scalar(value);
  p.set_requires_grad(true);
  mul_scalar(sum_all(p), g).backward();
  return p;
}

}  // namespace

TEST_CASE("adamw first step moves by about lr in the gradient direction") {
  for (float g : {0.3f, -0.7f}) {
    ParamRegistry<float> reg;
    reg.add("w", with_grad(1.0f, g), false);
    auto st = make_adamw_state(reg);
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0;
    adamw_step(reg, st, cfg);
    float expect = 1.0f - 1e-2f * (g > 0 ? 1.0f : -1.0f);
    CHECK(reg.entries[0].tensor.vec()[0] ==
          doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("adamw decay is decoupled from the gradient path") {
  ParamRegistry<float> reg;
  auto p = TensorT<float>::scalar(1.0f);
  p.set_requires_grad(true);
  reg.add("w", p, false);  // no backward ran: gradient is all zeros
  auto st = make_adamw_state(reg);
  AdamWConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.1;
  adamw_step(reg, st, cfg);
  CHECK(reg.entries[0].tensor.vec()[0] ==
        doctest::Approx(1.0 - 1e-2 * 0.1).epsilon(1e-7));

  cfg.weight_decay = 0;
  adamw_step(reg, st, cfg);  // nothing left to move it
  CHECK(reg.entries[0].tensor.vec()[0] ==
        doctest::Approx(1.0 - 1e-2 * 0.1).epsilon(1e-7));
}

TEST_CASE("backbone parameters train at a tenth of the rate") {
  ParamRegistry<float> reg;
  reg.add("backbone.w", with_grad(1.0f, 0.5f), true);
  reg.add("head.w", with_grad(1.0f, 0.5f), false);
  auto st = make_adamw_state(reg);
  AdamWConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0;
  adamw_step(reg, st, cfg);
  double d_backbone = 1.0 - reg.entries[0].tensor.vec()[0];
  double d_head = 1.0 - reg.entries[1].tensor.vec()[0];
  CHECK(d_backbone == doctest::Approx(0.1 * d_head).epsilon(1e-5));
}

TEST_CASE("adamw rejects a mismatched state") {
  ParamRegistry<float> reg;
  reg.add("w", with_grad(1.0f, 0.1f), false);
  ParamRegistry<float> other;
  auto st = make_adamw_state(other);
  AdamWConfig cfg;
  CHECK_THROWS(adamw_step(reg, st, cfg));
}

// ---- schedule ----

TEST_CASE("learning rate drops to a tenth for the final fifth of training") {
  TrainConfig cfg;
  cfg.epochs = 20;
  CHECK(lr_scale_at(cfg, 0) == 1.0);
  CHECK(lr_scale_at(cfg, 15) == 1.0);
  CHECK(lr_scale_at(cfg, 16) == doctest::Approx(0.1));
  CHECK(lr_scale_at(cfg, 18) == doctest::Approx(0.1));  // 0.9 * epochs
  cfg.epochs = 10;
  CHECK(lr_scale_at(cfg, 7) == 1.0);
  CHECK(lr_scale_at(cfg, 8) == doctest::Approx(0.1));
  CHECK(lr_scale_at(cfg, 9) == doctest::Approx(0.1));
}

// ---- synthetic data ----

TEST_CASE("synthetic sequences are seeded and clipped") {
  SynthConfig sc;
  sc.seed = 9;
  sc.n_frames = 6;
  sc.frame_side = 96;
  sc.target_size = 28;
  sc.motion = 6.0;
  sc.scale_jitter = 0.02;
  auto a = synth_sequence(sc);
  auto b = synth_sequence(sc);
  REQUIRE(a.frames.size() == 6);
  REQUIRE(a.boxes.size() == 6);
  for (size_t i = 0; i < a.frames.size(); ++i) {
    CHECK(a.frames[i].data == b.frames[i].data);  // bitwise repeatable
    CHECK(a.boxes[i].x == b.boxes[i].x);
    CHECK(a.boxes[i].x >= 0.0);
    CHECK(a.boxes[i].y >= 0.0);
    CHECK(a.boxes[i].x2() <= 96.0);
    CHECK(a.boxes[i].y2() <= 96.0);
    CHECK(a.boxes[i].w >= 1.0);
  }
  SynthConfig other = sc;
  other.seed = 10;
  auto c = synth_sequence(other);
  CHECK(c.frames[1].data != a.frames[1].data);
}

TEST_CASE("zero motion freezes the groundtruth track") {
  SynthConfig sc;
  sc.seed = 4;
  sc.n_frames = 5;
  sc.frame_side = 80;
  sc.target_size = 24;
  sc.motion = 0.0;
  sc.scale_jitter = 0.0;
  auto seq = synth_sequence(sc);
  for (const auto& b : seq.boxes) {
    CHECK(b.x == seq.boxes[0].x);
    CHECK(b.y == seq.boxes[0].y);
    CHECK(b.w == seq.boxes[0].w);
    CHECK(b.h == seq.boxes[0].h);
  }
}

// ---- pair sampling ----

TEST_CASE("sampled pairs follow the crop geometry") {
  SynthConfig sc;
  sc.seed = 12;
  sc.n_frames = 6;
  sc.frame_side = 96;
  sc.target_size = 30;
  sc.motion = 2.0;
  auto seq = synth_sequence(sc);
  ModelConfig mc = ModelConfig::mini();
  TrainConfig cfg;
  cfg.flip = false;
  cfg.center_jitter = 0.0;
  cfg.scale_jitter_lo = cfg.scale_jitter_hi = 1.0;
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    auto p = sample_pair(seq, mc, cfg, rng);
    CHECK(p.z_img.shape() == Shape{32, 32, 3});
    CHECK(p.x_img.shape() == Shape{64, 64, 3});
    // without jitter the search crop centers on the target
    CHECK(p.gt.cx() == doctest::Approx(32.0).epsilon(1e-9));
    CHECK(p.gt.cy() == doctest::Approx(32.0).epsilon(1e-9));
    // area factor 4 puts the box at a quarter of the crop side
    CHECK(std::sqrt(p.gt.w * p.gt.h) == doctest::Approx(16.0).epsilon(1e-9));
  }
  // same seed, same stream
  std::mt19937_64 r1(8), r2(8);
  auto pa = sample_pair(seq, mc, cfg, r1);
  auto pb = sample_pair(seq, mc, cfg, r2);
  CHECK(pa.z_img.vec() == pb.z_img.vec());
  CHECK(pa.gt.x == pb.gt.x);
}

TEST_CASE("flip augmentation mirrors the box") {
  SynthConfig sc;
  sc.seed = 2;
  sc.n_frames = 3;
  sc.frame_side = 96;
  sc.target_size = 30;
  auto seq = synth_sequence(sc);
  ModelConfig mc = ModelConfig::mini();
  TrainConfig base;
  base.center_jitter = 0.2;
  base.flip = false;
  // a flipped draw mirrors gt.x around the crop; centers stay in range
  TrainConfig flip = base;
  flip.flip = true;
  std::mt19937_64 rng(31);
  bool saw_offcenter = false;
  for (int t = 0; t < 20; ++t) {
    auto p = sample_pair(seq, mc, flip, rng);
    CHECK(p.gt.w > 0.0);
    CHECK(p.gt.cx() > -32.0);
    CHECK(p.gt.cx() < 96.0);
    if (std::abs(p.gt.cx() - 32.0) > 1.0) saw_offcenter = true;
  }
  CHECK(saw_offcenter);  // jitter actually moves the target
}

// ---- end-to-end smoke ----

TEST_CASE("a short run logs losses and writes a loadable checkpoint") {
  ModelConfig mc = ModelConfig::mini();
  mc.seed = 7;
  auto model = make_track_model<float>(mc);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.pairs_per_epoch = 8;
  cfg.batch_size = 2;
  cfg.n_sequences = 1;
  cfg.seed = 3;
  cfg.synth.n_frames = 6;
  cfg.synth.frame_side = 96;
  cfg.synth.target_size = 30;
  cfg.loss_csv_path = "/tmp/smat_train_smoke.csv";
  cfg.checkpoint_path = "/tmp/smat_train_smoke.ckpt";
  auto res = train_model(model, cfg);
  CHECK(res.steps == 8);
  CHECK(res.epoch_loss.size() == 2);
  CHECK(std::isfinite(res.final_loss));
  CHECK(res.final_loss > 0.0);

  // csv: header plus one line per step, fixed column order
  CHECK(res.loss_csv.rfind("step,lr,focal,l1,iou,total\n", 0) == 0);
  CHECK(std::count(res.loss_csv.begin(), res.loss_csv.end(), '\n') == 9);

  auto ckpt = load_checkpoint(cfg.checkpoint_path);
  auto meta = checkpoint_meta(ckpt);
  CHECK(meta.variant == 3);  // joint fusion is the default
  CHECK(meta.attention == 0);
  CHECK(meta.preset == 1);

  // weights round-trip into a freshly built registry
  auto model2 = make_track_model<float>(mc);
  auto reg2 = build_registry(model2);
  load_into_registry(ckpt, reg2);
  auto reg1 = build_registry(model);
  REQUIRE(reg1.entries.size() == reg2.entries.size());
  for (size_t i = 0; i < reg1.entries.size(); ++i)
    CHECK(reg1.entries[i].tensor.vec() == reg2.entries[i].tensor.vec());
  std::remove("/tmp/smat_train_smoke.csv");
  std::remove("/tmp/smat_train_smoke.ckpt");
}

TEST_CASE("training reduces the objective on a small clip") {
  ModelConfig mc = ModelConfig::mini();
  mc.seed = 11;
  auto model = make_track_model<float>(mc);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.pairs_per_epoch = 32;
  cfg.batch_size = 4;
  cfg.n_sequences = 1;
  cfg.seed = 13;
  cfg.lr = 2e-3;
  cfg.synth.n_frames = 4;
  cfg.synth.frame_side = 96;
  cfg.synth.target_size = 32;
  cfg.synth.motion = 1.0;
  cfg.center_jitter = 0.05;
  cfg.scale_jitter_lo = cfg.scale_jitter_hi = 1.0;
  cfg.flip = false;
  auto res = train_model(model, cfg);
  CHECK(res.epoch_loss.back() < res.epoch_loss.front());
}
