#include "smat/train.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "smat/checkpoint.hpp"

namespace smat {

namespace {

void flip_image(Image& img) {
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w / 2; ++c)
      for (int ch = 0; ch < img.c; ++ch)
        std::swap(img.at(r, c, ch), img.at(r, img.w - 1 - c, ch));
}

double scalar(const Tensor& t) { return (double)t.vec()[0]; }

}  // namespace

double lr_scale_at(const TrainConfig& cfg, int epoch) {
  const int drop = (int)std::lround(cfg.lr_drop_at * cfg.epochs);
  return epoch >= drop ? cfg.lr_drop_factor : 1.0;
}

TrainPair sample_pair(const SynthSequence& seq, const ModelConfig& mc,
                      const TrainConfig& cfg, std::mt19937_64& rng) {
  if (seq.frames.empty()) fail_shape("sample_pair: empty sequence");
  const int n = (int)seq.frames.size();
  std::uniform_int_distribution<int> pick(0, n - 1);
  const int t0 = pick(rng);
  const int lo = std::max(0, t0 - cfg.max_frame_gap);
  const int hi = std::min(n - 1, t0 + cfg.max_frame_gap);
  const int t1 = std::uniform_int_distribution<int>(lo, hi)(rng);

  const BoundingBox& g0 = seq.boxes[t0];
  const BoundingBox& g1 = seq.boxes[t1];

  Image z_crop = crop_region(seq.frames[t0], g0.cx(), g0.cy(),
                             2.0 * std::sqrt(g0.w * g0.h),
                             mc.backbone.template_side);

  std::uniform_real_distribution<double> us(cfg.scale_jitter_lo,
                                            cfg.scale_jitter_hi);
  std::uniform_real_distribution<double> uj(-cfg.center_jitter,
                                            cfg.center_jitter);
  const double side = 4.0 * std::sqrt(g1.w * g1.h) * us(rng);
  const double cx = g1.cx() + uj(rng) * side;
  const double cy = g1.cy() + uj(rng) * side;
  CropSpec spec;
  Image x_crop = crop_region(seq.frames[t1], cx, cy, side,
                             mc.backbone.search_side, &spec);
  BoundingBox gt = box_to_crop(g1, spec);

  if (cfg.flip && std::uniform_real_distribution<double>(0, 1)(rng) < 0.5) {
    flip_image(z_crop);  // template target is centered; flip keeps it so
    flip_image(x_crop);
    gt.x = mc.backbone.search_side - gt.x - gt.w;
  }

  TrainPair p;
  p.z_img = image_to_tensor(z_crop);
  p.x_img = image_to_tensor(x_crop);
  p.gt = gt;
  return p;
}

std::vector<SynthConfig> training_corpus(const TrainConfig& cfg) {
  // deterministic synthetic corpus; each clip gets its own seed and a mild
  // size/motion variation so the sampler sees more than one object scale
  std::mt19937_64 crng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> uv(0.75, 1.3);
  std::vector<SynthConfig> out;
  out.reserve(cfg.n_sequences);
  for (int i = 0; i < cfg.n_sequences; ++i) {
    SynthConfig sc = cfg.synth;
    sc.seed = cfg.synth.seed + 131 * (std::uint64_t)(i + 1);
    sc.target_size = cfg.synth.target_size * uv(crng);
    sc.motion = cfg.synth.motion * uv(crng);
    sc.ellipse = (i % 2) == 1;
    out.push_back(sc);
  }
  return out;
}

TrainResult train_model(TrackModelT<float>& model, const TrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.pairs_per_epoch < 1 || cfg.batch_size < 1 ||
      cfg.n_sequences < 1)
    throw std::invalid_argument("train_model: counts must be positive");

  std::vector<SynthSequence> corpus;
  corpus.reserve(cfg.n_sequences);
  for (const auto& sc : training_corpus(cfg)) corpus.push_back(synth_sequence(sc));

  auto reg = build_registry(model);
  auto state = make_adamw_state(reg);
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.backbone_lr_mult = cfg.backbone_lr_mult;

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> pick_seq(0, cfg.n_sequences - 1);
  const int steps_per_epoch =
      std::max(1, cfg.pairs_per_epoch / cfg.batch_size);
  const double search_side = (double)model.cfg.backbone.search_side;

  TrainResult res;
  std::ostringstream csv;
  csv << "step,lr,focal,l1,iou,total\n";
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double scale = lr_scale_at(cfg, epoch);
    double epoch_total = 0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      reg.zero_grads();
      double mf = 0, ml = 0, mi = 0, mt = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        auto pair = sample_pair(corpus[pick_seq(rng)], model.cfg, cfg, rng);
        auto out = model_forward(model, pair.z_img, pair.x_img);
        auto loss = pair_loss(out.head, pair.gt, search_side, cfg.loss);
        mul_scalar(loss.total, 1.0f / cfg.batch_size).backward();
        mf += scalar(loss.focal);
        ml += scalar(loss.l1);
        mi += scalar(loss.iou);
        mt += scalar(loss.total);
      }
      mf /= cfg.batch_size;
      ml /= cfg.batch_size;
      mi /= cfg.batch_size;
      mt /= cfg.batch_size;
      if (!std::isfinite(mt)) {
        std::ostringstream err;
        err << "training diverged at step " << step << " (epoch " << epoch
            << "): total=" << mt << " focal=" << mf << " l1=" << ml
            << " iou=" << mi;
        throw std::runtime_error(err.str());
      }
      adamw_step(reg, state, ocfg, scale);
      csv << step << "," << cfg.lr * scale << "," << mf << "," << ml << ","
          << mi << "," << mt << "\n";
      if (step == 0) res.first_loss = mt;
      res.final_loss = mt;
      epoch_total += mt;
    }
    res.epoch_loss.push_back(epoch_total / steps_per_epoch);
    if (cfg.verbose)
      std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs
                << " lr=" << cfg.lr * scale
                << " loss=" << res.epoch_loss.back() << "\n";
  }
  res.steps = step;
  res.loss_csv = csv.str();

  if (!cfg.loss_csv_path.empty()) {
    std::ofstream f(cfg.loss_csv_path);
    if (!f) throw std::runtime_error("cannot write " + cfg.loss_csv_path);
    f << res.loss_csv;
  }
  if (!cfg.checkpoint_path.empty()) {
    CheckpointMeta meta;
    meta.variant = (int)model.cfg.variant;
    meta.attention = model.cfg.attention == AttentionKind::Standard ? 1 : 0;
    meta.preset = model.cfg.preset_code;
    save_checkpoint(cfg.checkpoint_path, reg, meta);
  }
  return res;
}

}  // namespace smat
