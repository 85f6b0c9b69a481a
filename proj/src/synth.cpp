#include "smat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace smat {

namespace {

struct Palette {
  float bg_r, bg_g, bg_b;      // background base color
  float fg_r, fg_g, fg_b;      // target base color
  double bg_fx, bg_fy;         // background wave frequencies
  double tex_f;                // target texture frequency
  double tex_angle;
};

Palette draw_palette(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Palette p;
  p.bg_r = (float)(0.2 + 0.3 * u(rng));
  p.bg_g = (float)(0.2 + 0.3 * u(rng));
  p.bg_b = (float)(0.2 + 0.3 * u(rng));
  // keep the target well separated from the background in color
  p.fg_r = (float)(0.7 + 0.25 * u(rng));
  p.fg_g = (float)(0.1 + 0.2 * u(rng));
  p.fg_b = (float)(0.55 + 0.35 * u(rng));
  p.bg_fx = 0.02 + 0.05 * u(rng);
  p.bg_fy = 0.02 + 0.05 * u(rng);
  p.tex_f = 0.25 + 0.35 * u(rng);
  p.tex_angle = u(rng) * 3.14159265358979;
  return p;
}

void paint_background(Image& img, const Palette& p) {
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c) {
      float wave = (float)(0.08 * std::sin(p.bg_fx * c) +
                           0.08 * std::cos(p.bg_fy * r) +
                           0.04 * std::sin(0.013 * (r + c)));
      img.at(r, c, 0) = std::clamp(p.bg_r + wave, 0.0f, 1.0f);
      img.at(r, c, 1) = std::clamp(p.bg_g + wave * 0.7f, 0.0f, 1.0f);
      img.at(r, c, 2) = std::clamp(p.bg_b + wave * 1.2f, 0.0f, 1.0f);
    }
}

void paint_target(Image& img, const Palette& p, const BoundingBox& b,
                  bool ellipse) {
  int r0 = std::max(0, (int)std::floor(b.y));
  int r1 = std::min(img.h, (int)std::ceil(b.y2()));
  int c0 = std::max(0, (int)std::floor(b.x));
  int c1 = std::min(img.w, (int)std::ceil(b.x2()));
  double ca = std::cos(p.tex_angle), sa = std::sin(p.tex_angle);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) {
      if (ellipse) {
        double dx = (c + 0.5 - b.cx()) / (b.w / 2);
        double dy = (r + 0.5 - b.cy()) / (b.h / 2);
        if (dx * dx + dy * dy > 1.0) continue;
      }
      // striped texture in target-local coordinates so it moves with the box
      double lx = (c - b.x) * ca - (r - b.y) * sa;
      float stripe = (float)(0.5 + 0.5 * std::sin(p.tex_f * lx * 2.0));
      float shade = 0.75f + 0.25f * stripe;
      img.at(r, c, 0) = std::clamp(p.fg_r * shade, 0.0f, 1.0f);
      img.at(r, c, 1) = std::clamp(p.fg_g * shade + 0.15f * stripe, 0.0f, 1.0f);
      img.at(r, c, 2) = std::clamp(p.fg_b * shade, 0.0f, 1.0f);
    }
}

void paint_occluder(Image& img, double x, int width) {
  int c0 = std::max(0, (int)x);
  int c1 = std::min(img.w, c0 + width);
  for (int r = 0; r < img.h; ++r)
    for (int c = c0; c < c1; ++c) {
      img.at(r, c, 0) = 0.45f;
      img.at(r, c, 1) = 0.45f;
      img.at(r, c, 2) = 0.45f;
    }
}

}  // namespace

SynthSequence synth_sequence(const SynthConfig& cfg) {
  if (cfg.n_frames < 1 || cfg.frame_side < 32)
    throw std::invalid_argument("synth_sequence: need >= 1 frame and side >= 32");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto pal = draw_palette(rng);

  double side = cfg.frame_side;
  double w = cfg.target_size, h = cfg.target_size * (0.8 + 0.2 * (u(rng) + 1) / 2);
  double cx = side / 2 + u(rng) * side * 0.1;
  double cy = side / 2 + u(rng) * side * 0.1;
  double vx = u(rng) * cfg.motion, vy = u(rng) * cfg.motion;

  SynthSequence seq;
  for (int f = 0; f < cfg.n_frames; ++f) {
    // smooth random walk with soft reflection off the borders
    vx = 0.9 * vx + 0.45 * u(rng) * cfg.motion;
    vy = 0.9 * vy + 0.45 * u(rng) * cfg.motion;
    if (f > 0) {
      cx += vx;
      cy += vy;
      if (cfg.scale_jitter > 0) {
        w *= 1.0 + u(rng) * cfg.scale_jitter;
        h *= 1.0 + u(rng) * cfg.scale_jitter;
        w = std::clamp(w, 12.0, side * 0.5);
        h = std::clamp(h, 12.0, side * 0.5);
      }
    }
    double margin_x = w / 2 + 2, margin_y = h / 2 + 2;
    if (cx < margin_x) { cx = margin_x; vx = std::abs(vx); }
    if (cx > side - margin_x) { cx = side - margin_x; vx = -std::abs(vx); }
    if (cy < margin_y) { cy = margin_y; vy = std::abs(vy); }
    if (cy > side - margin_y) { cy = side - margin_y; vy = -std::abs(vy); }

    BoundingBox box{cx - w / 2, cy - h / 2, w, h};
    auto img = make_image(cfg.frame_side, cfg.frame_side, 3);
    paint_background(img, pal);
    paint_target(img, pal, box, cfg.ellipse);
    if (cfg.occluder) {
      int mid = cfg.n_frames / 2;
      if (std::abs(f - mid) <= cfg.n_frames / 6) {
        double t = (f - (mid - cfg.n_frames / 6.0)) /
                   std::max(1.0, cfg.n_frames / 3.0);
        paint_occluder(img, box.x - box.w + t * 3 * box.w, (int)(box.w * 0.4));
      }
    }
    seq.frames.push_back(std::move(img));
    seq.boxes.push_back(clip_box(box, side, side));
  }
  return seq;
}

}  // namespace smat
