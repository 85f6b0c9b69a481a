#include "smat/tracker.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

namespace smat {

namespace {

// source coordinate of output sample c under scale = side/out_side
inline double src_coord(int c, double origin, double scale) {
  return origin + (c + 0.5) * scale - 0.5;
}

}  // namespace

Image crop_region(const Image& frame, double cx, double cy, double side,
                  int out_side, CropSpec* spec_out) {
  if (frame.c != 3) fail_shape("crop_region: expected a 3-channel frame");
  if (!(side > 0) || out_side < 1)
    fail_shape("crop_region: crop side and output side must be positive");

  CropSpec spec;
  spec.cx = cx;
  spec.cy = cy;
  spec.side = side;
  spec.out_side = out_side;

  // Pad value: per-channel mean of the in-frame part of the crop window.
  const double x0 = cx - side / 2, y0 = cy - side / 2;
  int r_lo = std::max(0, (int)std::floor(y0));
  int r_hi = std::min(frame.h, (int)std::ceil(y0 + side));
  int c_lo = std::max(0, (int)std::floor(x0));
  int c_hi = std::min(frame.w, (int)std::ceil(x0 + side));
  double sum[3] = {0, 0, 0};
  long n = 0;
  for (int r = r_lo; r < r_hi; ++r)
    for (int c = c_lo; c < c_hi; ++c) {
      for (int ch = 0; ch < 3; ++ch) sum[ch] += frame.at(r, c, ch);
      ++n;
    }
  for (int ch = 0; ch < 3; ++ch)
    spec.fill[ch] = n ? (float)(sum[ch] / n) : 0.5f;

  Image out = make_image(out_side, out_side, 3);
  const double scale = side / out_side;
  for (int r = 0; r < out_side; ++r) {
    double sy = src_coord(r, y0, scale);
    int iy = (int)std::floor(sy);
    double fy = sy - iy;
    for (int c = 0; c < out_side; ++c) {
      double sx = src_coord(c, x0, scale);
      int ix = (int)std::floor(sx);
      double fx = sx - ix;
      for (int ch = 0; ch < 3; ++ch) {
        // bilinear over the 2x2 neighborhood; out-of-frame taps read fill
        double acc = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int yy = iy + dy, xx = ix + dx;
            double v = (yy >= 0 && yy < frame.h && xx >= 0 && xx < frame.w)
                           ? frame.at(yy, xx, ch)
                           : spec.fill[ch];
            double wgt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
            acc += wgt * v;
          }
        out.at(r, c, ch) = (float)acc;
      }
    }
  }
  if (spec_out) *spec_out = spec;
  return out;
}

BoundingBox box_to_crop(const BoundingBox& frame_box, const CropSpec& spec) {
  const double s = spec.out_side / spec.side;
  BoundingBox b;
  b.x = (frame_box.x - (spec.cx - spec.side / 2)) * s;
  b.y = (frame_box.y - (spec.cy - spec.side / 2)) * s;
  b.w = frame_box.w * s;
  b.h = frame_box.h * s;
  return b;
}

BoundingBox box_to_frame(const BoundingBox& crop_box, const CropSpec& spec) {
  const double s = spec.side / spec.out_side;
  BoundingBox b;
  b.x = crop_box.x * s + (spec.cx - spec.side / 2);
  b.y = crop_box.y * s + (spec.cy - spec.side / 2);
  b.w = crop_box.w * s;
  b.h = crop_box.h * s;
  return b;
}

Tensor hanning2d(int n) {
  if (n < 2) fail_shape("hanning2d: window size must be at least 2");
  std::vector<float> w1(n);
  for (int i = 0; i < n; ++i)
    w1[i] = 0.5f * (1.0f - std::cos(2.0 * M_PI * i / (n - 1)));
  Tensor w = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) w.vec()[i * n + j] = w1[i] * w1[j];
  return w;
}

std::vector<AttentionExport> export_attention_maps(
    const std::vector<AttentionTraceT<float>>& traces,
    const std::string& prefix) {
  std::vector<AttentionExport> out;
  int stage = 0;
  for (const auto& t : traces) {
    ++stage;
    if (t.search_rows <= 0 || t.search_cols <= 0)
      fail_shape("export_attention_maps: trace " + std::to_string(stage) +
                 " carries no search-aligned geometry");
    const std::size_t n = (std::size_t)t.search_rows * t.search_cols;
    if (t.q_soft.size() < (std::size_t)t.search_offset + n)
      fail_shape("export_attention_maps: trace " + std::to_string(stage) +
                 " is shorter than its search block");
    std::vector<float> block(t.q_soft.begin() + t.search_offset,
                             t.q_soft.begin() + t.search_offset + n);

    AttentionExport e;
    e.rows = t.search_rows;
    e.cols = t.search_cols;
    e.csv_path = prefix + "_stage" + std::to_string(stage) + ".csv";
    e.pgm_path = prefix + "_stage" + std::to_string(stage) + ".pgm";

    std::ofstream csv(e.csv_path);
    if (!csv)
      fail_shape("export_attention_maps: cannot write " + e.csv_path);
    csv.precision(9);
    for (int r = 0; r < e.rows; ++r) {
      for (int c = 0; c < e.cols; ++c)
        csv << (c ? "," : "") << block[r * e.cols + c];
      csv << "\n";
    }

    float lo = block[0], hi = block[0];
    for (float v : block) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::vector<float> norm(block.size(), 0.0f);
    if (hi > lo)
      for (std::size_t i = 0; i < block.size(); ++i)
        norm[i] = (block[i] - lo) / (hi - lo);
    write_pgm(e.pgm_path, e.rows, e.cols, norm);
    out.push_back(std::move(e));
  }
  return out;
}

Tracker::Tracker(const TrackModelT<float>* model, TrackerOptions opt)
    : model_(model), opt_(opt) {}

void Tracker::init(const Image& frame, const BoundingBox& gt) {
  frame_w_ = frame.w;
  frame_h_ = frame.h;
  if (gt.w < 1 || gt.h < 1)
    fail_shape("Tracker::init: degenerate target box");
  if (gt.x2() <= 0 || gt.y2() <= 0 || gt.x >= frame.w || gt.y >= frame.h)
    fail_shape("Tracker::init: target box lies outside the frame");
  BoundingBox box = clip_box(gt, frame.w, frame.h);

  NoGradGuard ng;
  const double side_z = 2.0 * std::sqrt(box.w * box.h);
  Image z_crop = crop_region(frame, box.cx(), box.cy(),
                             side_z, model_->cfg.backbone.template_side);
  Tensor z_img = image_to_tensor(z_crop);

  template_passes_ = 0;
  if (model_->cfg.variant == FusionVariant::D ||
      model_->cfg.attention == AttentionKind::Standard) {
    template_img_ = z_img;  // recomputed jointly with every search frame
    template_bytes_ = template_img_.vec();
  } else {
    cache_ = backbone_template_init(model_->backbone, z_img);
    template_passes_ = 1;
    template_bytes_ = cache_.z_feat.vec();
    for (const auto& t : cache_.fusion_tokens)
      if (t.defined())
        template_bytes_.insert(template_bytes_.end(), t.vec().begin(),
                               t.vec().end());
  }

  const int cells = model_->cfg.backbone.search_side / 16;
  window_ = hanning2d(cells);
  prev_ = box;
  first_frame_pending_ = true;
  initialized_ = true;
}

BoundingBox Tracker::track_frame(const Image& frame) {
  if (!initialized_) fail_shape("Tracker::track_frame: init() not called");
  if (first_frame_pending_) {
    // the first tracked frame is the init frame; report the given box
    first_frame_pending_ = false;
    return prev_;
  }

  NoGradGuard ng;
  const double side_x = 4.0 * std::sqrt(prev_.w * prev_.h);
  CropSpec spec;
  Image x_crop = crop_region(frame, prev_.cx(), prev_.cy(), side_x,
                             model_->cfg.backbone.search_side, &spec);
  Tensor x_img = image_to_tensor(x_crop);

  std::optional<TraceScope<float>> scope;
  if (opt_.capture_traces) scope.emplace();
  HeadOutputT<float> head;
  if (model_->cfg.variant == FusionVariant::D ||
      model_->cfg.attention == AttentionKind::Standard) {
    head = model_forward(*model_, template_img_, x_img).head;
    ++template_passes_;
  } else {
    head = model_forward_search(*model_, cache_, x_img);
  }
  traces_.clear();
  if (scope) {
    for (auto& t : scope->sink.traces)
      if (t.search_rows > 0) traces_.push_back(std::move(t));
  }

  BoundingBox crop_box = decode_box(head, opt_.window ? &window_ : nullptr,
                                    (double)model_->cfg.backbone.search_side);
  prev_ = clip_box(box_to_frame(crop_box, spec), frame.w, frame.h);
  return prev_;
}

}  // namespace smat
