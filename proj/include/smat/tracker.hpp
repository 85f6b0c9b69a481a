#pragma once

// Frame-by-frame inference: crop geometry, Hanning windowing, and the
// per-sequence tracker state machine.

#include <vector>

#include "smat/image.hpp"
#include "smat/model.hpp"

namespace smat {

// Maps between frame coordinates and a square crop resized to out_side:
// crop_x = (frame_x - (cx - side/2)) * out_side / side.
struct CropSpec {
  double cx = 0, cy = 0;  // crop center in frame pixels
  double side = 0;        // crop square side in frame pixels
  int out_side = 0;
  float fill[3] = {0.5f, 0.5f, 0.5f};  // per-channel pad value
};

// Sub-pixel bilinear crop; out-of-frame area reads the per-channel mean of
// the in-frame part of the crop window.
Image crop_region(const Image& frame, double cx, double cy, double side,
                  int out_side, CropSpec* spec_out = nullptr);

BoundingBox box_to_crop(const BoundingBox& frame_box, const CropSpec& spec);
BoundingBox box_to_frame(const BoundingBox& crop_box, const CropSpec& spec);

// outer product of 0.5*(1 - cos(2*pi*i/(n-1))); n >= 2
Tensor hanning2d(int n);

struct TrackerOptions {
  bool window = true;
  bool capture_traces = false;
};

struct AttentionExport {
  std::string csv_path, pgm_path;
  int rows = 0, cols = 0;
};

// Writes each search-aligned trace's per-token attention weights as a raw
// CSV grid plus a min-max normalized PGM, as <prefix>_stageN.{csv,pgm}.
std::vector<AttentionExport> export_attention_maps(
    const std::vector<AttentionTraceT<float>>& traces,
    const std::string& prefix);

class Tracker {
 public:
  explicit Tracker(const TrackModelT<float>* model, TrackerOptions opt = {});

  // template crop uses area factor 2: side = 2*sqrt(w*h)
  void init(const Image& frame, const BoundingBox& gt);

  // First call after init returns the init box unchanged; later calls crop
  // around the previous box (side = 4*sqrt(w*h)), run the model, window the
  // score map, and map the decoded box back to frame coordinates.
  BoundingBox track_frame(const Image& frame);

  bool initialized() const { return initialized_; }
  // how many times template features have been computed (1 after init for
  // the frozen-template variants; grows per frame under the joint variant)
  int template_passes() const { return template_passes_; }
  // template state snapshot for immutability checks
  const std::vector<float>& template_bytes() const { return template_bytes_; }
  // search-aligned attention traces from the latest model forward
  const std::vector<AttentionTraceT<float>>& last_traces() const {
    return traces_;
  }

 private:
  const TrackModelT<float>* model_;
  TrackerOptions opt_;
  bool initialized_ = false;
  bool first_frame_pending_ = false;
  BoundingBox prev_;
  int frame_w_ = 0, frame_h_ = 0;
  Tensor template_img_;          // retained for the joint variant
  TemplateCacheT<float> cache_;  // frozen features for the two-stream variants
  std::vector<float> template_bytes_;
  Tensor window_;
  int template_passes_ = 0;
  std::vector<AttentionTraceT<float>> traces_;
};

}  // namespace smat
