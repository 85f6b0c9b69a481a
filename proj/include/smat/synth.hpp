#pragma once

// Seeded synthetic tracking sequences: a textured target moving over a
// structured background with smooth translation, scale drift, and an
// optional occluder. Stands in for real training/eval footage.

#include <cstdint>
#include <vector>

#include "smat/geometry.hpp"
#include "smat/image.hpp"

namespace smat {

struct SynthConfig {
  std::uint64_t seed = 1;
  int n_frames = 30;
  int frame_side = 320;
  double target_size = 64;    // initial square side in pixels
  double motion = 3.0;        // translation random-walk step scale
  double scale_jitter = 0.0;  // per-frame multiplicative size drift scale
  bool ellipse = false;       // rectangle otherwise
  bool occluder = false;      // gray bar sweeping near the target mid-sequence
};

struct SynthSequence {
  std::vector<Image> frames;
  std::vector<BoundingBox> boxes;  // groundtruth, clipped to the frame
};

SynthSequence synth_sequence(const SynthConfig& cfg);

}  // namespace smat
