#pragma once

// Tracking metrics over per-video box lists, annotation file IO, and the
// JSON report.

#include <map>
#include <string>
#include <vector>

#include "smat/geometry.hpp"

namespace smat {

struct VideoMetrics {
  double ao = 0, sr050 = 0, sr075 = 0, auc = 0, p = 0, p_norm = 0;
  int frames = 0;
};

struct TrackMetrics {
  double ao = 0, sr050 = 0, sr075 = 0, auc = 0, p = 0, p_norm = 0;
  double op50 = 0, op75 = 0;  // aliases of sr050/sr075
  std::map<std::string, VideoMetrics> per_video;
};

// Per-video metrics averaged uniformly across videos. AUC is the mean
// success rate over IoU thresholds 0, 0.01, ..., 1.00 with strict
// IoU > threshold; precision uses center distance <= 20 px; normalized
// precision divides the center offset by the groundtruth box size and
// thresholds at 0.2.
TrackMetrics compute_metrics(
    const std::vector<std::vector<BoundingBox>>& pred,
    const std::vector<std::vector<BoundingBox>>& gt,
    const std::vector<std::string>& names);

// one "x,y,w,h" line per frame
std::vector<BoundingBox> load_annotations(const std::string& path);
void save_annotations(const std::string& path,
                      const std::vector<BoundingBox>& boxes);

std::string metrics_to_json(const TrackMetrics& m);

}  // namespace smat
