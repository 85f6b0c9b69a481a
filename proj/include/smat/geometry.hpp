#pragma once

// Plain box arithmetic shared by losses, metrics, and the tracker.
// Boxes are (x, y, w, h) with (x, y) the top-left corner, pixel units.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace smat {

struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + w / 2; }
  double cy() const { return y + h / 2; }
  double area() const { return w * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }
};

inline void require_positive_box(const BoundingBox& b, const char* who) {
  if (!(b.w > 0) || !(b.h > 0))
    throw std::invalid_argument(std::string(who) + ": box needs positive size, got w=" +
                                std::to_string(b.w) + " h=" + std::to_string(b.h));
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_positive_box(a, "iou");
  require_positive_box(b, "iou");
  double inter = intersection_area(a, b);
  // (x+w)-x can exceed w by an ulp, nudging a self-overlap past 1
  return std::min(1.0, inter / (a.area() + b.area() - inter));
}

// IoU minus (enclosure \ union) / enclosure; in [-1, 1], equals IoU when the
// enclosing box is exactly the union.
inline double giou(const BoundingBox& a, const BoundingBox& b) {
  require_positive_box(a, "giou");
  require_positive_box(b, "giou");
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  double ew = std::max(a.x2(), b.x2()) - std::min(a.x, b.x);
  double eh = std::max(a.y2(), b.y2()) - std::min(a.y, b.y);
  double enc = ew * eh;
  return inter / uni - (enc - uni) / enc;
}

inline double center_distance(const BoundingBox& a, const BoundingBox& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

// Clip to [0, fw) x [0, fh) preserving at least 1 px of size.
inline BoundingBox clip_box(const BoundingBox& b, double fw, double fh) {
  BoundingBox r = b;
  r.x = std::clamp(r.x, 0.0, fw - 1.0);
  r.y = std::clamp(r.y, 0.0, fh - 1.0);
  r.w = std::clamp(r.w, 1.0, fw - r.x);
  r.h = std::clamp(r.h, 1.0, fh - r.y);
  return r;
}

}  // namespace smat
