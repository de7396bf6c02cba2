#pragma once

#include <array>

#include "flowdet/common.hpp"

namespace flowdet {

// Axis-aligned box, corner form (x1,y1,x2,y2) with x2 > x1, y2 > y1.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const { return (x2 - x1) * (y2 - y1); }
};

// COCO-style (x, y, w, h)
struct BoxXYWH {
  double x = 0, y = 0, w = 0, h = 0;
  double area() const { return w * h; }
  BoxXYXY to_xyxy() const { return {x, y, x + w, y + h}; }
};

// normalized center form used by the detector heads
struct BoxCXCYWH {
  double cx = 0, cy = 0, w = 0, h = 0;
  BoxXYXY to_xyxy() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

inline void require_valid(const BoxXYXY& b, const char* op) {
  if (!(b.x2 > b.x1) || !(b.y2 > b.y1))
    throw ValueError(std::string(op) + ": degenerate box (" + std::to_string(b.x1) + "," +
                     std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
                     std::to_string(b.y2) + ")");
}

inline double intersection_area(const BoxXYXY& a, const BoxXYXY& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const BoxXYXY& a, const BoxXYXY& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

// IoU minus the normalized empty area of the smallest enclosing box; in [-1, 1].
inline double giou(const BoxXYXY& a, const BoxXYXY& b) {
  require_valid(a, "giou");
  require_valid(b, "giou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double ex1 = std::min(a.x1, b.x1), ey1 = std::min(a.y1, b.y1);
  const double ex2 = std::max(a.x2, b.x2), ey2 = std::max(a.y2, b.y2);
  const double enclosure = (ex2 - ex1) * (ey2 - ey1);
  return inter / uni - (enclosure - uni) / enclosure;
}

}  // namespace flowdet
