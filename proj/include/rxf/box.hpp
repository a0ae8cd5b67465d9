#pragma once

#include <vector>

namespace rxf {

/// Axis-aligned box in pixel coordinates, corners (x0,y0) < (x1,y1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0.0; }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; 0 when either box has zero area.
double iou(const Box& a, const Box& b);

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
};

struct GroundTruth {
  int class_id = 0;
  Box box;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

}  // namespace rxf
