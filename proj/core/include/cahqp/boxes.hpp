#pragma once

#include <array>
#include <string>
#include <vector>

namespace cahqp {

// Normalized center-size box; all coordinates in [0, 1].
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const Box&) const = default;
  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

struct BoxLabel {
  int class_id = 0;
  Box box;

  bool operator==(const BoxLabel&) const = default;
};

// A detection ranked by confidence, as consumed by mAP evaluation.
struct ScoredBox {
  BoxLabel label;
  double score = 0.0;
};

// Empty string when valid, otherwise a diagnostic.
std::string validate_box_label(const BoxLabel& label, int num_classes);
bool is_valid_box(const Box& box);

// Clamps center into [0,1] and size into [min_size, 1].
Box clamp_box(const Box& box, double min_size = 1e-6);

double iou(const Box& a, const Box& b);
// Generalized IoU in [-1, 1].
double generalized_iou(const Box& a, const Box& b);

}  // namespace cahqp
