#include "cahqp/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace cahqp {

std::string validate_box_label(const BoxLabel& label, int num_classes) {
  if (label.class_id < 0 || label.class_id >= num_classes) {
    return "class_id " + std::to_string(label.class_id) + " outside [0, " + std::to_string(num_classes) + ")";
  }
  if (!is_valid_box(label.box)) return "box outside normalized bounds";
  return {};
}

bool is_valid_box(const Box& b) {
  const auto finite = std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h);
  return finite && b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0 && b.w > 0.0 && b.w <= 1.0 &&
         b.h > 0.0 && b.h <= 1.0;
}

Box clamp_box(const Box& b, double min_size) {
  return Box{std::clamp(b.cx, 0.0, 1.0), std::clamp(b.cy, 0.0, 1.0), std::clamp(b.w, min_size, 1.0),
             std::clamp(b.h, min_size, 1.0)};
}

namespace {

double intersection(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

// Areas are added in a fixed order so iou(a, b) == iou(b, a) bit for bit.
double union_area(const Box& a, const Box& b, double inter) {
  const double lo = std::min(a.area(), b.area());
  const double hi = std::max(a.area(), b.area());
  return lo + hi - inter;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  if (a == b) return a.area() > 0.0 ? 1.0 : 0.0;
  const double inter = intersection(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / union_area(a, b, inter);
}

double generalized_iou(const Box& a, const Box& b) {
  const double inter = intersection(a, b);
  const double uni = union_area(a, b, inter);
  const double cw = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double ch = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double enclosing = cw * ch;
  const double base = uni > 0.0 ? inter / uni : 0.0;
  if (enclosing <= 0.0) return base;
  return base - (enclosing - uni) / enclosing;
}

}  // namespace cahqp
