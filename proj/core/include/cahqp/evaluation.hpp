#pragma once

#include "cahqp/boxes.hpp"
#include "cahqp/detector.hpp"

#include <span>
#include <vector>

namespace cahqp {

// Per query: the most probable foreground class and its probability. Every
// query is kept; ranking by score is left to the AP computation.
std::vector<ScoredBox> scored_detections(const DetectionSet& detections);

// COCO-style mean average precision on a 0-100 scale. Detections of each class
// are ranked by score (ties by image then input order) and greedily matched to
// the unmatched same-class truth box of highest IoU >= iou_threshold in the same
// image. AP uses 101-point interpolated precision; mAP averages over classes
// that occur in the truth. Throws std::invalid_argument when the truth is empty.
double evaluate_map(std::span<const std::vector<ScoredBox>> predictions,
                    std::span<const std::vector<BoxLabel>> truth, int num_classes, double iou_threshold = 0.5);

// AP (0-1) of one class, same conventions as evaluate_map.
double average_precision(std::span<const std::vector<ScoredBox>> predictions,
                         std::span<const std::vector<BoxLabel>> truth, int class_id, double iou_threshold = 0.5);

}  // namespace cahqp
