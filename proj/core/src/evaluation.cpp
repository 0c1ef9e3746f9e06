#include "cahqp/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace cahqp {

std::vector<ScoredBox> scored_detections(const DetectionSet& detections) {
  const ag::Matrix probs = detections.probabilities();
  const int k = detections.num_classes();
  std::vector<ScoredBox> out;
  out.reserve(static_cast<size_t>(detections.num_queries()));
  for (int q = 0; q < detections.num_queries(); ++q) {
    Eigen::Index best = 0;
    const double score = probs.row(q).head(k).maxCoeff(&best);
    out.push_back({BoxLabel{static_cast<int>(best), detections.box(q)}, score});
  }
  return out;
}

double average_precision(std::span<const std::vector<ScoredBox>> predictions,
                         std::span<const std::vector<BoxLabel>> truth, int class_id, double iou_threshold) {
  if (predictions.size() != truth.size()) throw std::invalid_argument("average_precision: list length mismatch");
  struct Ranked {
    double score;
    size_t image;
    size_t index;
  };
  std::vector<Ranked> ranked;
  size_t positives = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    for (const auto& t : truth[i]) positives += (t.class_id == class_id);
    for (size_t d = 0; d < predictions[i].size(); ++d) {
      if (predictions[i][d].label.class_id == class_id) ranked.push_back({predictions[i][d].score, i, d});
    }
  }
  if (positives == 0) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<char>> taken(truth.size());
  for (size_t i = 0; i < truth.size(); ++i) taken[i].assign(truth[i].size(), 0);
  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  size_t tp = 0;
  for (size_t r = 0; r < ranked.size(); ++r) {
    const auto& det = predictions[ranked[r].image][ranked[r].index];
    const auto& gts = truth[ranked[r].image];
    double best_iou = 0.0;
    int best = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || taken[ranked[r].image][g]) continue;
      const double v = iou(det.label.box, gts[g].box);
      // Highest IoU wins; among equals the earlier truth box.
      if (v >= iou_threshold && (best < 0 || v > best_iou)) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[ranked[r].image][static_cast<size_t>(best)] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  // Precision envelope, then sample at 101 recall levels.
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  for (int s = 0; s <= 100; ++s) {
    const double level = s / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) total += precision[static_cast<size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

double evaluate_map(std::span<const std::vector<ScoredBox>> predictions,
                    std::span<const std::vector<BoxLabel>> truth, int num_classes, double iou_threshold) {
  if (predictions.size() != truth.size()) throw std::invalid_argument("evaluate_map: list length mismatch");
  std::vector<char> present(static_cast<size_t>(num_classes), 0);
  for (const auto& image : truth) {
    for (const auto& t : image) {
      if (t.class_id < 0 || t.class_id >= num_classes) throw std::invalid_argument("evaluate_map: truth class out of range");
      present[static_cast<size_t>(t.class_id)] = 1;
    }
  }
  const int classes = std::accumulate(present.begin(), present.end(), 0);
  if (classes == 0) throw std::invalid_argument("evaluate_map: mAP undefined for empty truth");
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    if (present[static_cast<size_t>(c)]) total += average_precision(predictions, truth, c, iou_threshold);
  }
  return 100.0 * total / classes;
}

}  // namespace cahqp
