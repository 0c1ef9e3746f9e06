#pragma once

// Bipartite label assignment between object queries and targets, and the
// supervised set-prediction loss built on it.

#include "cahqp/autograd.hpp"
#include "cahqp/boxes.hpp"
#include "cahqp/detector.hpp"

#include <span>
#include <utility>
#include <vector>

namespace cahqp {

struct Assignment {
  // (query_index, target_index), sorted by query index. Unlisted queries are background.
  std::vector<std::pair<int, int>> pairs;

  std::vector<int> matched_queries() const;
  std::vector<int> matched_targets() const;
  bool empty() const { return pairs.empty(); }
};

struct MatchCostWeights {
  double cls = 1.0;
  double box_l1 = 5.0;
  double giou = 2.0;
};

// Minimum-cost injective map of the columns (targets) of a [queries x targets]
// cost matrix onto rows (queries). Requires targets <= queries. Among equal
// costs the scan order favours lower query indices.
Assignment solve_assignment(const ag::Matrix& cost);
double assignment_cost(const ag::Matrix& cost, const Assignment& assignment);

// cls * (-p[class]) + box_l1 * |b - t|_1 + giou * (-gIoU(b, t)).
ag::Matrix matching_cost(const DetectionSet& predictions, std::span<const BoxLabel> targets,
                         const MatchCostWeights& weights);
Assignment hungarian_match(const DetectionSet& predictions, std::span<const BoxLabel> targets,
                           const MatchCostWeights& weights = {});

struct DetectionLossWeights {
  double cls = 1.0;
  double box_l1 = 5.0;
  double giou = 2.0;
  // Relative cross-entropy weight of queries assigned to background.
  double background = 0.1;
};

struct DetectionLoss {
  ag::Var total;
  ag::Var cls;
  ag::Var box_l1;  // undefined when there are no targets
  ag::Var giou;    // undefined when there are no targets
};

// Weighted-mean class cross-entropy over all queries (matched -> target class,
// others -> background column K) plus box L1 and (1 - gIoU) over matched pairs,
// the box terms normalized by the target count.
DetectionLoss detection_loss(const DetectionOutput& predictions, std::span<const BoxLabel> targets,
                             const Assignment& assignment, const DetectionLossWeights& weights = {});

// Differentiable generalized IoU between row-aligned [M x 4] cx,cy,w,h boxes; returns [M x 1].
ag::Var generalized_iou_rows(const ag::Var& boxes, const ag::Var& targets);

}  // namespace cahqp
