#include "cahqp/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cahqp {

std::vector<int> Assignment::matched_queries() const {
  std::vector<int> out;
  out.reserve(pairs.size());
  for (auto [q, t] : pairs) out.push_back(q);
  return out;
}

std::vector<int> Assignment::matched_targets() const {
  std::vector<int> out;
  out.reserve(pairs.size());
  for (auto [q, t] : pairs) out.push_back(t);
  return out;
}

Assignment solve_assignment(const ag::Matrix& cost) {
  const int n_queries = static_cast<int>(cost.rows());
  const int n_targets = static_cast<int>(cost.cols());
  if (n_targets > n_queries) throw std::invalid_argument("assignment: more targets than queries");
  Assignment result;
  if (n_targets == 0) return result;
  if (!cost.allFinite()) throw std::invalid_argument("assignment: non-finite cost");

  // Shortest augmenting path with potentials; rows of the working problem are
  // targets (n), columns are queries (m), 1-based with column 0 as sentinel.
  const int n = n_targets;
  const int m = n_queries;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> owner(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = owner[static_cast<size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost(j - 1, i0 - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(owner[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (owner[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      owner[static_cast<size_t>(j0)] = owner[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (owner[static_cast<size_t>(j)] != 0) result.pairs.emplace_back(j - 1, owner[static_cast<size_t>(j)] - 1);
  }
  return result;
}

double assignment_cost(const ag::Matrix& cost, const Assignment& assignment) {
  double total = 0.0;
  for (auto [q, t] : assignment.pairs) total += cost(q, t);
  return total;
}

ag::Matrix matching_cost(const DetectionSet& predictions, std::span<const BoxLabel> targets,
                         const MatchCostWeights& weights) {
  const ag::Matrix probs = predictions.probabilities();
  ag::Matrix cost(predictions.num_queries(), static_cast<Eigen::Index>(targets.size()));
  for (int q = 0; q < predictions.num_queries(); ++q) {
    const Box pb{predictions.boxes(q, 0), predictions.boxes(q, 1), predictions.boxes(q, 2), predictions.boxes(q, 3)};
    for (size_t t = 0; t < targets.size(); ++t) {
      const Box& tb = targets[t].box;
      const double l1 = std::abs(pb.cx - tb.cx) + std::abs(pb.cy - tb.cy) + std::abs(pb.w - tb.w) + std::abs(pb.h - tb.h);
      cost(q, static_cast<Eigen::Index>(t)) = -weights.cls * probs(q, targets[t].class_id) + weights.box_l1 * l1 -
                                              weights.giou * generalized_iou(pb, tb);
    }
  }
  return cost;
}

Assignment hungarian_match(const DetectionSet& predictions, std::span<const BoxLabel> targets,
                           const MatchCostWeights& weights) {
  if (static_cast<int>(targets.size()) > predictions.num_queries()) {
    throw std::invalid_argument("hungarian_match: " + std::to_string(targets.size()) + " targets exceed " +
                                std::to_string(predictions.num_queries()) + " queries");
  }
  for (const auto& t : targets) {
    if (t.class_id < 0 || t.class_id >= predictions.num_classes()) {
      throw std::invalid_argument("hungarian_match: target class out of range");
    }
  }
  return solve_assignment(matching_cost(predictions, targets, weights));
}

ag::Var generalized_iou_rows(const ag::Var& boxes, const ag::Var& targets) {
  ag::Matrix to_corners(4, 4);
  to_corners << 1, 0, 1, 0,  //
      0, 1, 0, 1,            //
      -0.5, 0, 0.5, 0,       //
      0, -0.5, 0, 0.5;
  const ag::Var t(to_corners);
  const ag::Var a = ag::matmul(boxes, t);
  const ag::Var b = ag::matmul(targets, t);
  auto col = [](const ag::Var& m, int c) { return ag::slice_cols(m, c, 1); };
  const ag::Var area_a = ag::mul(col(boxes, 2), col(boxes, 3));
  const ag::Var area_b = ag::mul(col(targets, 2), col(targets, 3));
  const ag::Var iw = ag::relu(ag::sub(ag::minimum(col(a, 2), col(b, 2)), ag::maximum(col(a, 0), col(b, 0))));
  const ag::Var ih = ag::relu(ag::sub(ag::minimum(col(a, 3), col(b, 3)), ag::maximum(col(a, 1), col(b, 1))));
  const ag::Var inter = ag::mul(iw, ih);
  const ag::Var uni = ag::sub(ag::add(area_a, area_b), inter);
  const ag::Var cw = ag::sub(ag::maximum(col(a, 2), col(b, 2)), ag::minimum(col(a, 0), col(b, 0)));
  const ag::Var ch = ag::sub(ag::maximum(col(a, 3), col(b, 3)), ag::minimum(col(a, 1), col(b, 1)));
  const ag::Var enclosing = ag::mul(cw, ch);
  return ag::sub(ag::div(inter, uni), ag::div(ag::sub(enclosing, uni), enclosing));
}

DetectionLoss detection_loss(const DetectionOutput& predictions, std::span<const BoxLabel> targets,
                             const Assignment& assignment, const DetectionLossWeights& weights) {
  const int n_queries = static_cast<int>(predictions.logits.rows());
  const int background = static_cast<int>(predictions.logits.cols()) - 1;
  if (predictions.boxes.rows() != n_queries || predictions.boxes.cols() != 4) {
    throw std::invalid_argument("detection_loss: boxes must be [N_q x 4]");
  }
  if (assignment.pairs.size() != std::min<size_t>(static_cast<size_t>(n_queries), targets.size())) {
    throw std::invalid_argument("detection_loss: assignment size inconsistent with targets");
  }
  std::vector<int> classes(static_cast<size_t>(n_queries), background);
  std::vector<double> w(static_cast<size_t>(n_queries), weights.background);
  std::vector<char> target_seen(targets.size(), 0);
  std::vector<char> query_seen(static_cast<size_t>(n_queries), 0);
  for (auto [q, t] : assignment.pairs) {
    if (q < 0 || q >= n_queries || t < 0 || t >= static_cast<int>(targets.size()) ||
        query_seen[static_cast<size_t>(q)] || target_seen[static_cast<size_t>(t)]) {
      throw std::invalid_argument("detection_loss: assignment inconsistent with shapes");
    }
    query_seen[static_cast<size_t>(q)] = 1;
    target_seen[static_cast<size_t>(t)] = 1;
    classes[static_cast<size_t>(q)] = targets[static_cast<size_t>(t)].class_id;
    w[static_cast<size_t>(q)] = 1.0;
  }

  DetectionLoss loss;
  loss.cls = ag::cross_entropy(predictions.logits, classes, w);
  loss.total = ag::scale(loss.cls, weights.cls);
  if (assignment.empty()) return loss;

  const auto queries = assignment.matched_queries();
  ag::Matrix target_boxes(static_cast<Eigen::Index>(queries.size()), 4);
  for (size_t i = 0; i < assignment.pairs.size(); ++i) {
    const Box& b = targets[static_cast<size_t>(assignment.pairs[i].second)].box;
    target_boxes.row(static_cast<Eigen::Index>(i)) << b.cx, b.cy, b.w, b.h;
  }
  const double norm = static_cast<double>(targets.size());
  const ag::Var matched = ag::gather_rows(predictions.boxes, queries);
  const ag::Var tgt(target_boxes);
  loss.box_l1 = ag::scale(ag::sum(ag::abs(ag::sub(matched, tgt))), 1.0 / norm);
  loss.giou = ag::scale(ag::sum(ag::add_scalar(ag::scale(generalized_iou_rows(matched, tgt), -1.0), 1.0)), 1.0 / norm);
  loss.total = ag::add(loss.total, ag::add(ag::scale(loss.box_l1, weights.box_l1), ag::scale(loss.giou, weights.giou)));
  return loss;
}

}  // namespace cahqp
