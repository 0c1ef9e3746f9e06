#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library code it is checking.

#include "cahqp/autograd.hpp"
#include "cahqp/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace cahqp::testing {

using ag::Matrix;

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Central finite differences of f with respect to every entry of `leaf`.
inline Matrix numeric_gradient(const std::function<double()>& f, ag::Var leaf, double eps = 1e-6) {
  Matrix g(leaf.rows(), leaf.cols());
  auto& v = leaf.mutable_value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double saved = v.data()[i];
    v.data()[i] = saved + eps;
    const double up = f();
    v.data()[i] = saved - eps;
    const double down = f();
    v.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), with a floor so two vanishing gradients agree.
inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

// Minimum-cost injective map of targets (columns) onto queries (rows) by
// enumerating every ordered choice of distinct queries. Returns (query,
// target) pairs sorted by query and the optimal cost.
inline std::pair<std::vector<std::pair<int, int>>, double> brute_force_assignment(const Matrix& cost) {
  const int n_q = static_cast<int>(cost.rows());
  const int n_t = static_cast<int>(cost.cols());
  std::vector<int> queries(static_cast<size_t>(n_q));
  std::iota(queries.begin(), queries.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_choice;
  // Every permutation's first n_t entries enumerate all injective maps (with repeats).
  do {
    double c = 0.0;
    for (int t = 0; t < n_t; ++t) c += cost(queries[static_cast<size_t>(t)], t);
    if (c < best) {
      best = c;
      best_choice.assign(queries.begin(), queries.begin() + n_t);
    }
  } while (std::next_permutation(queries.begin(), queries.end()));
  std::vector<std::pair<int, int>> pairs;
  for (int t = 0; t < n_t; ++t) pairs.emplace_back(best_choice[static_cast<size_t>(t)], t);
  std::sort(pairs.begin(), pairs.end());
  return {pairs, n_t == 0 ? 0.0 : best};
}

// Intersection-over-union from explicit corner arithmetic.
inline double reference_iou(const Box& a, const Box& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Average precision by enumerating every rank cut-off k: the top-k detections
// are matched from scratch, precision and recall at k recorded, and the
// interpolated precision at recall r is the best precision over all cut-offs
// reaching recall r. 101 recall levels. Tie order: score desc, image, index.
inline double brute_force_ap(const std::vector<std::vector<ScoredBox>>& preds,
                             const std::vector<std::vector<BoxLabel>>& truth, int cls, double thr) {
  struct Det {
    double score;
    size_t image, index;
  };
  std::vector<Det> dets;
  int positives = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    for (const auto& t : truth[i]) positives += t.class_id == cls;
    for (size_t d = 0; d < preds[i].size(); ++d) {
      if (preds[i][d].label.class_id == cls) dets.push_back({preds[i][d].score, i, d});
    }
  }
  if (positives == 0) return 0.0;
  std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  std::vector<std::pair<double, double>> pr;  // (recall, precision) per cut-off
  for (size_t k = 1; k <= dets.size(); ++k) {
    std::vector<std::vector<bool>> used(truth.size());
    for (size_t i = 0; i < truth.size(); ++i) used[i].assign(truth[i].size(), false);
    int tp = 0;
    for (size_t r = 0; r < k; ++r) {
      const auto& det = preds[dets[r].image][dets[r].index];
      const auto& gts = truth[dets[r].image];
      int best = -1;
      double best_v = -1.0;
      for (size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[dets[r].image][g]) continue;
        const double v = reference_iou(det.label.box, gts[g].box);
        if (v >= thr && v > best_v) {
          best_v = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[dets[r].image][static_cast<size_t>(best)] = true;
        ++tp;
      }
    }
    pr.emplace_back(static_cast<double>(tp) / positives, static_cast<double>(tp) / static_cast<double>(k));
  }
  double total = 0.0;
  for (int s = 0; s <= 100; ++s) {
    double p = 0.0;
    for (const auto& [rec, prec] : pr) {
      if (rec >= s / 100.0) p = std::max(p, prec);
    }
    total += p;
  }
  return total / 101.0;
}

inline double brute_force_map(const std::vector<std::vector<ScoredBox>>& preds,
                              const std::vector<std::vector<BoxLabel>>& truth, int num_classes, double thr) {
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    bool any = false;
    for (const auto& img : truth) {
      for (const auto& t : img) any = any || t.class_id == c;
    }
    if (!any) continue;
    ++present;
    total += brute_force_ap(preds, truth, c, thr);
  }
  return 100.0 * total / present;
}

}  // namespace cahqp::testing
