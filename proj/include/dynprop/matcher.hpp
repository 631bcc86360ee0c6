#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dynprop/geometry.hpp"

namespace dynprop {

// Dense [num_predictions x num_ground_truth] cost matrix.
class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t predictions, std::size_t targets, double fill = 0.0)
      : rows_(predictions), cols_(targets), data_(predictions * targets, fill) {}
  CostMatrix(std::size_t predictions, std::size_t targets, std::vector<double> entries)
      : rows_(predictions), cols_(targets), data_(std::move(entries)) {
    if (data_.size() != rows_ * cols_) throw std::invalid_argument("CostMatrix: entry count mismatch");
  }

  std::size_t predictions() const { return rows_; }
  std::size_t targets() const { return cols_; }
  double operator()(std::size_t p, std::size_t t) const { return data_[p * cols_ + t]; }
  double& operator()(std::size_t p, std::size_t t) { return data_[p * cols_ + t]; }
  const std::vector<double>& entries() const { return data_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

// (prediction, ground truth) pairs, ordered by ground-truth index.
struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  double total(const CostMatrix& cost) const {
    double s = 0.0;
    for (auto [p, t] : pairs) s += cost(p, t);
    return s;
  }
  // prediction index per ground truth, or -1
  std::vector<long> prediction_for_target(std::size_t targets) const {
    std::vector<long> out(targets, -1);
    for (auto [p, t] : pairs) out[t] = static_cast<long>(p);
    return out;
  }
  bool operator==(const Assignment&) const = default;
};

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

// entry(i, j) = w.cls * (-p_i(class_j)) + w.l1 * l1(i, j) + w.giou * (-giou(i, j)),
// with p the sigmoid of the class logits.
inline CostMatrix build_cost(const Tensor& class_logits, std::span<const Box> pred_boxes,
                             std::span<const int> target_classes, std::span<const Box> target_boxes,
                             const MatchWeights& w = {}) {
  const std::size_t p = pred_boxes.size(), g = target_boxes.size();
  if (class_logits.rank() != 2 || class_logits.rows() != p)
    throw ShapeError("build_cost: logits " + shape_str(class_logits.shape()) + " vs " +
                     std::to_string(p) + " boxes");
  if (target_classes.size() != g) throw std::invalid_argument("build_cost: class/box count mismatch");
  if (p < g)
    throw std::invalid_argument("build_cost: " + std::to_string(p) + " predictions for " +
                                std::to_string(g) + " objects");
  const std::size_t c = class_logits.cols();
  CostMatrix cost(p, g);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const auto cls = static_cast<std::size_t>(target_classes[j]);
      if (cls >= c) throw std::out_of_range("build_cost: class id out of range");
      const double prob = sigmoid(class_logits.at(i, cls));
      cost(i, j) = -w.cls * prob + w.l1 * l1_box(pred_boxes[i], target_boxes[j]) -
                   w.giou * giou(pred_boxes[i], target_boxes[j]);
    }
  return cost;
}

namespace detail {

// Shortest augmenting path (Jonker-Volgenant style) over the transposed
// problem: every ground truth (row here) is assigned a distinct prediction.
// Returns prediction per target plus the dual potentials.
struct DualSolution {
  std::vector<long> pred_of_target;
  std::vector<double> u;  // per target
  std::vector<double> v;  // per prediction
};

inline DualSolution solve_assignment(const CostMatrix& cost) {
  const std::size_t n = cost.targets(), m = cost.predictions();
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  DualSolution s;
  s.pred_of_target.assign(n, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (owner[j] != 0) s.pred_of_target[owner[j] - 1] = static_cast<long>(j - 1);
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

}  // namespace detail

// Minimum-cost assignment of every ground-truth column to a distinct
// prediction row. Among optimal assignments the one whose prediction-per-
// target list is lexicographically smallest is returned; excess predictions
// stay unmatched.
inline Assignment hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.targets(), m = cost.predictions();
  if (n == 0) return {};
  if (m < n) throw std::invalid_argument("hungarian: fewer predictions than targets");
  for (double c : cost.entries())
    if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");

  auto sol = detail::solve_assignment(cost);

  // Optimal assignments are exactly the perfect matchings of the tight
  // subgraph, where unmatched predictions behave like zero-cost dummy rows
  // (tight when their potential is zero). Walk targets in order and pull
  // each one to its smallest tight prediction whenever an alternating path
  // keeps the rest of the matching perfect.
  double scale = 1.0;
  for (double c : cost.entries()) scale = std::max(scale, std::abs(c));
  const double tol = 1e-9 * scale;
  const long kDummy = -1;
  const long kUnseen = -2;
  std::vector<long> pred_of = sol.pred_of_target;
  std::vector<long> target_of(m, kDummy);
  for (std::size_t t = 0; t < n; ++t) target_of[static_cast<std::size_t>(pred_of[t])] = static_cast<long>(t);

  auto tight = [&](long row, std::size_t p) {
    if (row == kDummy) return std::abs(sol.v[p]) <= tol;
    return std::abs(cost(p, static_cast<std::size_t>(row)) - sol.u[static_cast<std::size_t>(row)] -
                    sol.v[p]) <= tol;
  };

  for (std::size_t j = 0; j < n; ++j) {
    const auto current = static_cast<std::size_t>(pred_of[j]);
    for (std::size_t i = 0; i < current; ++i) {
      if (!tight(static_cast<long>(j), i)) continue;
      const long freed_row = target_of[i];
      if (freed_row != kDummy && static_cast<std::size_t>(freed_row) < j) continue;  // fixed
      // Alternating BFS from freed_row to prediction `current`, avoiding
      // rows 0..j and prediction i. All dummy rows form one node.
      std::vector<long> parent_row(m, kUnseen);
      std::vector<long> entered_via(n, -1);  // prediction through which a row was reached
      long dummy_entered_via = -1;
      std::vector<char> row_seen(n, 0);
      bool dummy_seen = freed_row == kDummy;
      if (freed_row != kDummy) row_seen[static_cast<std::size_t>(freed_row)] = 1;
      std::deque<long> queue{freed_row};
      bool found = false;
      while (!queue.empty() && !found) {
        const long row = queue.front();
        queue.pop_front();
        for (std::size_t p = 0; p < m; ++p) {
          if (p == i || parent_row[p] != kUnseen || !tight(row, p)) continue;
          parent_row[p] = row;
          if (p == current) {
            found = true;
            break;
          }
          const long next = target_of[p];
          if (next == kDummy) {
            if (!dummy_seen) {
              dummy_seen = true;
              dummy_entered_via = static_cast<long>(p);
              queue.push_back(kDummy);
            }
          } else if (static_cast<std::size_t>(next) > j && !row_seen[static_cast<std::size_t>(next)]) {
            row_seen[static_cast<std::size_t>(next)] = 1;
            entered_via[static_cast<std::size_t>(next)] = static_cast<long>(p);
            queue.push_back(next);
          }
        }
      }
      if (!found) continue;
      // Walk back from `current`: each row on the path takes the prediction it reached.
      std::size_t p = current;
      while (true) {
        const long row = parent_row[p];
        target_of[p] = row;
        if (row != kDummy) pred_of[static_cast<std::size_t>(row)] = static_cast<long>(p);
        if (row == freed_row) break;
        p = static_cast<std::size_t>(row == kDummy ? dummy_entered_via
                                                   : entered_via[static_cast<std::size_t>(row)]);
      }
      pred_of[j] = static_cast<long>(i);
      target_of[i] = static_cast<long>(j);
      break;
    }
  }

  Assignment a;
  a.pairs.reserve(n);
  for (std::size_t t = 0; t < n; ++t) a.pairs.emplace_back(static_cast<std::size_t>(pred_of[t]), t);
  return a;
}

// Exhaustive minimum over all injections of targets into predictions, in
// lexicographic order so the first optimum found is the tie-break winner.
inline Assignment brute_force(const CostMatrix& cost) {
  const std::size_t n = cost.targets(), m = cost.predictions();
  if (n > 8) throw std::invalid_argument("brute_force: at most 8 targets");
  if (m < n) throw std::invalid_argument("brute_force: fewer predictions than targets");
  if (n == 0) return {};
  std::vector<std::size_t> cur(n), best(n);
  std::vector<char> used(m, 0);
  double best_cost = std::numeric_limits<double>::infinity();
  auto rec = [&](auto&& self, std::size_t t, double acc) -> void {
    if (t == n) {
      if (acc < best_cost) {
        best_cost = acc;
        best = cur;
      }
      return;
    }
    for (std::size_t p = 0; p < m; ++p) {
      if (used[p]) continue;
      used[p] = 1;
      cur[t] = p;
      self(self, t + 1, acc + cost(p, t));
      used[p] = 0;
    }
  };
  rec(rec, 0, 0.0);
  Assignment a;
  for (std::size_t t = 0; t < n; ++t) a.pairs.emplace_back(best[t], t);
  return a;
}

}  // namespace dynprop
