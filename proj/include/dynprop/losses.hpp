#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "dynprop/data.hpp"
#include "dynprop/detector.hpp"
#include "dynprop/geometry.hpp"
#include "dynprop/matcher.hpp"
#include "dynprop/proposals.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop {

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double est = 1.0;
  double c1 = 0.1;  // ROI-feature distillation
  double c2 = 1.0;  // proposal-feature distillation
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  MatchWeights match() const { return {cls, l1, giou}; }
};

// Unweighted components; total already includes the weights.
struct LossBreakdown {
  double cls = 0.0, l1 = 0.0, giou = 0.0, est = 0.0, dst = 0.0, total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    cls += o.cls;
    l1 += o.l1;
    giou += o.giou;
    est += o.est;
    dst += o.dst;
    total += o.total;
    return *this;
  }
};

namespace detail {

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

// Sum of sigmoid focal loss over all entries; targets are 0/1. alpha < 0
// disables class balancing, gamma = 0 gives plain binary cross-entropy.
inline Tensor sigmoid_focal_sum(const Tensor& logits, const Tensor& targets, double alpha, double gamma) {
  detail::require_same_shape(logits, targets, "sigmoid_focal_sum");
  const std::size_t n = logits.size();
  std::vector<double> dl(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits[i];
    const bool pos = targets[i] > 0.5;
    const double p = sigmoid(x);
    const double a = alpha < 0.0 ? 1.0 : (pos ? alpha : 1.0 - alpha);
    if (pos) {
      const double log_p = -detail::softplus(-x);
      const double w = std::pow(1.0 - p, gamma);
      total += -a * w * log_p;
      dl[i] = a * w * (gamma * p * log_p - (1.0 - p));
    } else {
      const double log_q = -detail::softplus(x);
      const double w = std::pow(p, gamma);
      total += -a * w * log_q;
      dl[i] = -a * w * (gamma * (1.0 - p) * log_q - p);
    }
  }
  return make_result({1}, {total}, {&logits},
                     [logits, dl = std::move(dl)](std::span<const double> g, std::span<const double>) {
                       auto gl = logits.grad_sink();
                       for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * dl[i];
                     });
}

struct Targets {
  std::vector<int> classes;
  std::vector<Box> boxes;

  static Targets of(const Scene& s) { return {s.classes(), s.boxes()}; }
  std::size_t size() const { return boxes.size(); }
};

inline Assignment match_stage(const StageOutput& stage, const Targets& gt, const MatchWeights& w) {
  const auto boxes = stage.box_list();
  return hungarian(build_cost(stage.logits, boxes, gt.classes, gt.boxes, w));
}

struct TaskLoss {
  Tensor cls, l1, giou;  // scalars, normalized by max(1, objects)

  Tensor weighted(const LossWeights& w) const {
    return add(add(scale(cls, w.cls), scale(l1, w.l1)), scale(giou, w.giou));
  }
};

// Task terms of one stage for a given assignment.
inline TaskLoss stage_task_loss(const StageOutput& stage, const Targets& gt, const Assignment& match,
                                const LossWeights& w) {
  const std::size_t m = stage.size(), c = stage.logits.cols(), g = gt.size();
  if (m < g)
    throw std::invalid_argument("set_loss: " + std::to_string(m) + " proposals for " + std::to_string(g) +
                                " objects");
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, g));
  std::vector<double> onehot(m * c, 0.0);
  std::vector<std::size_t> rows;
  for (auto [p, t] : match.pairs) {
    onehot[p * c + static_cast<std::size_t>(gt.classes[t])] = 1.0;
    rows.push_back(p);
  }
  TaskLoss out;
  out.cls = scale(sigmoid_focal_sum(stage.logits, Tensor({m, c}, std::move(onehot)), w.focal_alpha, w.focal_gamma),
                  norm);
  if (g == 0) {
    out.l1 = Tensor::scalar(0.0);
    out.giou = Tensor::scalar(0.0);
    return out;
  }
  const Tensor pred = gather_rows(stage.boxes, rows);
  const Tensor target = boxes_tensor(gt.boxes);
  out.l1 = scale(sum(abs(sub(pred, target))), norm);
  out.giou = scale(giou_loss_sum(pred, target), norm);
  return out;
}

struct SetLoss {
  Tensor total;  // weighted sum over stages
  LossBreakdown parts;
  std::vector<Assignment> matches;
};

// Hungarian-matched focal + L1 + GIoU loss summed over stages.
inline SetLoss set_loss(const std::vector<StageOutput>& stages, const Targets& gt, const LossWeights& w = {}) {
  if (stages.empty()) throw std::invalid_argument("set_loss: no stage outputs");
  SetLoss out;
  for (auto& s : stages) {
    out.matches.push_back(match_stage(s, gt, w.match()));
    const TaskLoss t = stage_task_loss(s, gt, out.matches.back(), w);
    const Tensor weighted = t.weighted(w);
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
    out.parts.cls += t.cls.item();
    out.parts.l1 += t.l1.item();
    out.parts.giou += t.giou.item();
  }
  out.parts.total = out.total.item();
  return out;
}

inline SetLoss set_loss(const StageOutput& stage, const Targets& gt, const LossWeights& w = {}) {
  return set_loss(std::vector<StageOutput>{stage}, gt, w);
}

// (n_est - n_gt)^2 on a [1 x 1] estimate.
inline Tensor count_loss(const Tensor& n_est, double n_gt) {
  return mse(n_est, Tensor::full(n_est.shape(), n_gt));
}

// Sum over stages of c1 * MSE(G(f_t), f_t^d) + c2 * MSE(G(q_t), q_t^d), where
// f are ROI features pooled from each model's own stage boxes and G picks the
// student's rows out of the teacher with the sampling strategy. Teacher
// tensors are used as constants.
inline Tensor distill_loss(const std::vector<StageOutput>& teacher, const std::vector<StageOutput>& student,
                           const FeatureGrid& grid, Strategy strategy, std::size_t theta, double c1 = 0.1,
                           double c2 = 1.0) {
  if (teacher.size() != student.size())
    throw std::invalid_argument("distill_loss: " + std::to_string(teacher.size()) + " teacher stages vs " +
                                std::to_string(student.size()) + " student stages");
  if (teacher.empty()) throw std::invalid_argument("distill_loss: no stages");
  const std::size_t n = teacher.front().size(), nd = student.front().size();
  const auto rows = sample_indices(n, nd, strategy, theta);
  FeatureGrid frozen = grid;
  frozen.features = grid.features.detach();
  Tensor total;
  for (std::size_t t = 0; t < teacher.size(); ++t) {
    const auto teacher_boxes = to_boxes(gather_rows(teacher[t].boxes.detach(), rows));
    const Tensor f_teacher = roi_pool(frozen, teacher_boxes);
    const Tensor q_teacher = gather_rows(teacher[t].features.detach(), rows);
    const Tensor f_student = roi_pool(grid, student[t].box_list());
    const Tensor term = add(scale(mse(f_student, f_teacher), c1), scale(mse(student[t].features, q_teacher), c2));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

struct RpnLoss {
  Tensor objectness;  // mean binary cross-entropy over labelled anchors
  Tensor box_l1;      // L1 of decoded positives, per positive
};

inline constexpr double kRpnPositiveIou = 0.5;
inline constexpr double kRpnNegativeIou = 0.3;

// Anchor labels: positive at IoU >= 0.5 or when best for some object,
// negative below 0.3, ignored otherwise.
inline RpnLoss rpn_loss(const RpnOutput& rpn, std::span<const Box> anchors, const Targets& gt) {
  const std::size_t a = anchors.size(), g = gt.size();
  std::vector<long> assigned(a, -1);
  std::vector<double> best_iou(a, 0.0);
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double v = iou(anchors[i], gt.boxes[j]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        assigned[i] = static_cast<long>(j);
      }
    }
  std::vector<char> positive(a, 0);
  for (std::size_t i = 0; i < a; ++i) positive[i] = best_iou[i] >= kRpnPositiveIou;
  for (std::size_t j = 0; j < g; ++j) {
    std::size_t best = 0;
    double bv = -1.0;
    for (std::size_t i = 0; i < a; ++i) {
      const double v = iou(anchors[i], gt.boxes[j]);
      if (v > bv) {
        bv = v;
        best = i;
      }
    }
    positive[best] = 1;
    assigned[best] = static_cast<long>(j);
  }
  std::vector<std::size_t> labelled, pos_rows;
  std::vector<double> labels;
  std::vector<Box> pos_targets;
  for (std::size_t i = 0; i < a; ++i) {
    if (positive[i]) {
      labelled.push_back(i);
      labels.push_back(1.0);
      pos_rows.push_back(i);
      pos_targets.push_back(gt.boxes[static_cast<std::size_t>(assigned[i])]);
    } else if (best_iou[i] < kRpnNegativeIou) {
      labelled.push_back(i);
      labels.push_back(0.0);
    }
  }
  RpnLoss out;
  const std::size_t nl = labelled.size();
  out.objectness = scale(sigmoid_focal_sum(gather_rows(rpn.objectness, labelled), Tensor({nl, 1}, std::move(labels)),
                                           -1.0, 0.0),
                         1.0 / static_cast<double>(std::max<std::size_t>(1, nl)));
  if (pos_rows.empty()) {
    out.box_l1 = Tensor::scalar(0.0);
  } else {
    const double norm = 1.0 / static_cast<double>(pos_rows.size());
    out.box_l1 = scale(sum(abs(sub(gather_rows(rpn.boxes, pos_rows), boxes_tensor(pos_targets)))), norm);
  }
  return out;
}

}  // namespace dynprop
