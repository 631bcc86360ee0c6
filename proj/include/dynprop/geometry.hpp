#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <tuple>
#include <vector>

#include "dynprop/tensor.hpp"

namespace dynprop {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const Box&) const = default;
};

inline constexpr double kMinBoxSize = 1e-3;
// exp() argument cap for size deltas, ln(1000/16) as in common detectors.
inline constexpr double kMaxLogScale = 4.135166556742356;

inline Box clamp_box(Box b) {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(b.x1), c(b.y1), c(b.x2), c(b.y2)};
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return iw > 0.0 && ih > 0.0 ? iw * ih : 0.0;
}

namespace detail {
// Canonical operand order so symmetric metrics are bit-exact under FMA contraction.
inline bool box_less(const Box& a, const Box& b) {
  return std::tie(a.x1, a.y1, a.x2, a.y2) < std::tie(b.x1, b.y1, b.x2, b.y2);
}
}  // namespace detail

inline double iou(const Box& a, const Box& b) {
  if (detail::box_less(b, a)) return iou(b, a);
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double giou(const Box& a, const Box& b) {
  if (detail::box_less(b, a)) return giou(b, a);
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double v = uni > 0.0 ? inter / uni : 0.0;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = ew * eh;
  if (enclose <= 0.0) return v;
  return v - (enclose - uni) / enclose;
}

inline double l1_box(const Box& a, const Box& b) {
  return std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1) + std::abs(a.x2 - b.x2) + std::abs(a.y2 - b.y2);
}

namespace detail {

struct AxisUpdate {
  double lo = 0.0, hi = 0.0;
  double raw_lo = 0.0, raw_hi = 0.0;
  bool resized = false;  // min-size fix fired; no gradient passes
};

inline AxisUpdate finish_axis(double raw_lo, double raw_hi) {
  AxisUpdate u;
  u.raw_lo = raw_lo;
  u.raw_hi = raw_hi;
  u.lo = std::clamp(raw_lo, 0.0, 1.0);
  u.hi = std::clamp(raw_hi, 0.0, 1.0);
  if (u.hi - u.lo < kMinBoxSize) {
    const double mid = std::clamp(0.5 * (u.lo + u.hi), 0.5 * kMinBoxSize, 1.0 - 0.5 * kMinBoxSize);
    u.lo = mid - 0.5 * kMinBoxSize;
    u.hi = mid + 0.5 * kMinBoxSize;
    u.resized = true;
  }
  return u;
}

// Gradient through the [0,1] clamp. A clamped coordinate still passes a
// gradient whose descent step moves it back into the image, so boxes that
// overshoot the border are not frozen.
inline double clamp_grad(double raw, double g) {
  if (raw >= 0.0 && raw <= 1.0) return g;
  if ((raw < 0.0 && g < 0.0) || (raw > 1.0 && g > 0.0)) return g;
  return 0.0;
}

// Center/size update along one axis. Returns the finished axis plus the
// pieces needed for the backward pass.
struct AxisState {
  double size = 0.0, scale = 1.0, delta_pos = 0.0;
  bool size_clamped = false;
  AxisUpdate out;
};

inline AxisState update_axis(double lo, double hi, double d_pos, double d_size) {
  AxisState s;
  s.size = hi - lo;
  const double center = lo + 0.5 * s.size;
  s.size_clamped = d_size > kMaxLogScale;
  s.scale = std::exp(std::min(d_size, kMaxLogScale));
  s.delta_pos = d_pos;
  const double nc = center + d_pos * s.size;
  const double ns = s.size * s.scale;
  s.out = finish_axis(nc - 0.5 * ns, nc + 0.5 * ns);
  return s;
}

}  // namespace detail

// deltas = (dcx, dcy, dw, dh): centers move by dcx*width, sizes scale by exp(dw).
// The result is clamped to the image with a minimum extent of kMinBoxSize.
inline Box apply_deltas(const Box& base, std::span<const double> deltas) {
  const auto x = detail::update_axis(base.x1, base.x2, deltas[0], deltas[2]);
  const auto y = detail::update_axis(base.y1, base.y2, deltas[1], deltas[3]);
  return {x.out.lo, y.out.lo, x.out.hi, y.out.hi};
}

inline Box box_row(const Tensor& boxes, std::size_t i) {
  const double* p = boxes.values().data() + i * 4;
  return {p[0], p[1], p[2], p[3]};
}

inline std::vector<Box> to_boxes(const Tensor& boxes) {
  std::vector<Box> out(boxes.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = box_row(boxes, i);
  return out;
}

inline Tensor boxes_tensor(std::span<const Box> boxes, bool requires_grad = false) {
  std::vector<double> v;
  v.reserve(boxes.size() * 4);
  for (auto& b : boxes) v.insert(v.end(), {b.x1, b.y1, b.x2, b.y2});
  return Tensor({boxes.size(), 4}, std::move(v), requires_grad);
}

// Differentiable row-wise apply_deltas over [M x 4] boxes and deltas.
inline Tensor apply_deltas(const Tensor& boxes, const Tensor& deltas) {
  detail::require_same_shape(boxes, deltas, "apply_deltas");
  if (boxes.rank() != 2 || boxes.cols() != 4)
    throw ShapeError("apply_deltas: expected [M x 4], got " + shape_str(boxes.shape()));
  const std::size_t m = boxes.rows();
  std::vector<double> v(m * 4);
  std::vector<detail::AxisState> xs(m), ys(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* b = boxes.values().data() + i * 4;
    const double* d = deltas.values().data() + i * 4;
    xs[i] = detail::update_axis(b[0], b[2], d[0], d[2]);
    ys[i] = detail::update_axis(b[1], b[3], d[1], d[3]);
    v[i * 4 + 0] = xs[i].out.lo;
    v[i * 4 + 1] = ys[i].out.lo;
    v[i * 4 + 2] = xs[i].out.hi;
    v[i * 4 + 3] = ys[i].out.hi;
  }
  return make_result(
      {m, 4}, std::move(v), {&boxes, &deltas},
      [boxes, deltas, xs = std::move(xs), ys = std::move(ys)](std::span<const double> g,
                                                              std::span<const double>) {
        auto gb = boxes.grad_sink();
        auto gd = deltas.grad_sink();
        for (std::size_t i = 0; i < xs.size(); ++i) {
          for (int axis = 0; axis < 2; ++axis) {
            const auto& s = axis == 0 ? xs[i] : ys[i];
            if (s.out.resized) continue;
            const double g_lo = detail::clamp_grad(s.out.raw_lo, g[i * 4 + axis]);
            const double g_hi = detail::clamp_grad(s.out.raw_hi, g[i * 4 + 2 + axis]);
            // raw_lo = nc - ns/2, raw_hi = nc + ns/2
            const double g_nc = g_lo + g_hi;
            const double g_ns = 0.5 * (g_hi - g_lo);
            // nc = center + d_pos * size, ns = size * scale
            const double g_size = g_nc * s.delta_pos + g_ns * s.scale;
            const double g_center = g_nc;
            if (!gd.empty()) {
              gd[i * 4 + axis] += g_nc * s.size;
              if (!s.size_clamped) gd[i * 4 + 2 + axis] += g_ns * s.size * s.scale;
            }
            if (!gb.empty()) {
              // center = (lo + hi)/2, size = hi - lo
              gb[i * 4 + axis] += 0.5 * g_center - g_size;
              gb[i * 4 + 2 + axis] += 0.5 * g_center + g_size;
            }
          }
        }
      });
}

namespace detail {

// GIoU of `a` against fixed `b`, with the gradient with respect to a's corners.
inline double giou_with_grad(const Box& a, const Box& b, std::array<double, 4>& grad) {
  grad = {0, 0, 0, 0};
  const double aw = a.x2 - a.x1, ah = a.y2 - a.y1;
  const double area_a = aw * ah, area_b = b.area();
  const double ix1 = std::max(a.x1, b.x1), ix2 = std::min(a.x2, b.x2);
  const double iy1 = std::max(a.y1, b.y1), iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = area_a + area_b - inter;
  const double ex1 = std::min(a.x1, b.x1), ex2 = std::max(a.x2, b.x2);
  const double ey1 = std::min(a.y1, b.y1), ey2 = std::max(a.y2, b.y2);
  const double enclose = (ex2 - ex1) * (ey2 - ey1);
  if (uni <= 0.0 || enclose <= 0.0) return uni > 0.0 ? inter / uni : 0.0;

  // d inter / d a-corners
  std::array<double, 4> d_inter{0, 0, 0, 0};
  if (overlap) {
    if (a.x1 >= b.x1) d_inter[0] = -ih;
    if (a.x2 <= b.x2) d_inter[2] = ih;
    if (a.y1 >= b.y1) d_inter[1] = -iw;
    if (a.y2 <= b.y2) d_inter[3] = iw;
  }
  const std::array<double, 4> d_area{-ah, -aw, ah, aw};
  const double ew = ex2 - ex1, eh = ey2 - ey1;
  std::array<double, 4> d_enc{0, 0, 0, 0};
  if (a.x1 <= b.x1) d_enc[0] = -eh;
  if (a.x2 >= b.x2) d_enc[2] = eh;
  if (a.y1 <= b.y1) d_enc[1] = -ew;
  if (a.y2 >= b.y2) d_enc[3] = ew;

  // giou = inter/uni - 1 + uni/enclose
  for (int k = 0; k < 4; ++k) {
    const double d_uni = d_area[k] - d_inter[k];
    grad[k] = (d_inter[k] * uni - inter * d_uni) / (uni * uni) +
              (d_uni * enclose - uni * d_enc[k]) / (enclose * enclose);
  }
  return inter / uni - 1.0 + uni / enclose;
}

}  // namespace detail

// Sum over rows of (1 - giou(pred_i, target_i)); differentiable in `pred`.
inline Tensor giou_loss_sum(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "giou_loss_sum");
  const std::size_t m = pred.rows();
  std::vector<double> grads(m * 4);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    std::array<double, 4> g;
    total += 1.0 - detail::giou_with_grad(box_row(pred, i), box_row(target, i), g);
    for (int k = 0; k < 4; ++k) grads[i * 4 + k] = -g[k];
  }
  return make_result({1}, {total}, {&pred},
                     [pred, grads = std::move(grads)](std::span<const double> g, std::span<const double>) {
                       auto gp = pred.grad_sink();
                       for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[0] * grads[i];
                     });
}

}  // namespace dynprop
