#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprop/data.hpp"
#include "dynprop/detector.hpp"
#include "dynprop/geometry.hpp"
#include "dynprop/losses.hpp"
#include "dynprop/parallel.hpp"
#include "dynprop/proposals.hpp"

namespace dynprop {

inline std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// 101-point interpolated AP of one class at one IoU threshold, or nullopt
// when the class has no ground truth. Detections are ranked by score
// (stable in image order) and greedily matched to the best-overlapping
// unmatched ground truth of their image.
inline std::optional<double> class_ap(const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<Targets>& gts, int cls, double iou_threshold) {
  if (dets.size() != gts.size()) throw std::invalid_argument("compute_ap: image count mismatch");
  struct Ranked {
    double score;
    std::size_t image;
    Box box;
  };
  std::vector<Ranked> ranked;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (auto c : gts[i].classes) n_gt += c == cls;
    for (auto& d : dets[i])
      if (d.cls == cls) ranked.push_back({d.score, i, d.box});
  }
  if (n_gt == 0) return std::nullopt;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& g = gts[ranked[r].image];
    long best = -1;
    double best_iou = iou_threshold;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g.classes[j] != cls || used[ranked[r].image][j]) continue;
      const double v = iou(ranked[r].box, g.boxes[j]);
      if (v >= best_iou) {
        best_iou = v;
        best = static_cast<long>(j);
      }
    }
    if (best >= 0) {
      used[ranked[r].image][static_cast<std::size_t>(best)] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  std::size_t k = 0;
  for (int s = 0; s <= 100; ++s) {
    const double r = s / 100.0;
    while (k < recall.size() && recall[k] < r - 1e-12) ++k;
    if (k < recall.size()) total += precision[k];
  }
  return total / 101.0;
}

struct ApResult {
  double ap50 = 0.0;
  double map = 0.0;  // mean over IoU 0.50:0.05:0.95
};

// AP averaged over classes that have ground truth; 0 when none do.
inline double average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts,
                                int classes, double iou_threshold) {
  double s = 0.0;
  int n = 0;
  for (int c = 0; c < classes; ++c)
    if (auto ap = class_ap(dets, gts, c, iou_threshold)) {
      s += *ap;
      ++n;
    }
  return n ? s / n : 0.0;
}

inline ApResult compute_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts,
                           int classes) {
  ApResult r;
  const auto thresholds = map_thresholds();
  for (double t : thresholds) {
    const double ap = average_precision(dets, gts, classes, t);
    if (t == 0.5) r.ap50 = ap;
    r.map += ap;
  }
  r.map /= static_cast<double>(thresholds.size());
  return r;
}

// Fraction of ground-truth objects hit by a same-class detection at IoU >= threshold.
inline double recall_at(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts,
                        double iou_threshold = 0.5) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (std::size_t j = 0; j < gts[i].size(); ++j) {
      ++total;
      for (auto& d : dets[i])
        if (d.cls == gts[i].classes[j] && iou(d.box, gts[i].boxes[j]) >= iou_threshold) {
          ++hit;
          break;
        }
    }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// One evaluated configuration: a fixed count, the estimator, or the true count.
struct EvalConfig {
  std::string name;
  CountMode mode = CountMode::Fixed;
  int count = 0;

  CountPolicy policy_for(const Scene& s) const {
    switch (mode) {
      case CountMode::Fixed: return CountPolicy::fixed(count);
      case CountMode::Estimated: return CountPolicy::estimated();
      case CountMode::Oracle: return CountPolicy::ground_truth(static_cast<double>(s.count()));
    }
    return CountPolicy::fixed(count);
  }
};

// "0.25N" style label for a fixed count.
inline std::string config_label(int count, int total) {
  if (count == total) return "N";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4gN", static_cast<double>(count) / total);
  return buf;
}

inline EvalConfig fixed_config(int count, int total) { return {config_label(count, total), CountMode::Fixed, count}; }
inline EvalConfig auto_config() { return {"auto", CountMode::Estimated, 0}; }
inline EvalConfig oracle_config() { return {"oracle", CountMode::Oracle, 0}; }

// The theta switchable configurations N/theta, 2N/theta, ..., N.
inline std::vector<EvalConfig> switch_configs(const ModelConfig& mc) {
  std::vector<EvalConfig> out;
  for (int b = 1; b <= mc.theta; ++b) out.push_back(fixed_config(b * mc.proposals / mc.theta, mc.proposals));
  return out;
}

struct EvalRow {
  std::string config;
  double count = 0.0;  // mean proposals used
  double ap50 = 0.0, map = 0.0, ar = 0.0;
};

struct Predictions {
  std::vector<std::vector<Detection>> detections;
  std::vector<int> counts;
  std::vector<double> estimates;
};

inline Predictions run_split(const Detector& model, const std::vector<Scene>& split, const EvalConfig& cfg,
                             Strategy strategy, unsigned workers = 0) {
  Predictions p;
  p.detections.resize(split.size());
  p.counts.resize(split.size());
  p.estimates.resize(split.size());
  const auto size = static_cast<std::size_t>(model.config().image_size);
  parallel_for(
      split.size(),
      [&](std::size_t i) {
        auto r = model.detect(rasterize(split[i], size, size), cfg.policy_for(split[i]), strategy);
        p.detections[i] = std::move(r.detections);
        p.counts[i] = r.count;
        p.estimates[i] = r.n_est;
      },
      workers);
  return p;
}

inline std::vector<Targets> split_targets(const std::vector<Scene>& split) {
  std::vector<Targets> t;
  t.reserve(split.size());
  for (auto& s : split) t.push_back(Targets::of(s));
  return t;
}

inline EvalRow evaluate(const Detector& model, const std::vector<Scene>& split, const EvalConfig& cfg,
                        Strategy strategy, unsigned workers = 0) {
  const Predictions p = run_split(model, split, cfg, strategy, workers);
  const auto gts = split_targets(split);
  const ApResult ap = compute_ap(p.detections, gts, model.config().classes);
  EvalRow row;
  row.config = cfg.name;
  row.count = split.empty() ? 0.0
                            : std::accumulate(p.counts.begin(), p.counts.end(), 0.0) /
                                  static_cast<double>(split.size());
  row.ap50 = ap.ap50;
  row.map = ap.map;
  row.ar = recall_at(p.detections, gts, 0.5);
  return row;
}

inline constexpr const char* kEvalHeader = "config,count,ap50,map,ar";

inline std::string format_count(double count) {
  char buf[64];
  if (count == std::floor(count))
    std::snprintf(buf, sizeof(buf), "%.0f", count);
  else
    std::snprintf(buf, sizeof(buf), "%.3f", count);
  return buf;
}

inline std::string eval_csv_row(const EvalRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f", r.config.c_str(), format_count(r.count).c_str(), r.ap50,
                r.map, r.ar);
  return buf;
}

struct CountReport {
  double mae = 0.0;
  double acc4 = 0.0;
};

// acc4 compares configurations through dynamic_count, so the bucket clamp applies.
inline CountReport count_report(std::span<const double> estimates, std::span<const std::size_t> truth,
                                const SwitchConfig& sc, double k) {
  if (estimates.size() != truth.size()) throw std::invalid_argument("count_report: size mismatch");
  CountReport r;
  if (estimates.empty()) return r;
  std::size_t same = 0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double n = static_cast<double>(truth[i]);
    r.mae += std::abs(estimates[i] - n);
    same += dynamic_count(sc, estimates[i], k) == dynamic_count(sc, n, k);
  }
  r.mae /= static_cast<double>(estimates.size());
  r.acc4 = static_cast<double>(same) / static_cast<double>(estimates.size());
  return r;
}

inline CountReport count_report(const Detector& model, const std::vector<Scene>& split, unsigned workers = 0) {
  std::vector<double> est(split.size());
  std::vector<std::size_t> truth(split.size());
  const auto size = static_cast<std::size_t>(model.config().image_size);
  parallel_for(
      split.size(),
      [&](std::size_t i) {
        est[i] = model.estimate_count(model.encode(rasterize(split[i], size, size))).item();
        truth[i] = split[i].count();
      },
      workers);
  return count_report(est, truth, model.config().switch_config(), model.config().k);
}

inline constexpr const char* kCountHeader = "mae,acc4";

inline std::string count_csv_row(const CountReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.mae, r.acc4);
  return buf;
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyRow {
  std::string config;
  double count = 0.0;
  double median_ms = 0.0, p90_ms = 0.0;
  double backbone_ms = 0.0, heads_ms = 0.0;  // medians of the two phases
};

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct BenchOptions {
  std::size_t images = 100;
  int repeats = 3;
  int warmup = 5;
};

// Single-threaded. Configurations are interleaved per image so slow drifts
// in machine speed hit all of them alike. Images are rasterized up front.
inline std::vector<LatencyRow> bench_latency(const Detector& model, const std::vector<Scene>& split,
                                             const std::vector<EvalConfig>& configs, const BenchOptions& opt = {},
                                             std::optional<Strategy> strategy = {}) {
  if (split.empty()) throw std::invalid_argument("bench: empty split");
  if (opt.repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  using clock = std::chrono::steady_clock;
  const Strategy strat = strategy.value_or(model.config().strategy);
  const auto size = static_cast<std::size_t>(model.config().image_size);
  const std::size_t n = std::min(opt.images, split.size());
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < n; ++i) images.push_back(rasterize(split[i], size, size));

  for (int w = 0; w < std::max(5, opt.warmup); ++w)
    for (auto& c : configs) model.detect(images[static_cast<std::size_t>(w) % n], c.policy_for(split[0]), strat);

  // Batch repeated forwards when a single one spans fewer than 10 clock ticks.
  const double tick_ms = 1e3 * static_cast<double>(clock::period::num) / clock::period::den;
  int inner = 1;
  {
    const auto t0 = clock::now();
    model.detect(images[0], configs.front().policy_for(split[0]), strat);
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    while (ms * inner < 10 * tick_ms) inner *= 2;
  }

  struct Samples {
    std::vector<double> total, backbone, heads;
    double count = 0.0;
  };
  std::vector<Samples> samples(configs.size());
  for (int r = 0; r < opt.repeats; ++r)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < configs.size(); ++c) {
        const CountPolicy policy = configs[c].policy_for(split[i]);
        double bb = 0.0, hd = 0.0;
        int used = 0;
        const auto t0 = clock::now();
        for (int k = 0; k < inner; ++k) {
          const auto res = model.detect(images[i], policy, strat);
          bb += res.backbone_ms;
          hd += res.heads_ms;
          used = res.count;
        }
        const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count() / inner;
        samples[c].total.push_back(ms);
        samples[c].backbone.push_back(bb / inner);
        samples[c].heads.push_back(hd / inner);
        samples[c].count += used;
      }
  std::vector<LatencyRow> rows;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    LatencyRow row;
    row.config = configs[c].name;
    row.count = samples[c].count / static_cast<double>(samples[c].total.size());
    row.median_ms = quantile(samples[c].total, 0.5);
    row.p90_ms = quantile(samples[c].total, 0.9);
    row.backbone_ms = quantile(samples[c].backbone, 0.5);
    row.heads_ms = quantile(samples[c].heads, 0.5);
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kBenchHeader = "config,count,median_ms,p90_ms,backbone_ms,heads_ms";

inline std::string bench_csv_row(const LatencyRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%.6f", r.config.c_str(), format_count(r.count).c_str(),
                r.median_ms, r.p90_ms, r.backbone_ms, r.heads_ms);
  return buf;
}

inline double heads_fraction(const LatencyRow& r) {
  const double t = r.backbone_ms + r.heads_ms;
  return t > 0.0 ? r.heads_ms / t : 0.0;
}

// ---------------------------------------------------------------------------
// Sweep over arbitrary proposal counts with First sampling.

struct SweepRow {
  int count = 0;
  double ap50 = 0.0;
  double median_ms = 0.0;
};

inline std::vector<int> sweep_counts(int from, int to, int step) {
  if (from > to) throw std::invalid_argument("sweep: --from " + std::to_string(from) + " exceeds --to " +
                                             std::to_string(to));
  if (step < 1) throw std::invalid_argument("sweep: step must be >= 1");
  std::vector<int> counts;
  for (int c = from; c <= to; c += step) counts.push_back(c);
  return counts;
}

inline std::vector<SweepRow> sweep(const Detector& model, const std::vector<Scene>& split, int from, int to, int step,
                                   const BenchOptions& bench = {}, unsigned workers = 0) {
  const auto counts = sweep_counts(from, to, step);
  if (from < 1 || to > model.config().proposals)
    throw std::invalid_argument("sweep: counts must lie in [1, " + std::to_string(model.config().proposals) + "]");
  std::vector<EvalConfig> configs;
  for (int c : counts) configs.push_back(fixed_config(c, model.config().proposals));
  const auto latency = bench_latency(model, split, configs, bench, Strategy::First);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const EvalRow e = evaluate(model, split, configs[i], Strategy::First, workers);
    rows.push_back({counts[i], e.ap50, latency[i].median_ms});
  }
  return rows;
}

inline constexpr const char* kSweepHeader = "count,ap50,median_ms";

inline std::string sweep_csv_row(const SweepRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f", r.count, r.ap50, r.median_ms);
  return buf;
}

}  // namespace dynprop
