#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dynprop/eval.hpp"
#include "test_util.hpp"

namespace dynprop {
namespace {

using testing::random_box;
using testing::small_config;

Detection det(Box b, int cls, double score) { return {b, cls, score}; }

TEST(ComputeAp, SingleGoodDetection) {
  const std::vector<Targets> gts{{{0}, {{0.1, 0.1, 0.5, 0.5}}}};
  const std::vector<std::vector<Detection>> dets{{det({0.1, 0.1, 0.5, 0.48}, 0, 0.7)}};
  ASSERT_GT(iou(dets[0][0].box, gts[0].boxes[0]), 0.9);
  EXPECT_DOUBLE_EQ(compute_ap(dets, gts, 1).ap50, 1.0);
}

TEST(ComputeAp, FalsePositiveRankedFirst) {
  const std::vector<Targets> gts{{{0}, {{0.1, 0.1, 0.5, 0.5}}}};
  const std::vector<std::vector<Detection>> dets{
      {det({0.6, 0.6, 0.9, 0.9}, 0, 0.9), det({0.1, 0.1, 0.5, 0.5}, 0, 0.8)}};
  EXPECT_DOUBLE_EQ(compute_ap(dets, gts, 1).ap50, 0.5);
}

TEST(ComputeAp, NoDetections) {
  const std::vector<Targets> gts{{{0, 1}, {{0.1, 0.1, 0.5, 0.5}, {0.5, 0.5, 0.9, 0.9}}}};
  const ApResult r = compute_ap({{}}, gts, 2);
  EXPECT_EQ(r.ap50, 0.0);
  EXPECT_EQ(r.map, 0.0);
}

TEST(ComputeAp, ClassesWithoutGroundTruthAreSkipped) {
  const std::vector<Targets> gts{{{1}, {{0.1, 0.1, 0.5, 0.5}}}};
  const std::vector<std::vector<Detection>> dets{{det({0.1, 0.1, 0.5, 0.5}, 1, 0.9), det({0, 0, 1, 1}, 2, 0.99)}};
  EXPECT_DOUBLE_EQ(compute_ap(dets, gts, 3).ap50, 1.0);
  EXPECT_EQ(compute_ap({{}}, {Targets{}}, 3).ap50, 0.0);
}

TEST(ComputeAp, DuplicateDetectionIsFalsePositive) {
  const std::vector<Targets> gts{{{0}, {{0.1, 0.1, 0.5, 0.5}}}};
  const std::vector<std::vector<Detection>> dets{
      {det({0.1, 0.1, 0.5, 0.5}, 0, 0.9), det({0.1, 0.1, 0.5, 0.5}, 0, 0.8)}};
  EXPECT_DOUBLE_EQ(compute_ap(dets, gts, 1).ap50, 1.0);  // the envelope ignores the trailing FP
  EXPECT_DOUBLE_EQ(recall_at(dets, gts), 1.0);
}

TEST(ComputeAp, MapUsesStricterThresholds) {
  const std::vector<Targets> gts{{{0}, {{0.1, 0.1, 0.5, 0.5}}}};
  // IoU 0.82: a hit at 0.50..0.80, a miss at 0.85..0.95.
  const std::vector<std::vector<Detection>> dets{{det({0.1, 0.1, 0.5, 0.428}, 0, 0.9)}};
  ASSERT_NEAR(iou(dets[0][0].box, gts[0].boxes[0]), 0.82, 1e-12);
  const ApResult r = compute_ap(dets, gts, 1);
  EXPECT_DOUBLE_EQ(r.ap50, 1.0);
  EXPECT_NEAR(r.map, 0.7, 1e-12);
}

// Exhaustive reference: explicit PR points, max precision at recall >= r.
double reference_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<Targets>& gts, int cls,
                    double thr, bool& has_gt) {
  struct Item {
    double score;
    std::size_t image, index;
  };
  std::vector<Item> items;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    n_gt += static_cast<std::size_t>(std::count(gts[i].classes.begin(), gts[i].classes.end(), cls));
    for (std::size_t k = 0; k < dets[i].size(); ++k)
      if (dets[i][k].cls == cls) items.push_back({dets[i][k].score, i, k});
  }
  has_gt = n_gt > 0;
  if (!has_gt) return 0.0;
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::pair(a.image, a.index) < std::pair(b.image, b.index);
  });
  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
  std::vector<std::size_t> tps;
  std::size_t tp = 0;
  for (const Item& it : items) {
    const Box& b = dets[it.image][it.index].box;
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts[it.image].size(); ++j) {
      if (gts[it.image].classes[j] != cls || taken[it.image][j]) continue;
      const double v = iou(b, gts[it.image].boxes[j]);
      if (v >= thr && v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best >= 0.0) {
      taken[it.image][best_j] = true;
      ++tp;
    }
    tps.push_back(tp);
  }
  double total = 0.0;
  for (std::size_t s = 0; s <= 100; ++s) {
    double p = 0.0;
    for (std::size_t r = 0; r < tps.size(); ++r)
      if (tps[r] * 100 >= s * n_gt) p = std::max(p, static_cast<double>(tps[r]) / static_cast<double>(r + 1));
    total += p;
  }
  return total / 101.0;
}

TEST(ComputeAp, AgreesWithExhaustiveReference) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t images = 1 + rng.uniform_int(2);
    std::vector<Targets> gts(images);
    std::vector<std::vector<Detection>> dets(images);
    for (std::size_t i = 0; i < images; ++i) {
      const std::size_t g = rng.uniform_int(4), d = rng.uniform_int(6);
      for (std::size_t j = 0; j < g; ++j) {
        gts[i].boxes.push_back(random_box(rng));
        gts[i].classes.push_back(static_cast<int>(rng.uniform_int(2)));
      }
      for (std::size_t k = 0; k < d; ++k) {
        // Jittered copies of ground truth mixed with random boxes; coarse scores force ties.
        Box b = random_box(rng);
        if (g > 0 && rng.uniform() < 0.6) {
          b = gts[i].boxes[rng.uniform_int(g)];
          b.x2 = std::min(1.0, b.x2 + rng.uniform(0.0, 0.1));
        }
        dets[i].push_back(det(b, static_cast<int>(rng.uniform_int(2)), static_cast<double>(rng.uniform_int(4)) / 4));
      }
    }
    for (double thr : {0.5, 0.75})
      for (int cls = 0; cls < 2; ++cls) {
        bool has_gt = false;
        const double ref = reference_ap(dets, gts, cls, thr, has_gt);
        const auto got = class_ap(dets, gts, cls, thr);
        ASSERT_EQ(got.has_value(), has_gt);
        if (has_gt) {
          EXPECT_EQ(*got, ref) << "trial " << trial;
          EXPECT_GE(*got, 0.0);
          EXPECT_LE(*got, 1.0);
        }
      }
  }
}

TEST(RecallAt, SameClassOnly) {
  const std::vector<Targets> gts{{{0, 1}, {{0.1, 0.1, 0.5, 0.5}, {0.5, 0.5, 0.9, 0.9}}}};
  const std::vector<std::vector<Detection>> dets{{det({0.1, 0.1, 0.5, 0.5}, 0, 0.1), det({0.5, 0.5, 0.9, 0.9}, 0, 0.9)}};
  EXPECT_DOUBLE_EQ(recall_at(dets, gts), 0.5);
}

TEST(CountReport, PerfectEstimator) {
  const std::vector<std::size_t> truth{0, 3, 4, 7, 10};
  const std::vector<double> est{0, 3, 4, 7, 10};
  const CountReport r = count_report(est, truth, {40, 4, Strategy::First}, 13.0);
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_EQ(r.acc4, 1.0);
}

TEST(CountReport, ConstantEstimateAtK) {
  const SwitchConfig sc{40, 4, Strategy::First};
  for (double k : {8.0, 13.0, 20.0}) {
    std::vector<std::size_t> truth;
    for (std::size_t n = 0; n <= 12; ++n)
      for (std::size_t rep = 0; rep <= n % 3; ++rep) truth.push_back(n);
    const std::vector<double> est(truth.size(), k);
    // Brute force: the estimate K selects the full configuration, so only images
    // whose true count also maps to N agree.
    std::size_t agree = 0;
    for (auto n : truth) agree += static_cast<double>(n) >= 0.75 * k + 1e-9 || static_cast<double>(n) >= k;
    const CountReport r = count_report(est, truth, sc, k);
    EXPECT_DOUBLE_EQ(r.acc4, static_cast<double>(agree) / static_cast<double>(truth.size())) << k;
    double mae = 0.0;
    for (auto n : truth) mae += std::abs(k - static_cast<double>(n));
    EXPECT_NEAR(r.mae, mae / static_cast<double>(truth.size()), 1e-12);
  }
}

TEST(CountReport, BucketClampTreatsLowCountsAlike) {
  const std::vector<std::size_t> truth{0, 1, 2};
  const std::vector<double> est{3.0, 0.0, 0.4};
  EXPECT_EQ(count_report(est, truth, {40, 4, Strategy::First}, 13.0).acc4, 1.0);
}

TEST(ConfigLabel, Names) {
  EXPECT_EQ(config_label(40, 40), "N");
  EXPECT_EQ(config_label(10, 40), "0.25N");
  EXPECT_EQ(config_label(30, 40), "0.75N");
  const auto cfgs = switch_configs(ModelConfig{});
  ASSERT_EQ(cfgs.size(), 4u);
  EXPECT_EQ(cfgs[0].count, 10);
  EXPECT_EQ(cfgs[3].name, "N");
}

TEST(Csv, RowFormats) {
  EXPECT_EQ(eval_csv_row({"0.5N", 20, 0.5, 0.25, 0.75}), "0.5N,20,0.500000,0.250000,0.750000");
  EXPECT_EQ(eval_csv_row({"auto", 17.5, 0, 0, 0}), "auto,17.500,0.000000,0.000000,0.000000");
  EXPECT_EQ(count_csv_row({1.25, 0.9}), "1.250000,0.900000");
  EXPECT_EQ(sweep_csv_row({12, 0.5, 1.5}), "12,0.500000,1.500000");
  EXPECT_EQ(bench_csv_row({"N", 40, 2, 3, 1, 1}), "N,40,2.000000,3.000000,1.000000,1.000000");
  EXPECT_EQ(std::string(kEvalHeader), "config,count,ap50,map,ar");
  EXPECT_EQ(std::string(kCountHeader), "mae,acc4");
  EXPECT_EQ(std::string(kBenchHeader), "config,count,median_ms,p90_ms,backbone_ms,heads_ms");
  EXPECT_EQ(std::string(kSweepHeader), "count,ap50,median_ms");
}

TEST(Quantile, Interpolates) {
  EXPECT_EQ(quantile({3.0}, 0.9), 3.0);
  EXPECT_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_NEAR(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, 0.9), 10.0, 1e-12);
}

std::vector<Scene> split(std::size_t n) {
  SceneOptions opt;
  opt.max_objects = 3;
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(500 + i, opt));
  return out;
}

TEST(Evaluate, DeterministicAcrossWorkerCounts) {
  const Detector m(small_config(), 2);
  const auto val = split(12);
  const EvalRow a = evaluate(m, val, fixed_config(12, 12), Strategy::First, 1);
  const EvalRow b = evaluate(m, val, fixed_config(12, 12), Strategy::First, 3);
  EXPECT_EQ(a.ap50, b.ap50);
  EXPECT_EQ(a.map, b.map);
  EXPECT_EQ(a.ar, b.ar);
  EXPECT_EQ(a.count, 12.0);
  const EvalRow o = evaluate(m, val, oracle_config(), Strategy::First, 1);
  double mean = 0.0;
  for (auto& s : val) mean += dynamic_count(m.config().switch_config(), static_cast<double>(s.count()), m.config().k);
  EXPECT_DOUBLE_EQ(o.count, mean / static_cast<double>(val.size()));
}

TEST(CountReport, ModelOverloadMatchesEstimates) {
  const Detector m(small_config(), 3);
  const auto val = split(6);
  std::vector<double> est;
  std::vector<std::size_t> truth;
  for (auto& s : val) {
    est.push_back(m.estimate_count(m.encode(rasterize(s, 32, 32))).item());
    truth.push_back(s.count());
  }
  const CountReport a = count_report(m, val, 2);
  const CountReport b = count_report(est, truth, m.config().switch_config(), m.config().k);
  EXPECT_EQ(a.mae, b.mae);
  EXPECT_EQ(a.acc4, b.acc4);
}

TEST(Bench, SingleRepeatStillReports) {
  const Detector m(small_config(), 4);
  const auto rows = bench_latency(m, split(3), switch_configs(m.config()), BenchOptions{3, 1, 5});
  ASSERT_EQ(rows.size(), 4u);
  for (auto& r : rows) {
    EXPECT_GT(r.median_ms, 0.0);
    EXPECT_GE(r.p90_ms, r.median_ms);
    EXPECT_GT(r.backbone_ms, 0.0);
    EXPECT_GT(r.heads_ms, 0.0);
    EXPECT_GT(heads_fraction(r), 0.0);
    EXPECT_LT(heads_fraction(r), 1.0);
  }
  EXPECT_EQ(rows[0].count, 3.0);
  EXPECT_THROW(bench_latency(m, {}, switch_configs(m.config())), std::invalid_argument);
  EXPECT_THROW(bench_latency(m, split(1), switch_configs(m.config()), BenchOptions{1, 0, 5}), std::invalid_argument);
}

TEST(Sweep, CountsAndErrors) {
  EXPECT_EQ(sweep_counts(10, 40, 1).size(), 31u);
  EXPECT_EQ(sweep_counts(10, 40, 5).size(), 7u);
  EXPECT_EQ(sweep_counts(7, 7, 3), std::vector<int>{7});
  EXPECT_THROW(sweep_counts(20, 10, 1), std::invalid_argument);
  EXPECT_THROW(sweep_counts(1, 10, 0), std::invalid_argument);
}

TEST(Sweep, SinglePointEqualsEvaluate) {
  const Detector m(small_config(), 5);
  const auto val = split(5);
  const auto rows = sweep(m, val, 12, 12, 1, BenchOptions{2, 1, 5}, 1);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].ap50, evaluate(m, val, fixed_config(12, 12), Strategy::First, 1).ap50);
  EXPECT_THROW(sweep(m, val, 5, 13, 1), std::invalid_argument);
}

}  // namespace
}  // namespace dynprop
