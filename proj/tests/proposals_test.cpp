#include <gtest/gtest.h>

#include <set>

#include "dynprop/proposals.hpp"
#include "test_util.hpp"

namespace dynprop {
namespace {

TEST(SwitchCount, Examples) {
  const SwitchConfig cfg{300, 4, Strategy::First};
  EXPECT_EQ(switch_count(cfg, 0.25), 75);
  EXPECT_EQ(switch_count(cfg, 0.61), 225);
  EXPECT_EQ(switch_count(cfg, 1.0), 300);
  EXPECT_EQ(switch_count({1000, 4, Strategy::First}, 0.5), 500);
}

TEST(SwitchCount, RejectsOutOfRangeDelta) {
  const SwitchConfig cfg{40, 4, Strategy::First};
  EXPECT_THROW(switch_count(cfg, 0.0), std::invalid_argument);
  EXPECT_THROW(switch_count(cfg, -0.1), std::invalid_argument);
  EXPECT_THROW(switch_count(cfg, 1.01), std::invalid_argument);
}

TEST(SwitchConfig, RejectsIndivisibleTheta) {
  EXPECT_THROW((SwitchConfig{30, 4, Strategy::First}.validate()), std::invalid_argument);
  EXPECT_THROW((SwitchConfig{30, 0, Strategy::First}.validate()), std::invalid_argument);
}

TEST(SwitchCount, SweepGivesThetaMultiples) {
  for (auto [n, theta] : {std::pair{40, 4}, {300, 4}, {60, 3}, {12, 12}, {40, 1}}) {
    const SwitchConfig cfg{n, theta, Strategy::First};
    std::set<int> seen;
    int prev = 0;
    for (int i = 1; i <= 1000; ++i) {
      const int c = switch_count(cfg, i / 1000.0);
      EXPECT_GE(c, prev);
      EXPECT_EQ(c % (n / theta), 0);
      prev = c;
      seen.insert(c);
    }
    EXPECT_EQ(seen.size(), static_cast<std::size_t>(theta)) << n << "/" << theta;
  }
}

TEST(DynamicDelta, Examples) {
  EXPECT_DOUBLE_EQ(dynamic_delta(10, 20), 0.5);
  EXPECT_DOUBLE_EQ(dynamic_delta(50, 20), 1.0);
  EXPECT_DOUBLE_EQ(dynamic_delta(0, 20), 0.0);
  EXPECT_DOUBLE_EQ(dynamic_delta(-1.5, 20), 0.0);
  EXPECT_THROW(dynamic_delta(1, 0), std::invalid_argument);
}

TEST(DynamicCount, Examples) {
  EXPECT_EQ(dynamic_count({300, 4, Strategy::First}, 7, 20), 150);
  EXPECT_EQ(dynamic_count({300, 4, Strategy::First}, 93, 20), 300);
  EXPECT_EQ(dynamic_count({40, 4, Strategy::First}, 0, 8), 10);
}

TEST(DynamicCount, DefaultBuckets) {
  const SwitchConfig cfg{40, 4, Strategy::First};
  const int want[] = {10, 10, 10, 20, 20, 30, 30, 40, 40, 40, 40, 40};
  const double k = ModelConfig{}.k;
  EXPECT_EQ(k, 9.0);
  for (int n = 0; n <= 11; ++n) EXPECT_EQ(dynamic_count(cfg, n, k), want[n]) << n;
}

TEST(DynamicCount, MonotoneInEstimate) {
  const SwitchConfig cfg{40, 4, Strategy::First};
  int prev = 0;
  for (int i = 0; i <= 3000; ++i) {
    const int c = dynamic_count(cfg, i * 0.01, 13.0);
    EXPECT_GE(c, prev);
    EXPECT_GE(c, 10);
    EXPECT_LE(c, 40);
    prev = c;
  }
}

std::vector<std::size_t> range(std::size_t b, std::size_t e) {
  std::vector<std::size_t> v;
  for (auto i = b; i < e; ++i) v.push_back(i);
  return v;
}

TEST(SampleIndices, Examples) {
  EXPECT_EQ(sample_indices(300, 75, Strategy::First), range(0, 75));
  EXPECT_EQ(sample_indices(4, 2, Strategy::Last), (std::vector<std::size_t>{2, 3}));
  const auto bin = sample_indices(300, 150, Strategy::Bin, 4);
  ASSERT_EQ(bin.size(), 150u);
  for (std::size_t b = 0; b < 75; ++b) {
    EXPECT_EQ(bin[2 * b], 4 * b);
    EXPECT_EQ(bin[2 * b + 1], 4 * b + 1);
  }
}

TEST(SampleIndices, Errors) {
  EXPECT_THROW(sample_indices(10, 11, Strategy::First), std::invalid_argument);
  EXPECT_THROW(sample_indices(10, 0, Strategy::First), std::invalid_argument);
  EXPECT_THROW(sample_indices(40, 15, Strategy::Bin, 4), std::invalid_argument);
}

TEST(SampleIndices, SubsetInOrderWithoutDuplicates) {
  for (Strategy s : {Strategy::First, Strategy::Last, Strategy::Bin})
    for (std::size_t count : {10, 20, 30, 40}) {
      const auto idx = sample_indices(40, count, s, 4);
      ASSERT_EQ(idx.size(), count);
      for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i - 1], idx[i]);
      EXPECT_LT(idx.back(), 40u);
    }
}

ProposalBank random_bank(Rng& rng, std::size_t n) {
  std::vector<Box> boxes;
  for (std::size_t i = 0; i < n; ++i) boxes.push_back(testing::random_box(rng));
  return {testing::random_tensor(rng, {n, 6}), boxes_tensor(boxes)};
}

TEST(Sample, RowsComeFromBank) {
  Rng rng(3);
  const ProposalBank bank = random_bank(rng, 40);
  for (Strategy s : {Strategy::First, Strategy::Last, Strategy::Bin}) {
    const auto idx = sample_indices(40, 20, s, 4);
    const SampledProposals sp = sample(bank, 20, s, 4);
    ASSERT_EQ(sp.features.shape(), (Shape{20, 6}));
    ASSERT_EQ(sp.boxes.shape(), (Shape{20, 4}));
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(sp.features.at(r, c), bank.features.at(idx[r], c));
      EXPECT_EQ(box_row(sp.boxes, r), box_row(bank.boxes, idx[r]));
    }
  }
}

TEST(Sample, FirstIsPrefixConsistent) {
  Rng rng(4);
  const ProposalBank bank = random_bank(rng, 40);
  const SampledProposals big = sample(bank, 30, Strategy::First);
  const SampledProposals twice = sample({big.features, big.boxes}, 10, Strategy::First);
  const SampledProposals direct = sample(bank, 10, Strategy::First);
  for (std::size_t i = 0; i < direct.features.size(); ++i) EXPECT_EQ(twice.features[i], direct.features[i]);
  for (std::size_t i = 0; i < direct.boxes.size(); ++i) EXPECT_EQ(twice.boxes[i], direct.boxes[i]);
}

TEST(Sample, GradientReachesOnlySampledRows) {
  Rng rng(5);
  ProposalBank bank = random_bank(rng, 8);
  bank.features.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(sample(bank, 4, Strategy::Bin, 2).features));
  const auto g = bank.features.grad_or_zeros();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(g[r * 6 + c], r % 2 == 0 ? 1.0 : 0.0);
}

ScoredProposals scored() {
  return {{{0, 0, 0.5, 0.5}, {0.1, 0.1, 0.6, 0.6}, {0.2, 0.2, 0.7, 0.7}}, {0.9, 0.5, 0.1}};
}

TEST(SampleScored, FirstTakesTopScores) {
  const ScoredSample s = sample_scored(scored(), 2, Strategy::First);
  ASSERT_EQ(s.boxes.size(), 2u);
  EXPECT_EQ(s.scores, (std::vector<double>{0.9, 0.5}));
  EXPECT_FALSE(s.truncated);
}

TEST(SampleScored, LastTakesLowestScore) {
  const ScoredSample s = sample_scored(scored(), 1, Strategy::Last);
  ASSERT_EQ(s.boxes.size(), 1u);
  EXPECT_EQ(s.boxes[0], scored().boxes[2]);
}

TEST(SampleScored, OversizedRequestReturnsEverythingFlagged) {
  const ScoredSample s = sample_scored(scored(), 5, Strategy::First);
  EXPECT_EQ(s.boxes.size(), 3u);
  EXPECT_TRUE(s.truncated);
}

TEST(Strategy, RoundTripsNames) {
  for (Strategy s : {Strategy::First, Strategy::Last, Strategy::Bin}) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_THROW(parse_strategy("middle"), std::invalid_argument);
}

}  // namespace
}  // namespace dynprop
