#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynprop/geometry.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop {

enum class Strategy { First, Last, Bin };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::First: return "first";
    case Strategy::Last: return "last";
    case Strategy::Bin: return "bin";
  }
  return "first";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "first") return Strategy::First;
  if (s == "last") return Strategy::Last;
  if (s == "bin") return Strategy::Bin;
  throw std::invalid_argument("unknown sampling strategy '" + std::string(s) + "'");
}

// Total proposal count N split into theta equal configurations.
struct SwitchConfig {
  int total = 40;
  int theta = 4;
  Strategy strategy = Strategy::First;

  int bucket() const { return total / theta; }
  void validate() const {
    if (theta < 1) throw std::invalid_argument("theta must be >= 1");
    if (total < 1) throw std::invalid_argument("proposal count must be >= 1");
    if (total % theta != 0)
      throw std::invalid_argument("proposal count " + std::to_string(total) +
                                  " is not divisible by theta " + std::to_string(theta));
  }
};

namespace detail {
// ceil(ceil(theta * delta) * N / theta) with the bucket count clamped to [1, theta].
inline int bucketed_count(const SwitchConfig& cfg, double delta) {
  cfg.validate();
  auto buckets = static_cast<long>(std::ceil(delta * cfg.theta));
  buckets = std::clamp<long>(buckets, 1, cfg.theta);
  const long num = buckets * cfg.total;
  return static_cast<int>((num + cfg.theta - 1) / cfg.theta);
}
}  // namespace detail

// Proposal count for a switch value delta in (0, 1].
inline int switch_count(const SwitchConfig& cfg, double delta) {
  if (!(delta > 0.0 && delta <= 1.0))
    throw std::invalid_argument("switch delta must lie in (0, 1], got " + std::to_string(delta));
  return detail::bucketed_count(cfg, delta);
}

// min(n_est / K, 1)
inline double dynamic_delta(double n_est, double k) {
  if (!(k > 0.0)) throw std::invalid_argument("K must be positive");
  return std::min(std::max(n_est, 0.0) / k, 1.0);
}

// Proposal count from an estimated object count; never below one bucket.
inline int dynamic_count(const SwitchConfig& cfg, double n_est, double k) {
  return detail::bucketed_count(cfg, dynamic_delta(n_est, k));
}

// Row indices chosen from `total` rows. Bin splits the rows into total/theta
// consecutive buckets of theta rows and keeps the leading count*theta/total
// rows of each bucket.
inline std::vector<std::size_t> sample_indices(std::size_t total, std::size_t count, Strategy strategy,
                                               std::size_t theta = 1) {
  if (count == 0) throw std::invalid_argument("sample: count must be positive");
  if (count > total)
    throw std::invalid_argument("sample: count " + std::to_string(count) + " exceeds " +
                                std::to_string(total) + " proposals");
  std::vector<std::size_t> idx;
  idx.reserve(count);
  switch (strategy) {
    case Strategy::First:
      for (std::size_t i = 0; i < count; ++i) idx.push_back(i);
      break;
    case Strategy::Last:
      for (std::size_t i = total - count; i < total; ++i) idx.push_back(i);
      break;
    case Strategy::Bin: {
      if (theta == 0 || total % theta != 0)
        throw std::invalid_argument("sample(bin): theta must divide the proposal count");
      const std::size_t buckets = total / theta;
      if (count % buckets != 0)
        throw std::invalid_argument("sample(bin): count " + std::to_string(count) +
                                    " is not a multiple of " + std::to_string(buckets) + " buckets");
      const std::size_t per = count / buckets;
      for (std::size_t b = 0; b < buckets; ++b)
        for (std::size_t k = 0; k < per; ++k) idx.push_back(b * theta + k);
      break;
    }
  }
  return idx;
}

// Learnable proposal features [N x d] and boxes [N x 4] of a query-based detector.
struct ProposalBank {
  Tensor features;
  Tensor boxes;

  std::size_t size() const { return features.rows(); }
};

struct SampledProposals {
  Tensor features;
  Tensor boxes;
};

inline SampledProposals sample(const ProposalBank& bank, std::size_t count, Strategy strategy,
                               std::size_t theta = 1) {
  auto idx = sample_indices(bank.size(), count, strategy, theta);
  if (strategy == Strategy::First || strategy == Strategy::Last) {
    const std::size_t b = idx.front(), e = idx.back() + 1;
    return {slice_rows(bank.features, b, e), slice_rows(bank.boxes, b, e)};
  }
  return {gather_rows(bank.features, idx), gather_rows(bank.boxes, std::move(idx))};
}

// Candidate boxes sorted by descending score.
struct ScoredProposals {
  std::vector<Box> boxes;
  std::vector<double> scores;

  std::size_t size() const { return boxes.size(); }
};

struct ScoredSample {
  std::vector<Box> boxes;
  std::vector<double> scores;
  bool truncated = false;  // fewer proposals were available than requested
};

inline ScoredSample sample_scored(const ScoredProposals& props, std::size_t count, Strategy strategy,
                                  std::size_t theta = 1) {
  ScoredSample out;
  if (count >= props.size()) {
    out.boxes = props.boxes;
    out.scores = props.scores;
    out.truncated = count > props.size();
    return out;
  }
  for (auto i : sample_indices(props.size(), count, strategy, theta)) {
    out.boxes.push_back(props.boxes[i]);
    out.scores.push_back(props.scores[i]);
  }
  return out;
}

}  // namespace dynprop
