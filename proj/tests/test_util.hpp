#pragma once

#include <cmath>
#include <vector>

#include "dynprop/detector.hpp"
#include "dynprop/geometry.hpp"
#include "dynprop/rng.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Entries at least `gap` away from zero, for ops with a kink there.
inline Tensor away_from_zero(Rng& rng, Shape shape, double gap = 1e-3) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) {
    do x = rng.uniform(-1.0, 1.0);
    while (std::abs(x) < gap);
  }
  return Tensor(std::move(shape), std::move(v));
}

inline Box random_box(Rng& rng, double min_size = 0.05) {
  const double w = rng.uniform(min_size, 0.6), h = rng.uniform(min_size, 0.6);
  const double x = rng.uniform(0.0, 1.0 - w), y = rng.uniform(0.0, 1.0 - h);
  return {x, y, x + w, y + h};
}

// A few-thousand-parameter model on 32px images for fast tests.
inline ModelConfig small_config(Arch arch = Arch::Query) {
  ModelConfig c;
  c.arch = arch;
  c.dim = 16;
  c.image_size = 32;
  c.proposals = 12;
  c.theta = 4;
  c.encoder_blocks = 1;
  c.encoder_hidden = 16;
  c.interaction_hidden = 32;
  c.ffn_hidden = 32;
  c.head_hidden = 16;
  return c;
}

}  // namespace dynprop::testing
