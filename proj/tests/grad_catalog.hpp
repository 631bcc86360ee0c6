#pragma once

#include <functional>
#include <vector>

#include "dynprop/rng.hpp"
#include "dynprop/tensor.hpp"
#include "test_util.hpp"

// Every differentiable tensor op as a scalar function of one input.

namespace dynprop::testing {

struct OpCase {
  const char* name;
  std::function<Tensor(const Tensor&, Rng&)> f;  // random fixed operands drawn from rng
  Shape shape;
  bool avoid_zero = false;
};

// Weighted sum so every output coordinate contributes a distinct gradient.
inline Tensor weighted(const Tensor& y, Rng& r) { return sum(mul(y, random_tensor(r, y.shape()))); }

inline const std::vector<OpCase> kOps = {
    {"add", [](const Tensor& x, Rng& r) { return weighted(add(x, random_tensor(r, x.shape())), r); }, {3, 4}},
    {"sub", [](const Tensor& x, Rng& r) { return weighted(sub(random_tensor(r, x.shape()), x), r); }, {3, 4}},
    {"mul", [](const Tensor& x, Rng& r) { return weighted(mul(x, random_tensor(r, x.shape())), r); }, {3, 4}},
    {"mul_self", [](const Tensor& x, Rng& r) { return weighted(mul(x, x), r); }, {3, 4}},
    {"scale", [](const Tensor& x, Rng& r) { return weighted(scale(x, -2.5), r); }, {3, 4}},
    {"matmul_left", [](const Tensor& x, Rng& r) { return weighted(matmul(x, random_tensor(r, {4, 5})), r); }, {3, 4}},
    {"matmul_right", [](const Tensor& x, Rng& r) { return weighted(matmul(random_tensor(r, {2, 3}), x), r); }, {3, 4}},
    {"linear", [](const Tensor& x, Rng& r) {
       return weighted(linear(x, random_tensor(r, {4, 6}), random_tensor(r, {6})), r);
     }, {3, 4}},
    {"linear_weight", [](const Tensor& w, Rng& r) {
       return weighted(linear(random_tensor(r, {5, 3}), w, random_tensor(r, {4})), r);
     }, {3, 4}},
    {"linear_bias", [](const Tensor& b, Rng& r) {
       return weighted(linear(random_tensor(r, {5, 3}), random_tensor(r, {3, 4}), b), r);
     }, {4}},
    {"transpose", [](const Tensor& x, Rng& r) { return weighted(transpose(x), r); }, {3, 4}},
    {"concat_rows", [](const Tensor& x, Rng& r) { return weighted(concat({random_tensor(r, {2, 4}), x}, 0), r); }, {3, 4}},
    {"concat_cols", [](const Tensor& x, Rng& r) { return weighted(concat({x, random_tensor(r, {3, 2}), x}, 1), r); }, {3, 4}},
    {"slice_rows", [](const Tensor& x, Rng& r) { return weighted(slice_rows(x, 1, 3), r); }, {3, 4}},
    {"gather_rows", [](const Tensor& x, Rng& r) { return weighted(gather_rows(x, {2, 0, 2}), r); }, {3, 4}},
    {"tile_rows", [](const Tensor& x, Rng& r) { return weighted(tile_rows(x, 3), r); }, {1, 4}},
    {"reshape", [](const Tensor& x, Rng& r) { return weighted(reshape(x, {2, 6}), r); }, {3, 4}},
    {"relu", [](const Tensor& x, Rng& r) { return weighted(relu(x), r); }, {3, 4}, true},
    {"abs", [](const Tensor& x, Rng& r) { return weighted(abs(x), r); }, {3, 4}, true},
    {"sigmoid", [](const Tensor& x, Rng& r) { return weighted(sigmoid(scale(x, 3.0)), r); }, {3, 4}},
    {"softmax_rows", [](const Tensor& x, Rng& r) { return weighted(softmax(scale(x, 2.0), 1), r); }, {3, 4}},
    {"softmax_cols", [](const Tensor& x, Rng& r) { return weighted(softmax(scale(x, 2.0), 0), r); }, {3, 4}},
    {"layer_norm", [](const Tensor& x, Rng& r) {
       return weighted(layer_norm(x, random_tensor(r, {4}, 0.5, 1.5), random_tensor(r, {4})), r);
     }, {3, 4}},
    {"layer_norm_gain", [](const Tensor& g, Rng& r) {
       return weighted(layer_norm(random_tensor(r, {3, 4}), g, random_tensor(r, {4})), r);
     }, {4}},
    {"mean", [](const Tensor& x, Rng&) { return mean(x); }, {3, 4}},
    {"sum", [](const Tensor& x, Rng&) { return sum(x); }, {3, 4}},
    {"reduce_mean_0", [](const Tensor& x, Rng& r) { return weighted(reduce_mean(x, 0), r); }, {3, 4}},
    {"reduce_mean_1", [](const Tensor& x, Rng& r) { return weighted(reduce_mean(x, 1), r); }, {3, 4}},
    {"reduce_max_0", [](const Tensor& x, Rng& r) { return weighted(reduce_max(x, 0), r); }, {3, 4}},
    {"reduce_max_1", [](const Tensor& x, Rng& r) { return weighted(reduce_max(x, 1), r); }, {3, 4}},
    {"mse", [](const Tensor& x, Rng& r) { return mse(x, random_tensor(r, x.shape())); }, {3, 4}},
};

// Relative error of op.f at the given seed, with inputs drawn as in the unit tests.
inline double op_grad_error(const OpCase& op, std::uint64_t seed) {
  Rng data(seed * 7919 + 1);
  const Tensor x = op.avoid_zero ? away_from_zero(data, op.shape) : random_tensor(data, op.shape);
  const std::uint64_t operand_seed = seed + 1000;
  return grad_check([&](const Tensor& t) {
    Rng r(operand_seed);
    return op.f(t, r);
  }, x, 1e-6);
}

}  // namespace dynprop::testing
