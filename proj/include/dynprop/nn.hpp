#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dynprop/rng.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop {

// Named learnable tensors in registration order. Layers hold handles to the
// same nodes, so updating a value here updates the layer.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t) {
    for (auto& [n, _] : entries_)
      if (n == name) throw std::logic_error("duplicate parameter " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const Tensor* find(const std::string& name) const {
    for (auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

inline Tensor uniform_tensor(Rng& rng, Shape shape, double limit) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

// Xavier-uniform weights scaled by `gain`, zero bias.
inline Linear make_linear(ParamStore& store, Rng& rng, const std::string& name, std::size_t in,
                          std::size_t out, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  Linear l;
  l.weight = store.add(name + ".weight", uniform_tensor(rng, {in, out}, limit));
  l.bias = store.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

struct LayerNorm {
  Tensor gain, bias;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

inline LayerNorm make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim) {
  return {store.add(name + ".gain", Tensor::full({dim}, 1.0)), store.add(name + ".bias", Tensor::zeros({dim}))};
}

struct Mlp {
  Linear fc1, fc2;

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

inline Mlp make_mlp(ParamStore& store, Rng& rng, const std::string& name, std::size_t in, std::size_t hidden,
                    std::size_t out) {
  return {make_linear(store, rng, name + ".fc1", in, hidden), make_linear(store, rng, name + ".fc2", hidden, out)};
}

// Single-head scaled dot-product self-attention over the rows of x.
struct SelfAttention {
  Linear q, k, v, o;

  Tensor operator()(const Tensor& x) const {
    const double s = 1.0 / std::sqrt(static_cast<double>(x.cols()));
    const Tensor weights = softmax(scale(matmul(q(x), transpose(k(x))), s), 1);
    return o(matmul(weights, v(x)));
  }
};

inline SelfAttention make_attention(ParamStore& store, Rng& rng, const std::string& name, std::size_t dim) {
  return {make_linear(store, rng, name + ".q", dim, dim), make_linear(store, rng, name + ".k", dim, dim),
          make_linear(store, rng, name + ".v", dim, dim), make_linear(store, rng, name + ".o", dim, dim)};
}

}  // namespace dynprop
