#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dynprop/geometry.hpp"
#include "dynprop/nn.hpp"
#include "dynprop/proposals.hpp"
#include "dynprop/rng.hpp"
#include "dynprop/tensor.hpp"

namespace dynprop {

enum class Arch { Query, TwoStage };
enum class Mode { Individual, Switchable, Dynamic };

inline std::string_view to_string(Arch a) { return a == Arch::Query ? "query" : "two_stage"; }
inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::Individual: return "individual";
    case Mode::Switchable: return "switchable";
    case Mode::Dynamic: return "dynamic";
  }
  return "individual";
}

inline Arch parse_arch(std::string_view s) {
  if (s == "query") return Arch::Query;
  if (s == "two_stage") return Arch::TwoStage;
  throw std::invalid_argument("unknown arch '" + std::string(s) + "' (query|two_stage)");
}

inline Mode parse_mode(std::string_view s) {
  if (s == "individual") return Mode::Individual;
  if (s == "switchable") return Mode::Switchable;
  if (s == "dynamic") return Mode::Dynamic;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "' (individual|switchable|dynamic)");
}

// Everything needed to rebuild a model and run it; stored in checkpoints.
struct ModelConfig {
  Arch arch = Arch::Query;
  Mode mode = Mode::Individual;
  int proposals = 40;  // N
  int theta = 4;
  double k = 9.0;
  Strategy strategy = Strategy::First;
  int stages = 3;
  int dim = 64;
  int classes = 3;
  int image_size = 64;
  int patch = 8;
  int anchors = 3;
  int encoder_blocks = 2;
  int encoder_hidden = 64;
  int interaction_hidden = 256;
  int ffn_hidden = 128;
  int head_hidden = 128;
  bool estimator_detach = false;

  int grid() const { return image_size / patch; }
  SwitchConfig switch_config() const { return {proposals, theta, strategy}; }

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v < 1) throw std::invalid_argument(std::string(what) + " must be >= 1");
    };
    positive(proposals, "proposals");
    positive(theta, "theta");
    positive(stages, "stages");
    positive(dim, "dim");
    positive(classes, "classes");
    positive(patch, "patch");
    positive(anchors, "anchors");
    positive(encoder_hidden, "encoder_hidden");
    positive(interaction_hidden, "interaction_hidden");
    positive(ffn_hidden, "ffn_hidden");
    positive(head_hidden, "head_hidden");
    if (encoder_blocks < 0) throw std::invalid_argument("encoder_blocks must be >= 0");
    if (image_size < patch || image_size % patch != 0)
      throw std::invalid_argument("image size " + std::to_string(image_size) + " is not divisible by patch " +
                                  std::to_string(patch));
    if (!(k > 0.0)) throw std::invalid_argument("K must be positive");
    if (dim < 2) throw std::invalid_argument("dim must be >= 2");
    switch_config().validate();
    if (arch == Arch::TwoStage && proposals > grid() * grid() * anchors)
      throw std::invalid_argument("two-stage model has only " + std::to_string(grid() * grid() * anchors) +
                                  " candidates for " + std::to_string(proposals) + " proposals");
  }
};

// Backbone output: [G*G x d] features, cell (gx, gy) at row gy*G + gx.
struct FeatureGrid {
  Tensor features;
  std::size_t side = 0;
  std::size_t height = 0, width = 0;

  std::size_t dim() const { return features.cols(); }
  Shape shape() const { return {side, side, dim()}; }
};

struct StageOutput {
  Tensor features;  // [M x d]
  Tensor boxes;     // [M x 4]
  Tensor logits;    // [M x C]

  std::size_t size() const { return features.rows(); }
  std::vector<Box> box_list() const { return to_boxes(boxes); }
};

namespace detail {

inline std::vector<std::size_t> pooled_cells(std::size_t side, const Box& b) {
  std::vector<std::size_t> cells;
  const double g = static_cast<double>(side);
  for (std::size_t gy = 0; gy < side; ++gy) {
    const double cy = (static_cast<double>(gy) + 0.5) / g;
    if (cy < b.y1 || cy > b.y2) continue;
    for (std::size_t gx = 0; gx < side; ++gx) {
      const double cx = (static_cast<double>(gx) + 0.5) / g;
      if (cx >= b.x1 && cx <= b.x2) cells.push_back(gy * side + gx);
    }
  }
  if (cells.empty()) {
    auto nearest = [&](double c) {
      return static_cast<std::size_t>(std::clamp(std::floor(c * g), 0.0, g - 1.0));
    };
    cells.push_back(nearest(0.5 * (b.y1 + b.y2)) * side + nearest(0.5 * (b.x1 + b.x2)));
  }
  return cells;
}

}  // namespace detail

// [M x d]: per box, the mean feature of cells whose centers lie inside the
// box, or the cell nearest to the box center when there are none.
// Differentiable with respect to the grid features only.
inline Tensor roi_pool(const FeatureGrid& grid, std::span<const Box> boxes) {
  const std::size_t d = grid.dim(), m = boxes.size();
  if (m == 0) throw ShapeError("roi_pool: no boxes");
  std::vector<std::vector<std::size_t>> cells(m);
  std::vector<double> v(m * d, 0.0);
  const double* f = grid.features.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    cells[i] = detail::pooled_cells(grid.side, boxes[i]);
    const double w = 1.0 / static_cast<double>(cells[i].size());
    double* out = v.data() + i * d;
    for (auto c : cells[i])
      for (std::size_t j = 0; j < d; ++j) out[j] += f[c * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] *= w;
  }
  const Tensor& features = grid.features;
  return make_result({m, d}, std::move(v), {&features},
                     [features, cells = std::move(cells), d](std::span<const double> g, std::span<const double>) {
                       auto gf = features.grad_sink();
                       for (std::size_t i = 0; i < cells.size(); ++i) {
                         const double w = 1.0 / static_cast<double>(cells[i].size());
                         for (auto c : cells[i])
                           for (std::size_t j = 0; j < d; ++j) gf[c * d + j] += w * g[i * d + j];
                       }
                     });
}

inline Tensor roi_pool(const FeatureGrid& grid, const Box& box) {
  return reshape(roi_pool(grid, std::span<const Box>(&box, 1)), {grid.dim()});
}

// Patches in row-major cell order, each flattened as (channel, row, column).
inline Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || image.shape()[0] != 3)
    throw ShapeError("encode: expected a [3 x H x W] image, got " + shape_str(image.shape()));
  const std::size_t h = image.shape()[1], w = image.shape()[2];
  if (h % patch != 0 || w % patch != 0 || h != w)
    throw ShapeError("encode: image " + shape_str(image.shape()) + " is not a square multiple of patch " +
                     std::to_string(patch));
  const std::size_t side = h / patch, plen = 3 * patch * patch;
  std::vector<double> v(side * side * plen);
  const double* src = image.values().data();
  for (std::size_t gy = 0; gy < side; ++gy)
    for (std::size_t gx = 0; gx < side; ++gx) {
      double* out = v.data() + (gy * side + gx) * plen;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            *out++ = src[c * h * w + (gy * patch + py) * w + gx * patch + px];
    }
  return Tensor({side * side, plen}, std::move(v));
}

struct EncoderBlock {
  LayerNorm ln1;
  SelfAttention attn;
  LayerNorm ln2;
  Mlp mlp;

  Tensor operator()(const Tensor& x) const {
    const Tensor y = add(x, attn(ln1(x)));
    return add(y, mlp(ln2(y)));
  }
};

struct QueryStage {
  SelfAttention attn;
  LayerNorm ln_attn;
  Mlp interact;
  LayerNorm ln_interact;
  Mlp ffn;
  LayerNorm ln_ffn;
  Mlp box_head;
  Linear cls_head;
};

struct TwoStageParts {
  Linear rpn_hidden;
  Linear rpn_out;  // per cell: A objectness logits then A x 4 deltas
  Linear head_fc1, head_fc2;
  Linear head_cls, head_box;
  std::vector<Box> anchors;  // cell-major, anchor-minor
};

struct RpnOutput {
  Tensor objectness;  // [G*G*A x 1]
  Tensor boxes;       // [G*G*A x 4] decoded candidates
  ScoredProposals ranked;
};

enum class CountMode { Fixed, Estimated, Oracle };

struct CountPolicy {
  CountMode mode = CountMode::Fixed;
  int count = 0;          // Fixed
  double oracle = 0.0;    // Oracle: ground-truth object count

  static CountPolicy fixed(int n) { return {CountMode::Fixed, n, 0.0}; }
  static CountPolicy estimated() { return {CountMode::Estimated, 0, 0.0}; }
  static CountPolicy ground_truth(double n) { return {CountMode::Oracle, 0, n}; }
};

struct Detection {
  Box box;
  int cls = 0;
  double score = 0.0;
};

struct DetectResult {
  std::vector<Detection> detections;
  int count = 0;        // proposals used
  double n_est = -1.0;  // estimator output, when it ran
  double backbone_ms = 0.0;
  double heads_ms = 0.0;
};

inline constexpr double kAnchorSizes[] = {0.1, 0.15, 0.22};
inline constexpr double kClassPrior = 0.01;

class Detector {
 public:
  Detector(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));
    build(rng);
  }

  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;
  Detector(Detector&&) = default;
  Detector& operator=(Detector&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ProposalBank& bank() const { return bank_; }

  FeatureGrid encode(const Tensor& image) const {
    const auto patch = static_cast<std::size_t>(cfg_.patch);
    const Tensor patches = patchify(image, patch);
    const std::size_t side = image.shape()[1] / patch;
    if (side * side != pos_embed_.rows())
      throw ShapeError("encode: model expects " + std::to_string(cfg_.image_size) + "px images, got " +
                       shape_str(image.shape()));
    Tensor x = add(patch_embed_(patches), pos_embed_);
    for (auto& block : blocks_) x = block(x);
    return {final_ln_(x), side, image.shape()[1], image.shape()[2]};
  }

  StageOutput refine_stage(std::size_t t, const FeatureGrid& grid, const Tensor& q, const Tensor& boxes) const {
    const QueryStage& s = stages_.at(t);
    const Tensor attended = s.ln_attn(add(q, s.attn(q)));
    const auto box_list = to_boxes(boxes);
    const Tensor pooled = roi_pool(grid, box_list);
    Tensor h = s.ln_interact(add(attended, s.interact(concat({attended, pooled}, 1))));
    h = s.ln_ffn(add(h, s.ffn(h)));
    return {h, apply_deltas(boxes, s.box_head(h)), s.cls_head(h)};
  }

  // Stage t>0 receives detached boxes from stage t-1; features stay connected.
  std::vector<StageOutput> forward_cascade(const FeatureGrid& grid, const SampledProposals& start,
                                           std::size_t stages = 0) const {
    if (stages == 0) stages = stages_.size();
    if (stages > stages_.size()) throw std::invalid_argument("forward_cascade: model has fewer stages");
    std::vector<StageOutput> out;
    Tensor q = start.features, b = start.boxes;
    for (std::size_t t = 0; t < stages; ++t) {
      out.push_back(refine_stage(t, grid, q, b));
      q = out.back().features;
      b = out.back().boxes.detach();
    }
    return out;
  }

  // Query-arch forward with `count` proposals picked by the model's strategy.
  std::vector<StageOutput> forward_query(const FeatureGrid& grid, int count) const {
    return forward_query(grid, count, cfg_.strategy);
  }

  std::vector<StageOutput> forward_query(const FeatureGrid& grid, int count, Strategy strategy) const {
    require_arch(Arch::Query, "forward_query");
    return forward_cascade(grid, sample(bank_, static_cast<std::size_t>(count), strategy,
                                        static_cast<std::size_t>(cfg_.theta)));
  }

  RpnOutput rpn(const FeatureGrid& grid) const {
    require_arch(Arch::TwoStage, "two_stage_propose");
    const auto& p = *two_stage_;
    const std::size_t cells = grid.features.rows(), a = static_cast<std::size_t>(cfg_.anchors);
    const Tensor raw = p.rpn_out(relu(p.rpn_hidden(grid.features)));  // [cells x A*5]
    std::vector<std::size_t> obj_idx, delta_idx;
    for (std::size_t c = 0; c < cells; ++c)
      for (std::size_t k = 0; k < a; ++k) {
        obj_idx.push_back(c * a * 5 + k);
        for (std::size_t j = 0; j < 4; ++j) delta_idx.push_back(c * a * 5 + a + k * 4 + j);
      }
    const Tensor flat = reshape(raw, {cells * a * 5, 1});
    RpnOutput out;
    out.objectness = gather_rows(flat, obj_idx);
    const Tensor deltas = reshape(gather_rows(flat, delta_idx), {cells * a, 4});
    out.boxes = apply_deltas(boxes_tensor(p.anchors), deltas);
    std::vector<std::size_t> order(cells * a);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto scores = out.objectness.values();
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
    for (auto i : order) {
      out.ranked.boxes.push_back(box_row(out.boxes, i));
      out.ranked.scores.push_back(sigmoid(scores[i]));
    }
    return out;
  }

  ScoredProposals two_stage_propose(const FeatureGrid& grid) const { return rpn(grid).ranked; }

  std::span<const Box> anchors() const {
    require_arch(Arch::TwoStage, "anchors");
    return two_stage_->anchors;
  }

  // The model's N candidates: the top-N of the ranked list.
  ScoredProposals top_proposals(const ScoredProposals& ranked) const {
    ScoredProposals top;
    const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(cfg_.proposals));
    top.boxes.assign(ranked.boxes.begin(), ranked.boxes.begin() + static_cast<long>(n));
    top.scores.assign(ranked.scores.begin(), ranked.scores.begin() + static_cast<long>(n));
    return top;
  }

  StageOutput two_stage_head(const FeatureGrid& grid, std::span<const Box> boxes) const {
    require_arch(Arch::TwoStage, "two_stage_head");
    const auto& p = *two_stage_;
    const Tensor h = relu(p.head_fc2(relu(p.head_fc1(roi_pool(grid, boxes)))));
    return {h, apply_deltas(boxes_tensor(boxes), p.head_box(h)), p.head_cls(h)};
  }

  // [1 x 1] estimated object count.
  Tensor estimate_count(const FeatureGrid& grid) const {
    const Tensor f = cfg_.estimator_detach ? grid.features.detach() : grid.features;
    return relu(est_fc2_(relu(est_fc1_(reduce_max(f, 0)))));
  }

  int count_for(const FeatureGrid& grid, const CountPolicy& policy, double* n_est = nullptr) const {
    switch (policy.mode) {
      case CountMode::Fixed:
        if (policy.count < 1 || policy.count > cfg_.proposals)
          throw std::invalid_argument("proposal count " + std::to_string(policy.count) + " outside [1, " +
                                      std::to_string(cfg_.proposals) + "]");
        return policy.count;
      case CountMode::Estimated: {
        const double n = estimate_count(grid).item();
        if (n_est) *n_est = n;
        return dynamic_count(cfg_.switch_config(), n, cfg_.k);
      }
      case CountMode::Oracle:
        if (n_est) *n_est = estimate_count(grid).item();
        return dynamic_count(cfg_.switch_config(), policy.oracle, cfg_.k);
    }
    return cfg_.proposals;
  }

  // Final-stage predictions for `count` proposals.
  StageOutput predict(const FeatureGrid& grid, int count) const { return predict(grid, count, cfg_.strategy); }

  StageOutput predict(const FeatureGrid& grid, int count, Strategy strategy) const {
    if (cfg_.arch == Arch::Query) return forward_query(grid, count, strategy).back();
    const auto picked = sample_scored(top_proposals(two_stage_propose(grid)), static_cast<std::size_t>(count),
                                      strategy, static_cast<std::size_t>(cfg_.theta));
    return two_stage_head(grid, picked.boxes);
  }

  // Inference: every proposal emits one detection per class.
  DetectResult detect(const Tensor& image, const CountPolicy& policy) const {
    return detect(image, policy, cfg_.strategy);
  }

  DetectResult detect(const Tensor& image, const CountPolicy& policy, Strategy strategy) const {
    using clock = std::chrono::steady_clock;
    DetectResult r;
    const auto t0 = clock::now();
    const FeatureGrid grid = encode(image);
    const auto t1 = clock::now();
    r.count = count_for(grid, policy, &r.n_est);
    const StageOutput out = predict(grid, r.count, strategy);
    const auto t2 = clock::now();
    r.backbone_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    r.heads_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    const auto boxes = out.box_list();
    const std::size_t c = out.logits.cols();
    r.detections.reserve(boxes.size() * c);
    for (std::size_t i = 0; i < boxes.size(); ++i)
      for (std::size_t k = 0; k < c; ++k)
        r.detections.push_back({boxes[i], static_cast<int>(k), sigmoid(out.logits.at(i, k))});
    return r;
  }

 private:
  void require_arch(Arch a, const char* op) const {
    if (cfg_.arch != a)
      throw std::logic_error(std::string(op) + " is not available for arch " + std::string(to_string(cfg_.arch)));
  }

  void build(Rng& rng) {
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const auto side = static_cast<std::size_t>(cfg_.grid());
    const auto plen = static_cast<std::size_t>(3 * cfg_.patch * cfg_.patch);
    const auto classes = static_cast<std::size_t>(cfg_.classes);
    const double prior_bias = -std::log((1.0 - kClassPrior) / kClassPrior);

    patch_embed_ = make_linear(store_, rng, "backbone.patch_embed", plen, d);
    pos_embed_ = store_.add("backbone.pos_embed", normal_tensor(rng, {side * side, d}, 0.02));
    for (int b = 0; b < cfg_.encoder_blocks; ++b) {
      const std::string n = "backbone.block" + std::to_string(b);
      EncoderBlock blk;
      blk.ln1 = make_layer_norm(store_, n + ".ln1", d);
      blk.attn = make_attention(store_, rng, n + ".attn", d);
      blk.ln2 = make_layer_norm(store_, n + ".ln2", d);
      blk.mlp = make_mlp(store_, rng, n + ".mlp", d, static_cast<std::size_t>(cfg_.encoder_hidden), d);
      blocks_.push_back(blk);
    }
    final_ln_ = make_layer_norm(store_, "backbone.ln", d);

    if (cfg_.arch == Arch::Query) {
      const auto n = static_cast<std::size_t>(cfg_.proposals);
      bank_.features = store_.add("bank.features", normal_tensor(rng, {n, d}, 0.02));
      std::vector<double> full;
      for (std::size_t i = 0; i < n; ++i) full.insert(full.end(), {0.0, 0.0, 1.0, 1.0});
      bank_.boxes = store_.add("bank.boxes", Tensor({n, 4}, std::move(full)));
      for (int t = 0; t < cfg_.stages; ++t) {
        const std::string s = "stage" + std::to_string(t);
        QueryStage st;
        st.attn = make_attention(store_, rng, s + ".attn", d);
        st.ln_attn = make_layer_norm(store_, s + ".ln_attn", d);
        st.interact = make_mlp(store_, rng, s + ".interact", 2 * d, static_cast<std::size_t>(cfg_.interaction_hidden), d);
        st.ln_interact = make_layer_norm(store_, s + ".ln_interact", d);
        st.ffn = make_mlp(store_, rng, s + ".ffn", d, static_cast<std::size_t>(cfg_.ffn_hidden), d);
        st.ln_ffn = make_layer_norm(store_, s + ".ln_ffn", d);
        st.box_head.fc1 = make_linear(store_, rng, s + ".box.fc1", d, d);
        st.box_head.fc2 = make_linear(store_, rng, s + ".box.fc2", d, 4, 0.0);
        st.cls_head = make_linear(store_, rng, s + ".cls", d, classes);
        std::fill(st.cls_head.bias.mutable_values().begin(), st.cls_head.bias.mutable_values().end(), prior_bias);
        stages_.push_back(st);
      }
    } else {
      const auto a = static_cast<std::size_t>(cfg_.anchors);
      const auto hh = static_cast<std::size_t>(cfg_.head_hidden);
      TwoStageParts p;
      p.rpn_hidden = make_linear(store_, rng, "rpn.hidden", d, d);
      p.rpn_out = make_linear(store_, rng, "rpn.out", d, a * 5, 0.1);
      p.head_fc1 = make_linear(store_, rng, "head.fc1", d, hh);
      p.head_fc2 = make_linear(store_, rng, "head.fc2", hh, hh);
      p.head_cls = make_linear(store_, rng, "head.cls", hh, classes);
      std::fill(p.head_cls.bias.mutable_values().begin(), p.head_cls.bias.mutable_values().end(), prior_bias);
      p.head_box = make_linear(store_, rng, "head.box", hh, 4, 0.0);
      const double g = static_cast<double>(side);
      for (std::size_t gy = 0; gy < side; ++gy)
        for (std::size_t gx = 0; gx < side; ++gx)
          for (std::size_t k = 0; k < a; ++k) {
            const double s = kAnchorSizes[k % std::size(kAnchorSizes)] * (1.0 + static_cast<double>(k / 3));
            const double cx = (static_cast<double>(gx) + 0.5) / g, cy = (static_cast<double>(gy) + 0.5) / g;
            p.anchors.push_back(clamp_box({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2}));
          }
      two_stage_ = std::make_unique<TwoStageParts>(std::move(p));
    }

    est_fc1_ = make_linear(store_, rng, "estimator.fc1", d, d / 2);
    est_fc2_ = make_linear(store_, rng, "estimator.fc2", d / 2, 1);
    est_fc2_.bias.mutable_values()[0] = 1.0;
  }

  ModelConfig cfg_;
  ParamStore store_;
  Linear patch_embed_;
  Tensor pos_embed_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm final_ln_;
  ProposalBank bank_;
  std::vector<QueryStage> stages_;
  std::unique_ptr<TwoStageParts> two_stage_;
  Linear est_fc1_, est_fc2_;
};

}  // namespace dynprop
