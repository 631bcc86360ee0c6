#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprop/checkpoint.hpp"
#include "dynprop/data.hpp"
#include "dynprop/detector.hpp"
#include "dynprop/losses.hpp"
#include "dynprop/proposals.hpp"
#include "dynprop/rng.hpp"

namespace dynprop {

struct TrainConfig {
  ModelConfig model;
  int steps = 3000;
  int batch = 8;
  double lr = 1e-3;
  double lr_drop_at = 0.8;  // fraction of steps after which lr is multiplied by lr_drop
  double lr_drop = 0.1;
  std::uint64_t seed = 0;
  bool distill = false;
  bool teacher_task = true;   // task loss on the full-N teacher forward
  bool oracle_count = false;  // dynamic mode: select proposals from n_g instead of the estimate
  double clip = 1.0;
  LossWeights weights;

  void validate() const {
    model.validate();
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(lr_drop_at >= 0.0 && lr_drop_at <= 1.0)) throw std::invalid_argument("lr_drop_at must lie in [0, 1]");
    if (!(lr_drop > 0.0)) throw std::invalid_argument("lr_drop must be positive");
    if (distill && model.arch != Arch::Query)
      throw std::invalid_argument("distillation applies to the query architecture only");
    if (distill && model.mode == Mode::Individual)
      throw std::invalid_argument("distillation needs a switchable or dynamic mode");
  }
};

// Adam with global-norm clipping. Steps with a non-finite gradient are skipped.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double clip = 1.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), clip_(clip) {}

  // Applies one update from the accumulated gradients, then clears them.
  bool step(ParamStore& params) {
    auto& entries = params.entries();
    if (m_.empty())
      for (auto& [_, t] : entries) {
        m_.emplace_back(t.size(), 0.0);
        v_.emplace_back(t.size(), 0.0);
      }
    double sq = 0.0;
    for (auto& [_, t] : entries)
      for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
      ++skipped_;
      params.zero_grad();
      return false;
    }
    last_norm_ = norm;
    const double factor = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      Tensor& p = entries[k].second;
      const auto grad = p.grad();
      auto values = p.mutable_values();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i] * factor;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
    params.zero_grad();
    return true;
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long skipped() const { return skipped_; }
  long steps() const { return t_; }
  double last_norm() const { return last_norm_; }

 private:
  double lr_, beta1_, beta2_, eps_, clip_;
  long t_ = 0;
  long skipped_ = 0;
  double last_norm_ = 0.0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepInfo {
  LossBreakdown loss;   // summed over the batch
  double delta_or_nd = 0.0;  // switchable: delta; dynamic: mean N_d; individual: N
  bool applied = false;
};

class Trainer {
 public:
  Trainer(Detector& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), adam_(cfg_.lr, 0.9, 0.999, 1e-8, cfg_.clip),
        rng_(derive_seed(cfg_.seed, 0x747261696eULL)) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  Adam& optimizer() { return adam_; }
  Rng& rng() { return rng_; }

  // Forward + backward for one image; gradients accumulate into the model.
  // `delta` is the step's switch value (switchable mode only).
  LossBreakdown accumulate(const Scene& scene, double delta, int* used_count = nullptr) {
    const ModelConfig& mc = model_.config();
    const Tensor image = rasterize(scene, static_cast<std::size_t>(mc.image_size),
                                   static_cast<std::size_t>(mc.image_size));
    const Targets gt = Targets::of(scene);
    const LossWeights& w = cfg_.weights;
    Tape tape;
    TapeScope scope(tape);
    const FeatureGrid grid = model_.encode(image);

    LossBreakdown parts;
    Tensor total;
    auto add_term = [&](const Tensor& t) { total = total.defined() ? add(total, t) : t; };

    int count = mc.proposals;
    if (mc.mode == Mode::Switchable) {
      count = switch_count(mc.switch_config(), delta);
    } else if (mc.mode == Mode::Dynamic) {
      const Tensor est = model_.estimate_count(grid);
      const double n_used = cfg_.oracle_count ? static_cast<double>(gt.size()) : est.item();
      count = dynamic_count(mc.switch_config(), n_used, mc.k);
      const Tensor cl = count_loss(est, static_cast<double>(gt.size()));
      parts.est = cl.item();
      add_term(scale(cl, w.est));
    }
    if (used_count) *used_count = count;

    if (mc.arch == Arch::Query) {
      const auto student = model_.forward_query(grid, count);
      const SetLoss sl = set_loss(student, gt, w);
      add_term(sl.total);
      parts.cls += sl.parts.cls;
      parts.l1 += sl.parts.l1;
      parts.giou += sl.parts.giou;
      if (cfg_.distill && count < mc.proposals) {
        const auto teacher = model_.forward_query(grid, mc.proposals);
        if (cfg_.teacher_task) {
          const SetLoss tl = set_loss(teacher, gt, w);
          add_term(tl.total);
          parts.cls += tl.parts.cls;
          parts.l1 += tl.parts.l1;
          parts.giou += tl.parts.giou;
        }
        const Tensor dst = distill_loss(teacher, student, grid, mc.strategy, static_cast<std::size_t>(mc.theta),
                                        w.c1, w.c2);
        parts.dst = dst.item();
        add_term(dst);
      }
    } else {
      const RpnOutput rpn = model_.rpn(grid);
      const auto picked = sample_scored(model_.top_proposals(rpn.ranked), static_cast<std::size_t>(count),
                                        mc.strategy, static_cast<std::size_t>(mc.theta));
      const StageOutput head = model_.two_stage_head(grid, picked.boxes);
      const SetLoss sl = set_loss(head, gt, w);
      const RpnLoss rl = rpn_loss(rpn, model_.anchors(), gt);
      add_term(sl.total);
      add_term(add(scale(rl.objectness, w.cls), scale(rl.box_l1, w.l1)));
      parts.cls += sl.parts.cls + rl.objectness.item();
      parts.l1 += sl.parts.l1 + rl.box_l1.item();
      parts.giou += sl.parts.giou;
    }
    parts.total = total.item();
    tape.backward(total);
    return parts;
  }

  StepInfo step(std::span<const Scene> batch) {
    const double delta = model_.config().mode == Mode::Switchable ? rng_.uniform_open_left() : 1.0;
    return step_with_delta(batch, delta);
  }

  StepInfo step_with_delta(std::span<const Scene> batch, double delta) {
    StepInfo info;
    double count_sum = 0.0;
    for (const auto& scene : batch) {
      int used = 0;
      info.loss += accumulate(scene, delta, &used);
      count_sum += used;
    }
    switch (model_.config().mode) {
      case Mode::Individual: info.delta_or_nd = model_.config().proposals; break;
      case Mode::Switchable: info.delta_or_nd = delta; break;
      case Mode::Dynamic: info.delta_or_nd = count_sum / static_cast<double>(batch.size()); break;
    }
    info.applied = adam_.step(model_.params());
    return info;
  }

 private:
  Detector& model_;
  TrainConfig cfg_;
  Adam adam_;
  Rng rng_;
};

inline constexpr const char* kTrainLogHeader = "step,mode,delta_or_nd,cls,l1,giou,est,dst,total";

inline std::string train_log_row(long step, Mode mode, const StepInfo& s) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%ld,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", step,
                std::string(to_string(mode)).c_str(), s.delta_or_nd, s.loss.cls, s.loss.l1, s.loss.giou, s.loss.est,
                s.loss.dst, s.loss.total);
  return buf;
}

struct TrainHooks {
  std::ostream* log = nullptr;  // CSV rows every log_every steps
  int log_every = 50;
  std::filesystem::path checkpoint_dir;  // periodic checkpoints when non-empty
  int checkpoint_every = 0;
  std::function<void(long, const StepInfo&)> on_step;
};

struct TrainSummary {
  long steps = 0;
  long skipped = 0;
  LossBreakdown last;
};

// Batches are drawn uniformly with replacement from `train_set`.
inline TrainSummary train(Detector& model, const TrainConfig& cfg, const std::vector<Scene>& train_set,
                          const TrainHooks& hooks = {}) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  Trainer trainer(model, cfg);
  Rng batch_rng(derive_seed(cfg.seed, 0x6261746368ULL));
  if (hooks.log) *hooks.log << kTrainLogHeader << '\n';
  TrainSummary summary;
  std::vector<Scene> batch(static_cast<std::size_t>(cfg.batch));
  const double drop_after = cfg.lr_drop_at * static_cast<double>(cfg.steps);
  for (long step = 1; step <= cfg.steps; ++step) {
    trainer.optimizer().set_lr(static_cast<double>(step) > drop_after ? cfg.lr * cfg.lr_drop : cfg.lr);
    for (auto& s : batch) s = train_set[batch_rng.uniform_int(train_set.size())];
    const StepInfo info = trainer.step(batch);
    summary.last = info.loss;
    summary.steps = step;
    if (hooks.log && hooks.log_every > 0 && (step % hooks.log_every == 0 || step == cfg.steps))
      *hooks.log << train_log_row(step, cfg.model.mode, info) << '\n';
    if (!hooks.checkpoint_dir.empty() && hooks.checkpoint_every > 0 && step % hooks.checkpoint_every == 0)
      save_checkpoint(model, hooks.checkpoint_dir / ("step" + std::to_string(step) + ".dynp"));
    if (hooks.on_step) hooks.on_step(step, info);
  }
  summary.skipped = trainer.optimizer().skipped();
  return summary;
}

}  // namespace dynprop
