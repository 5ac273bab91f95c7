#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "idk/error.hpp"
#include "idk/model.hpp"

namespace idk {

/// Defaults are the large-scale continued-pretraining recipe; the desk-scale
/// experiment presets override the learning rates.
struct OptimizerConfig {
  double max_lr = 4e-5;
  double min_lr = 2e-6;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip_norm = 1.0;
  std::size_t total_steps = 1024;

  void validate() const {
    IDK_CHECK(min_lr > 0.0 && min_lr <= max_lr, "OptimizerConfig: need 0 < min_lr <= max_lr");
    IDK_CHECK(warmup_frac >= 0.0 && warmup_frac < 1.0, "OptimizerConfig: warmup_frac in [0, 1)");
    IDK_CHECK(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
              "OptimizerConfig: betas must lie in (0, 1)");
    IDK_CHECK(weight_decay >= 0.0, "OptimizerConfig: weight_decay must be non-negative");
    IDK_CHECK(grad_clip_norm > 0.0, "OptimizerConfig: grad_clip_norm must be positive");
    IDK_CHECK(total_steps >= 1, "OptimizerConfig: total_steps must be at least 1");
  }

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
  }
};

/// Linear warmup from 0 to max_lr, then cosine decay to min_lr at total_steps.
inline double lr_at(std::size_t step, const OptimizerConfig& cfg) {
  IDK_CHECK(step <= cfg.total_steps, "lr_at: step beyond total_steps");
  const std::size_t warm = cfg.warmup_steps();
  if (step < warm) return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warm);
  const std::size_t decay = cfg.total_steps - warm;
  if (decay == 0) return cfg.max_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(decay);
  return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// First and second moments per parameter plus the completed-update count.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;

  static OptimizerState for_model(const Model& model) {
    OptimizerState s;
    for (const auto& p : model.parameters()) {
      s.m.emplace_back(p.tensor.numel(), 0.0);
      s.v.emplace_back(p.tensor.numel(), 0.0);
    }
    return s;
  }
};

/// One decoupled-weight-decay Adam update on a flat parameter block.
/// `t` is the 1-based update count used for bias correction; every gradient
/// entry is multiplied by `grad_scale` first.
inline void adamw_update(std::span<double> values, std::span<const double> grads,
                         std::span<double> m, std::span<double> v, std::size_t t, double lr,
                         double weight_decay, const OptimizerConfig& cfg, double grad_scale = 1.0) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grads[i] * grad_scale;
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    values[i] -= lr * weight_decay * values[i];
    values[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

inline double global_grad_norm(const Model& model) {
  double sq = 0.0;
  for (const auto& p : model.parameters())
    for (double g : p.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

struct StepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

/// Clips the accumulated gradients to cfg.grad_clip_norm (global L2 norm) and
/// applies one AdamW update. `step_index` is the 1-based update number whose
/// learning rate is lr_at(step_index).
inline StepInfo optimizer_step(Model& model, OptimizerState& state, std::size_t step_index,
                               const OptimizerConfig& cfg) {
  auto& params = model.parameters();
  IDK_CHECK(state.m.size() == params.size() && state.v.size() == params.size(),
            "optimizer_step: state does not match the model's parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    IDK_CHECK(state.m[i].size() == params[i].tensor.numel() &&
                  state.v[i].size() == params[i].tensor.numel(),
              "optimizer_step: shape mismatch for " + params[i].name);
  }
  StepInfo info;
  info.lr = lr_at(step_index, cfg);
  info.grad_norm = global_grad_norm(model);
  if (info.grad_norm > cfg.grad_clip_norm) info.clip_scale = cfg.grad_clip_norm / info.grad_norm;
  state.step += 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    const std::vector<double> zeros = t.grad().empty() ? std::vector<double>(t.numel(), 0.0)
                                                       : std::vector<double>{};
    const std::span<const double> g = t.grad().empty() ? std::span<const double>(zeros) : t.grad();
    adamw_update(t.mutable_values(), g, state.m[i], state.v[i], state.step, info.lr,
                 params[i].decay ? cfg.weight_decay : 0.0, cfg, info.clip_scale);
  }
  return info;
}

}  // namespace idk
