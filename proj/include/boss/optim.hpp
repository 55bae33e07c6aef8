#pragma once

#include <cstdint>
#include <string>

#include "boss/tensor.hpp"

namespace boss {

enum class OptimizerKind { sgd_momentum, lars_lite };

OptimizerKind optimizer_from_name(const std::string& name);
std::string optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double trust_eps = 1e-9;
  double trust_clamp = 10.0;

  bool operator==(const OptimizerConfig&) const = default;
};

/// Applies one update to every parameter in the store and increments its
/// step counter. Throws if any parameter has no gradient slot.
///
/// sgd-momentum:  v = mu*v + g + wd*w;               w -= lr*v
/// lars-lite:     v = mu*v + lr*trust*(g + wd*w);    w -= v
/// with trust = |w| / (|g| + wd*|w| + eps) clamped to [0, trust_clamp],
/// and trust = 1 when |w| or |g| is zero.
void optimizer_step(ParameterStore& store, const OptimizerConfig& config);

/// LARS trust ratio for one parameter tensor.
double lars_trust_ratio(double weight_norm, double grad_norm, const OptimizerConfig& config);

/// Linear warmup then cosine decay. `step` is zero-based; the warmup ramps
/// base*(step+1)/warmup_steps and reaches base at step warmup_steps-1.
double warmup_cosine_lr(double base, std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps);

}  // namespace boss
