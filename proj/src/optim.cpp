#include "boss/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace boss {

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (name == "lars-lite") return OptimizerKind::lars_lite;
  throw std::invalid_argument("unknown optimizer: " + name);
}

std::string optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::sgd_momentum ? "sgd-momentum" : "lars-lite";
}

double lars_trust_ratio(double weight_norm, double grad_norm, const OptimizerConfig& config) {
  if (weight_norm == 0.0 || grad_norm == 0.0) return 1.0;
  const double r = weight_norm / (grad_norm + config.weight_decay * weight_norm + config.trust_eps);
  return std::clamp(r, 0.0, config.trust_clamp);
}

void optimizer_step(ParameterStore& store, const OptimizerConfig& config) {
  if (config.lr < 0.0) throw std::invalid_argument("learning rate must be >= 0");
  if (config.momentum < 0.0 || config.momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (config.weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
  for (const auto& [id, p] : store.params()) {
    if (!p.grad) throw std::invalid_argument("parameter has no gradient: " + id);
  }
  for (auto& [id, p] : store.params()) {
    const auto& g = *p.grad;
    auto& v = store.momentum(id);
    if (config.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = config.momentum * v[i] + g[i] + config.weight_decay * p.data[i];
        p.data[i] -= config.lr * v[i];
      }
    } else {
      double gn = 0.0;
      for (double x : g) gn += x * x;
      const double local_lr = config.lr * lars_trust_ratio(p.norm(), std::sqrt(gn), config);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = config.momentum * v[i] + local_lr * (g[i] + config.weight_decay * p.data[i]);
        p.data[i] -= v[i];
      }
    }
  }
  store.advance_step();
}

double warmup_cosine_lr(double base, std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps) {
  if (step < warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return base;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace boss
