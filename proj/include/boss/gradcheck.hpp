#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "boss/autodiff.hpp"

namespace boss {

struct GradcheckEntry {
  std::string id;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;
  bool passed = false;

  double max_error() const;
};

/// Maps a bound input to the block output on the given tape.
using BlockFn = std::function<Var(Tape&, Var input)>;

/// Compares reverse-mode gradients of sum(block(x) * R) (R fixed, random)
/// against central differences, for every parameter of every store and for
/// the input. Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradcheckReport gradcheck(std::span<ParameterStore* const> stores, const BlockFn& block, const Shape& input_shape,
                          double tolerance, std::uint64_t seed = 7, double h = 1e-5);

}  // namespace boss
