#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace boss {

using Rng = std::mt19937_64;

std::uint64_t fnv1a64(std::string_view bytes);

/// 16 lowercase hex digits of fnv1a64.
std::string hex_digest(std::string_view bytes);

/// Labeled seed splitting: derive_seed(s, "views") is independent of
/// derive_seed(s, "paths"), and changing one label's consumer never shifts
/// another's stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

/// Uniform integer in [0, n) drawn with a fixed, library-independent
/// reduction so sequences do not depend on the standard library's
/// distribution implementation.
std::size_t uniform_index(Rng& rng, std::size_t n);
double uniform_unit(Rng& rng);
/// Box-Muller standard normal.
double standard_normal(Rng& rng);

}  // namespace boss
