#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "boss/blocks.hpp"

namespace boss {

enum class SpaceKind { hytra, mbconv, nats_size };

/// One operator choice in a layer. For nats-size the candidates are widths
/// of a single slimmable layer.
struct Candidate {
  BlockKind kind = BlockKind::res_conv;
  char letter = 'c';      // token letter: c, a, m, w
  int index_in_kind = 0;  // token number
  int kernel = 3;
  int expansion = 3;
  int width = 0;
};

struct LayerDef {
  std::vector<Candidate> candidates;
  // Fixed geometry (mbconv, nats-size). Hytra layers derive channels from
  // the scale and take their stride from the gene.
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
};

struct SearchSpaceDef {
  std::string name;
  SpaceKind kind = SpaceKind::mbconv;
  std::vector<LayerDef> layers;
  std::vector<std::size_t> block_sizes;  // consecutive layer counts per block
  int input_side = 32;
  int stem_channels = 16;
  int stem_stride = 2;
  // hytra only
  int initial_scale = 0;
  int max_scale = 2;
  std::vector<int> attention_scales;
  int base_channels = 16;
  int heads = 4;
  std::size_t traversal_cap = 4096;

  std::size_t block_count() const { return block_sizes.size(); }
  std::size_t first_layer(std::size_t block) const;
  /// Channels at a hytra scale: base doubled per downsample.
  int scale_channels(int scale) const { return base_channels << (scale - initial_scale); }
};

SearchSpaceDef hytra_mini();
SearchSpaceDef mbconv_mini();
/// layers = 5 gives the 8^5 candidate space; other counts keep the
/// downsample-at-even-layers pattern.
SearchSpaceDef nats_size_mini(std::size_t layers = 5);
SearchSpaceDef make_space(const std::string& name);

/// Throws std::invalid_argument if a layer has no candidates or
/// the block sizes do not partition the layers.
void validate_space(const SearchSpaceDef& space);

struct Gene {
  int candidate = 0;
  int stride = 1;  // hytra only; 1 elsewhere
  bool operator==(const Gene&) const = default;
  auto operator<=>(const Gene&) const = default;
};

using BlockPath = std::vector<Gene>;

struct Architecture {
  std::vector<BlockPath> blocks;
  bool operator==(const Architecture&) const = default;
  auto operator<=>(const Architecture&) const = default;
};

/// Gene choices of one layer in enumeration order.
std::vector<Gene> gene_options(const SearchSpaceDef& space, std::size_t layer);

/// Empty when valid, else a description naming the 1-based layer and rule.
/// layer_offset shifts the reported layer numbers for a block-local check.
std::optional<std::string> validate_hytra_path(const SearchSpaceDef& space, const std::vector<Gene>& genes,
                                               int entry_scale = -1, std::size_t layer_offset = 0);

/// Throws std::invalid_argument on gene-count, index-range, or path-rule
/// violations.
void validate_architecture(const SearchSpaceDef& space, const Architecture& arch);

/// Scale after a path starting at entry_scale (hytra); the entry scale
/// elsewhere.
int path_exit_scale(const SearchSpaceDef& space, const BlockPath& path, int entry_scale);
/// Scale entering block k of arch.
int block_entry_scale(const SearchSpaceDef& space, const Architecture& arch, std::size_t k);
/// Entry scales from which block k can be reached by some valid prefix.
std::vector<int> reachable_entry_scales(const SearchSpaceDef& space, std::size_t k);

/// Number of valid gene assignments for block k from entry_scale.
std::uint64_t count_block_paths(const SearchSpaceDef& space, std::size_t k, int entry_scale = -1);
/// Lexicographic (candidate, then stride) enumeration; throws past the
/// traversal cap.
std::vector<BlockPath> enumerate_block_paths(const SearchSpaceDef& space, std::size_t k, int entry_scale = -1);

std::uint64_t count_architectures(const SearchSpaceDef& space);
/// All valid architectures in lexicographic order; throws past max_count.
std::vector<Architecture> enumerate_architectures(const SearchSpaceDef& space, std::size_t max_count);

/// Uniform over valid block paths (rejection against validate for hytra).
std::vector<BlockPath> sample_paths(const SearchSpaceDef& space, std::size_t k, std::size_t count, std::uint64_t seed,
                                    int entry_scale = -1);
/// Uniform over valid whole architectures.
std::vector<Architecture> sample_architectures(const SearchSpaceDef& space, std::size_t count, Rng& rng);
Architecture sample_architecture(const SearchSpaceDef& space, Rng& rng);

std::string encode_gene(const SearchSpaceDef& space, std::size_t layer, const Gene& gene);
std::string encode_architecture(const SearchSpaceDef& space, const Architecture& arch);
std::string encode_block_path(const SearchSpaceDef& space, std::size_t k, const BlockPath& path);
Architecture decode_architecture(const SearchSpaceDef& space, const std::string& text);

}  // namespace boss
