#include "boss/search_space.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace boss {

namespace {

Candidate conv_candidate() { return {BlockKind::res_conv, 'c', 0, 3, 3, 0}; }
Candidate att_candidate() { return {BlockKind::res_att, 'a', 0, 3, 3, 0}; }

int resolve_entry(const SearchSpaceDef& space, int entry_scale) {
  return entry_scale < 0 ? space.initial_scale : entry_scale;
}

bool attention_allowed(const SearchSpaceDef& space, int scale) {
  return std::find(space.attention_scales.begin(), space.attention_scales.end(), scale) !=
         space.attention_scales.end();
}

// Applies one hytra gene; returns the new scale or nullopt when invalid.
std::optional<int> hytra_step(const SearchSpaceDef& space, std::size_t layer, const Gene& g, int scale) {
  const auto& cands = space.layers[layer].candidates;
  if (g.candidate < 0 || static_cast<std::size_t>(g.candidate) >= cands.size()) return std::nullopt;
  if (g.stride != 1 && g.stride != 2) return std::nullopt;
  const int next = scale + (g.stride == 2 ? 1 : 0);
  if (next > space.max_scale) return std::nullopt;
  if (cands[static_cast<std::size_t>(g.candidate)].kind == BlockKind::res_att && !attention_allowed(space, next)) {
    return std::nullopt;
  }
  return next;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

std::vector<Gene> gene_options(const SearchSpaceDef& space, std::size_t layer) {
  std::vector<Gene> out;
  const auto& cands = space.layers.at(layer).candidates;
  for (std::size_t c = 0; c < cands.size(); ++c) {
    if (space.kind == SpaceKind::hytra) {
      out.push_back({static_cast<int>(c), 1});
      out.push_back({static_cast<int>(c), 2});
    } else {
      out.push_back({static_cast<int>(c), 1});
    }
  }
  return out;
}


std::size_t SearchSpaceDef::first_layer(std::size_t block) const {
  if (block > block_sizes.size()) throw std::out_of_range("block index " + std::to_string(block));
  return std::accumulate(block_sizes.begin(), block_sizes.begin() + static_cast<std::ptrdiff_t>(block),
                         std::size_t{0});
}

SearchSpaceDef hytra_mini() {
  SearchSpaceDef s;
  s.name = "hytra-mini";
  s.kind = SpaceKind::hytra;
  s.stem_channels = 16;
  s.base_channels = 16;
  s.initial_scale = 0;
  s.max_scale = 2;
  s.attention_scales = {1, 2};
  for (int i = 0; i < 8; ++i) s.layers.push_back({{conv_candidate(), att_candidate()}, 0, 0, 1});
  s.block_sizes = {2, 2, 2, 2};
  return s;
}

SearchSpaceDef mbconv_mini() {
  SearchSpaceDef s;
  s.name = "mbconv-mini";
  s.kind = SpaceKind::mbconv;
  s.stem_channels = 8;
  const int geometry[6][3] = {{8, 8, 1}, {8, 16, 2}, {16, 16, 1}, {16, 24, 2}, {24, 24, 1}, {24, 24, 1}};
  const int ke[4][2] = {{3, 3}, {3, 6}, {5, 3}, {5, 6}};
  for (const auto& g : geometry) {
    LayerDef layer;
    layer.in_channels = g[0];
    layer.out_channels = g[1];
    layer.stride = g[2];
    for (int c = 0; c < 4; ++c) layer.candidates.push_back({BlockKind::mb_conv, 'm', c, ke[c][0], ke[c][1], 0});
    s.layers.push_back(layer);
  }
  s.block_sizes = {2, 2, 2};
  return s;
}

SearchSpaceDef nats_size_mini(std::size_t layers) {
  if (layers < 1) throw std::invalid_argument("nats-size-mini: needs at least one layer");
  SearchSpaceDef s;
  s.name = "nats-size-mini";
  s.kind = SpaceKind::nats_size;
  s.stem_channels = 16;
  const auto& widths = slimmable_width_set();
  const int max_width = widths.back();
  for (std::size_t i = 0; i < layers; ++i) {
    LayerDef layer;
    layer.in_channels = i == 0 ? s.stem_channels : max_width;
    layer.out_channels = max_width;
    layer.stride = (i % 2 == 1) ? 2 : 1;
    for (std::size_t w = 0; w < widths.size(); ++w) {
      layer.candidates.push_back({BlockKind::nats_cell, 'w', static_cast<int>(w), 3, 3, widths[w]});
    }
    s.layers.push_back(layer);
  }
  // Blocks split at the downsampling layers.
  std::size_t current = 0;
  for (std::size_t i = 0; i < layers; ++i) {
    if (i > 0 && s.layers[i].stride == 2) {
      s.block_sizes.push_back(current);
      current = 0;
    }
    ++current;
  }
  s.block_sizes.push_back(current);
  return s;
}

SearchSpaceDef make_space(const std::string& name) {
  if (name == "hytra-mini") return hytra_mini();
  if (name == "mbconv-mini") return mbconv_mini();
  if (name == "nats-size-mini") return nats_size_mini();
  throw std::invalid_argument("unknown search space '" + name + "' (expected hytra-mini, mbconv-mini, nats-size-mini)");
}

void validate_space(const SearchSpaceDef& space) {
  for (std::size_t i = 0; i < space.layers.size(); ++i) {
    if (space.layers[i].candidates.empty()) {
      throw std::invalid_argument(space.name + ": layer " + std::to_string(i + 1) + " has no candidates");
    }
  }
  const std::size_t covered = std::accumulate(space.block_sizes.begin(), space.block_sizes.end(), std::size_t{0});
  if (covered != space.layers.size() ||
      std::any_of(space.block_sizes.begin(), space.block_sizes.end(), [](std::size_t n) { return n == 0; })) {
    throw std::invalid_argument(space.name + ": block sizes cover " + std::to_string(covered) + " layers, space has " +
                                std::to_string(space.layers.size()));
  }
  if (space.kind == SpaceKind::hytra && space.max_scale < space.initial_scale) {
    throw std::invalid_argument(space.name + ": max scale below initial scale");
  }
}

std::optional<std::string> validate_hytra_path(const SearchSpaceDef& space, const std::vector<Gene>& genes,
                                               int entry_scale, std::size_t layer_offset) {
  int scale = resolve_entry(space, entry_scale);
  for (std::size_t i = 0; i < genes.size(); ++i) {
    const std::size_t layer = layer_offset + i;
    const std::string where = "layer " + std::to_string(layer + 1);
    if (layer >= space.layers.size()) return where + ": beyond the last layer";
    const Gene& g = genes[i];
    const auto& cands = space.layers[layer].candidates;
    if (g.candidate < 0 || static_cast<std::size_t>(g.candidate) >= cands.size()) {
      return where + ": candidate index " + std::to_string(g.candidate) + " out of range";
    }
    if (g.stride != 1 && g.stride != 2) return where + ": stride must be 1 or 2, got " + std::to_string(g.stride);
    const int next = scale + (g.stride == 2 ? 1 : 0);
    if (next > space.max_scale) {
      return where + ": downsampling to scale " + std::to_string(next) + " passes the smallest scale " +
             std::to_string(space.max_scale) + " (at most " + std::to_string(space.max_scale - space.initial_scale) +
             " downsamples)";
    }
    if (cands[static_cast<std::size_t>(g.candidate)].kind == BlockKind::res_att && !attention_allowed(space, next)) {
      return where + ": attention at scale " + std::to_string(next) + " violates the scale rule (attention only at scales " +
             join_ints(space.attention_scales) + ")";
    }
    scale = next;
  }
  return std::nullopt;
}

void validate_architecture(const SearchSpaceDef& space, const Architecture& arch) {
  if (arch.blocks.size() != space.block_count()) {
    throw std::invalid_argument(space.name + ": architecture has " + std::to_string(arch.blocks.size()) +
                                " blocks, space has " + std::to_string(space.block_count()));
  }
  std::vector<Gene> flat;
  for (std::size_t k = 0; k < arch.blocks.size(); ++k) {
    if (arch.blocks[k].size() != space.block_sizes[k]) {
      throw std::invalid_argument(space.name + ": block " + std::to_string(k + 1) + " has " +
                                  std::to_string(arch.blocks[k].size()) + " genes, expected " +
                                  std::to_string(space.block_sizes[k]));
    }
    flat.insert(flat.end(), arch.blocks[k].begin(), arch.blocks[k].end());
  }
  if (space.kind == SpaceKind::hytra) {
    if (auto v = validate_hytra_path(space, flat)) throw std::invalid_argument(space.name + ": " + *v);
    return;
  }
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const auto n = space.layers[i].candidates.size();
    if (flat[i].candidate < 0 || static_cast<std::size_t>(flat[i].candidate) >= n || flat[i].stride != 1) {
      throw std::invalid_argument(space.name + ": layer " + std::to_string(i + 1) + " gene out of range");
    }
  }
}

int path_exit_scale(const SearchSpaceDef& space, const BlockPath& path, int entry_scale) {
  int scale = resolve_entry(space, entry_scale);
  if (space.kind != SpaceKind::hytra) return scale;
  for (const Gene& g : path) scale += g.stride == 2 ? 1 : 0;
  return scale;
}

int block_entry_scale(const SearchSpaceDef& space, const Architecture& arch, std::size_t k) {
  int scale = space.initial_scale;
  for (std::size_t b = 0; b < k; ++b) scale = path_exit_scale(space, arch.blocks.at(b), scale);
  return scale;
}

std::vector<int> reachable_entry_scales(const SearchSpaceDef& space, std::size_t k) {
  if (space.kind != SpaceKind::hytra) return {space.initial_scale};
  std::set<int> scales{space.initial_scale};
  const std::size_t end = space.first_layer(k);
  for (std::size_t layer = 0; layer < end; ++layer) {
    std::set<int> next;
    for (int s : scales) {
      for (const Gene& g : gene_options(space, layer)) {
        if (auto n = hytra_step(space, layer, g, s)) next.insert(*n);
      }
    }
    scales = std::move(next);
  }
  return {scales.begin(), scales.end()};
}

std::uint64_t count_block_paths(const SearchSpaceDef& space, std::size_t k, int entry_scale) {
  const std::size_t begin = space.first_layer(k);
  const std::size_t end = begin + space.block_sizes.at(k);
  if (space.kind != SpaceKind::hytra) {
    std::uint64_t n = 1;
    for (std::size_t l = begin; l < end; ++l) n *= space.layers[l].candidates.size();
    return n;
  }
  std::map<int, std::uint64_t> ways{{resolve_entry(space, entry_scale), 1}};
  for (std::size_t layer = begin; layer < end; ++layer) {
    std::map<int, std::uint64_t> next;
    for (const auto& [s, n] : ways) {
      for (const Gene& g : gene_options(space, layer)) {
        if (auto t = hytra_step(space, layer, g, s)) next[*t] += n;
      }
    }
    ways = std::move(next);
  }
  std::uint64_t total = 0;
  for (const auto& [s, n] : ways) total += n;
  return total;
}

std::vector<BlockPath> enumerate_block_paths(const SearchSpaceDef& space, std::size_t k, int entry_scale) {
  const std::uint64_t count = count_block_paths(space, k, entry_scale);
  if (count > space.traversal_cap) {
    throw std::invalid_argument(space.name + ": block " + std::to_string(k + 1) + " has " + std::to_string(count) +
                                " paths, above the traversal cap of " + std::to_string(space.traversal_cap) +
                                "; use evolutionary search for this block");
  }
  const std::size_t begin = space.first_layer(k);
  const std::size_t end = begin + space.block_sizes.at(k);
  std::vector<BlockPath> out;
  out.reserve(count);
  BlockPath current;
  std::function<void(std::size_t, int)> walk = [&](std::size_t layer, int scale) {
    if (layer == end) {
      out.push_back(current);
      return;
    }
    for (const Gene& g : gene_options(space, layer)) {
      int next = scale;
      if (space.kind == SpaceKind::hytra) {
        auto t = hytra_step(space, layer, g, scale);
        if (!t) continue;
        next = *t;
      }
      current.push_back(g);
      walk(layer + 1, next);
      current.pop_back();
    }
  };
  walk(begin, resolve_entry(space, entry_scale));
  return out;
}

std::uint64_t count_architectures(const SearchSpaceDef& space) {
  std::map<int, std::uint64_t> ways{{space.initial_scale, 1}};
  for (std::size_t layer = 0; layer < space.layers.size(); ++layer) {
    std::map<int, std::uint64_t> next;
    for (const auto& [s, n] : ways) {
      for (const Gene& g : gene_options(space, layer)) {
        if (space.kind != SpaceKind::hytra) {
          next[s] += n;
        } else if (auto t = hytra_step(space, layer, g, s)) {
          next[*t] += n;
        }
      }
    }
    ways = std::move(next);
  }
  std::uint64_t total = 0;
  for (const auto& [s, n] : ways) total += n;
  return total;
}

std::vector<Architecture> enumerate_architectures(const SearchSpaceDef& space, std::size_t max_count) {
  const std::uint64_t count = count_architectures(space);
  if (count > max_count) {
    throw std::invalid_argument(space.name + ": " + std::to_string(count) + " architectures exceed the limit of " +
                                std::to_string(max_count));
  }
  std::vector<Architecture> out;
  out.reserve(count);
  std::vector<Gene> flat;
  std::function<void(std::size_t, int)> walk = [&](std::size_t layer, int scale) {
    if (layer == space.layers.size()) {
      Architecture a;
      std::size_t pos = 0;
      for (std::size_t n : space.block_sizes) {
        a.blocks.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                              flat.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
      }
      out.push_back(std::move(a));
      return;
    }
    for (const Gene& g : gene_options(space, layer)) {
      int next = scale;
      if (space.kind == SpaceKind::hytra) {
        auto t = hytra_step(space, layer, g, scale);
        if (!t) continue;
        next = *t;
      }
      flat.push_back(g);
      walk(layer + 1, next);
      flat.pop_back();
    }
  };
  walk(0, space.initial_scale);
  return out;
}

namespace {

BlockPath draw_genes(const SearchSpaceDef& space, std::size_t begin, std::size_t end, Rng& rng) {
  BlockPath p;
  for (std::size_t layer = begin; layer < end; ++layer) {
    const auto options = gene_options(space, layer);
    p.push_back(options[uniform_index(rng, options.size())]);
  }
  return p;
}

}  // namespace

std::vector<BlockPath> sample_paths(const SearchSpaceDef& space, std::size_t k, std::size_t count, std::uint64_t seed,
                                    int entry_scale) {
  if (count < 1) throw std::invalid_argument("sample_paths: count must be >= 1");
  if (count_block_paths(space, k, entry_scale) == 0) {
    throw std::invalid_argument(space.name + ": block " + std::to_string(k + 1) + " has no valid path from scale " +
                                std::to_string(resolve_entry(space, entry_scale)));
  }
  Rng rng(seed);
  const std::size_t begin = space.first_layer(k);
  const std::size_t end = begin + space.block_sizes.at(k);
  std::vector<BlockPath> out;
  while (out.size() < count) {
    BlockPath p = draw_genes(space, begin, end, rng);
    if (space.kind == SpaceKind::hytra && validate_hytra_path(space, p, entry_scale, begin)) continue;
    out.push_back(std::move(p));
  }
  return out;
}

Architecture sample_architecture(const SearchSpaceDef& space, Rng& rng) {
  for (;;) {
    BlockPath flat = draw_genes(space, 0, space.layers.size(), rng);
    if (space.kind == SpaceKind::hytra && validate_hytra_path(space, flat)) continue;
    Architecture a;
    std::size_t pos = 0;
    for (std::size_t n : space.block_sizes) {
      a.blocks.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                            flat.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
    }
    return a;
  }
}

std::vector<Architecture> sample_architectures(const SearchSpaceDef& space, std::size_t count, Rng& rng) {
  std::vector<Architecture> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_architecture(space, rng));
  return out;
}

std::string encode_gene(const SearchSpaceDef& space, std::size_t layer, const Gene& gene) {
  const auto& cands = space.layers.at(layer).candidates;
  if (gene.candidate < 0 || static_cast<std::size_t>(gene.candidate) >= cands.size()) {
    throw std::invalid_argument("layer " + std::to_string(layer + 1) + ": candidate index out of range");
  }
  const Candidate& c = cands[static_cast<std::size_t>(gene.candidate)];
  std::string token = std::string(1, c.letter) + std::to_string(c.index_in_kind);
  if (space.kind == SpaceKind::hytra) token += "s" + std::to_string(gene.stride);
  return token;
}

std::string encode_block_path(const SearchSpaceDef& space, std::size_t k, const BlockPath& path) {
  const std::size_t begin = space.first_layer(k);
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) out += '.';
    out += encode_gene(space, begin + i, path[i]);
  }
  return out;
}

std::string encode_architecture(const SearchSpaceDef& space, const Architecture& arch) {
  validate_architecture(space, arch);
  std::string out;
  for (std::size_t k = 0; k < arch.blocks.size(); ++k) {
    if (k) out += '-';
    out += encode_block_path(space, k, arch.blocks[k]);
  }
  return out;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

// Parses a non-empty run of digits starting at pos.
std::optional<int> parse_number(const std::string& s, std::size_t& pos) {
  const std::size_t start = pos;
  long v = 0;
  while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
    v = v * 10 + (s[pos] - '0');
    if (v > 1'000'000) return std::nullopt;
    ++pos;
  }
  if (pos == start) return std::nullopt;
  return static_cast<int>(v);
}

}  // namespace

Architecture decode_architecture(const SearchSpaceDef& space, const std::string& text) {
  const auto groups = split(text, '-');
  if (groups.size() != space.block_count()) {
    throw std::invalid_argument("architecture '" + text + "': " + std::to_string(groups.size()) +
                                " block groups, space " + space.name + " has " + std::to_string(space.block_count()));
  }
  Architecture arch;
  std::size_t layer = 0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto tokens = split(groups[k], '.');
    if (tokens.size() != space.block_sizes[k]) {
      throw std::invalid_argument("architecture '" + text + "': block " + std::to_string(k + 1) + " has " +
                                  std::to_string(tokens.size()) + " genes, expected " +
                                  std::to_string(space.block_sizes[k]));
    }
    BlockPath path;
    for (std::size_t t = 0; t < tokens.size(); ++t, ++layer) {
      const std::string& tok = tokens[t];
      const std::string where = "architecture '" + text + "': block " + std::to_string(k + 1) + " gene " +
                                std::to_string(t + 1) + " ('" + tok + "')";
      if (tok.empty()) throw std::invalid_argument(where + ": empty token");
      std::size_t pos = 1;
      auto index = parse_number(tok, pos);
      if (!index) throw std::invalid_argument(where + ": malformed token");
      Gene g;
      if (space.kind == SpaceKind::hytra) {
        if (pos >= tok.size() || tok[pos] != 's') throw std::invalid_argument(where + ": missing stride suffix");
        ++pos;
        auto stride = parse_number(tok, pos);
        if (!stride) throw std::invalid_argument(where + ": malformed stride");
        g.stride = *stride;
      }
      if (pos != tok.size()) throw std::invalid_argument(where + ": trailing characters");
      const auto& cands = space.layers[layer].candidates;
      auto it = std::find_if(cands.begin(), cands.end(), [&](const Candidate& c) {
        return c.letter == tok[0] && c.index_in_kind == *index;
      });
      if (it == cands.end()) throw std::invalid_argument(where + ": no such candidate in this layer");
      g.candidate = static_cast<int>(it - cands.begin());
      if (g.stride != 1 && g.stride != 2) throw std::invalid_argument(where + ": stride must be 1 or 2");
      path.push_back(g);
    }
    arch.blocks.push_back(std::move(path));
  }
  if (space.kind == SpaceKind::hytra) {
    std::vector<Gene> flat;
    for (const auto& b : arch.blocks) flat.insert(flat.end(), b.begin(), b.end());
    if (auto v = validate_hytra_path(space, flat)) {
      throw std::invalid_argument("architecture '" + text + "': invalid path, " + *v);
    }
  }
  return arch;
}

}  // namespace boss
