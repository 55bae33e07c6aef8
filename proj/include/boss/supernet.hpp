#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "boss/blocks.hpp"
#include "boss/checkpoint.hpp"
#include "boss/search_space.hpp"

namespace boss {

/// dense -> batchnorm -> relu -> dense + bias, applied to globally pooled
/// features. Inputs narrower than in_max use the leading rows of the first
/// weight.
class Head {
 public:
  Head(int in_max, int hidden, int out, Rng& rng);

  Var forward(Tape& tape, Var features, bool train_bn);
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  int out_dim() const { return out_; }

 private:
  ParameterStore params_;
  int out_ = 0;
};

enum class ForwardMode { recording, frozen };

/// Weight-sharing network over a search space: one BlockInstance per
/// (layer, candidate, output scale), shared by every path that selects it,
/// plus a stem and one projection head per block.
class Supernet {
 public:
  Supernet(SearchSpaceDef space, Rng& rng, int head_hidden = 64, int head_out = 32);

  const SearchSpaceDef& space() const { return space_; }
  ParameterStore& stem() { return stem_; }
  Head& projection(std::size_t k) { return heads_.at(k); }
  BlockInstance& instance(std::size_t layer, int candidate, int scale);
  std::size_t instance_count() const { return instances_.size(); }

  /// Widest block-k output over all paths.
  int max_block_channels(std::size_t k) const;

  Var forward_stem(Tape& tape, Var x, bool train_bn);
  Var forward_block(Tape& tape, std::size_t k, const BlockPath& path, Var x, int entry_scale, bool train_bn);
  /// Features at every block boundary. detach_between cuts the gradient
  /// path between consecutive blocks.
  std::vector<Var> forward(Tape& tape, const Architecture& arch, Var x, bool train_bn, bool detach_between = false);

  /// Every store (stem, instances, heads) under "<prefix>/..." ids.
  std::vector<StoreRef> store_refs(const std::string& prefix);
  std::vector<ParameterStore*> stores();
  std::size_t parameter_count() const;

 private:
  using Key = std::tuple<std::size_t, int, int>;
  Key key_for(std::size_t layer, int candidate, int scale) const;

  SearchSpaceDef space_;
  ParameterStore stem_;
  std::map<Key, BlockInstance> instances_;
  std::vector<Head> heads_;
};

/// Recording mode: train-mode batchnorm on a recording tape. Frozen mode:
/// eval-mode statistics on a non-recording tape. Validates the path.
std::vector<Var> supernet_forward(Supernet& net, Tape& tape, const Architecture& arch, Var input, ForwardMode mode);

}  // namespace boss
