#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "boss/autodiff.hpp"
#include "boss/random.hpp"

namespace boss {

enum class BlockKind { res_conv, res_att, mb_conv, nats_cell };

std::string block_kind_name(BlockKind kind);

/// Channel options for slimmable layers.
const std::vector<int>& slimmable_width_set();

/// Normal init with variance gain / fan_in.
Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 2.0);

struct BlockSpec {
  BlockKind kind = BlockKind::res_conv;
  int in_channels = 16;
  int out_channels = 16;
  int stride = 1;
  int heads = 4;         // res-att
  int kernel = 3;        // mb-conv: 3 or 5
  int expansion = 3;     // mb-conv: 3 or 6
  std::vector<int> width_set;  // nats-cell: admissible output widths
  std::size_t token_cap = 256;  // res-att
};

void validate_spec(const BlockSpec& spec);

/// One candidate block with its own parameters. Parameter shapes are a
/// function of the spec alone, so two instances built from one spec are
/// structurally identical.
///
/// A res-conv / res-att instance may be called at either stride with the
/// same tensors (the stride lives in the middle spatial conv), and accepts
/// inputs narrower than in_channels by slicing the leading input columns of
/// its 1x1 projections.
class BlockInstance {
 public:
  BlockInstance(BlockSpec spec, Rng& rng);

  const BlockSpec& spec() const { return spec_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  bool has_projection_shortcut() const { return params_.contains("short.w"); }

  Var forward(Tape& tape, Var x, bool train_bn);
  Var forward(Tape& tape, Var x, int stride, bool train_bn);
  /// Slimmable call for nats-cell blocks; width must be in spec.width_set.
  Var forward_width(Tape& tape, Var x, int width, bool train_bn);

  /// Width of the hidden (post-expansion / bottleneck) activations.
  int hidden_channels() const;

 private:
  Var conv_bn(Tape& tape, Var x, const std::string& name, int stride, bool train_bn, bool depthwise = false);
  Var shortcut(Tape& tape, Var x, int stride, bool train_bn);
  Var bn(Tape& tape, Var x, const std::string& name, bool train_bn, const std::string& stats_suffix = "");

  BlockSpec spec_;
  ParameterStore params_;
};

BlockInstance build_res_conv_mini(const BlockSpec& spec, Rng& rng);
BlockInstance build_res_att_mini(const BlockSpec& spec, Rng& rng);
BlockInstance build_mbconv_mini(const BlockSpec& spec, Rng& rng);
BlockInstance build_nats_cell(const BlockSpec& spec, Rng& rng);
BlockInstance build_block(const BlockSpec& spec, Rng& rng);

/// Forward of the leading width-slice of a max-width slimmable layer, using
/// that width's own batchnorm statistics.
Var slimmable_forward(BlockInstance& layer, int width, Var input, bool train_bn);

/// Scaled dot-product self-attention over the H*W tokens of x [N,C,H,W],
/// heads splitting C into contiguous groups. Exposed for testing.
Var multi_head_self_attention(Tape& tape, Var x, Var wq, Var wk, Var wv, int heads, std::size_t token_cap);

/// The attention distributions [N*heads, T, T] for the same inputs.
Var attention_weights(Tape& tape, Var x, Var wq, Var wk, int heads);

}  // namespace boss
