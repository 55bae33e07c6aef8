#include "boss/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace boss {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
  Tensor t(std::move(shape));
  const double std = std::sqrt(gain / static_cast<double>(fan_in));
  for (double& v : t.data) v = std * standard_normal(rng);
  return t;
}

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

void add_bn(ParameterStore& p, const std::string& name, int channels, const std::vector<int>& widths = {}) {
  p.add(name + ".g", Tensor({uz(channels)}, 1.0));
  p.add(name + ".b", Tensor({uz(channels)}, 0.0));
  if (widths.empty()) {
    p.add_buffer(name + ".mean", Tensor({uz(channels)}, 0.0));
    p.add_buffer(name + ".var", Tensor({uz(channels)}, 1.0));
  } else {
    for (int w : widths) {
      p.add_buffer(name + ".mean@" + std::to_string(w), Tensor({uz(w)}, 0.0));
      p.add_buffer(name + ".var@" + std::to_string(w), Tensor({uz(w)}, 1.0));
    }
  }
}

void add_conv(ParameterStore& p, const std::string& name, int out, int in, int k, Rng& rng) {
  p.add(name + ".w", he_normal({uz(out), uz(in), uz(k), uz(k)}, uz(in * k * k), rng));
}

// Binds w, slicing its leading input columns when the input is narrower.
Var bind_sliced(Tape& tape, ParameterStore& p, const std::string& id, std::size_t in_channels) {
  Var w = tape.param(p, id);
  if (w.dim(1) == in_channels) return w;
  if (in_channels > w.dim(1)) {
    throw ShapeError(id + ": input has " + std::to_string(in_channels) + " channels, weight accepts at most " +
                     std::to_string(w.dim(1)));
  }
  Shape s = w.shape();
  s[1] = in_channels;
  return slice_leading(w, s);
}

}  // namespace

std::string block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::res_conv: return "res-conv";
    case BlockKind::res_att: return "res-att";
    case BlockKind::mb_conv: return "mb-conv";
    case BlockKind::nats_cell: return "nats-cell";
  }
  return "?";
}

const std::vector<int>& slimmable_width_set() {
  static const std::vector<int> widths = {8, 16, 24, 32, 40, 48, 56, 64};
  return widths;
}

void validate_spec(const BlockSpec& spec) {
  const std::string kind = block_kind_name(spec.kind);
  if (spec.in_channels <= 0 || spec.out_channels <= 0) {
    throw std::invalid_argument(kind + ": channel counts must be positive");
  }
  if (spec.stride != 1 && spec.stride != 2) {
    throw std::invalid_argument(kind + ": stride must be 1 or 2, got " + std::to_string(spec.stride));
  }
  switch (spec.kind) {
    case BlockKind::res_conv:
      if (spec.in_channels < 2) {
        throw std::invalid_argument("res-conv: in-channels must be >= 2 (bottleneck halves the width), got " +
                                    std::to_string(spec.in_channels));
      }
      break;
    case BlockKind::res_att:
      if (spec.heads <= 0 || spec.out_channels % spec.heads != 0) {
        throw std::invalid_argument("res-att: out-channels " + std::to_string(spec.out_channels) +
                                    " not divisible by heads " + std::to_string(spec.heads));
      }
      break;
    case BlockKind::mb_conv:
      if (spec.kernel != 3 && spec.kernel != 5) {
        throw std::invalid_argument("mb-conv: kernel must be 3 or 5, got " + std::to_string(spec.kernel));
      }
      if (spec.expansion != 3 && spec.expansion != 6) {
        throw std::invalid_argument("mb-conv: expansion must be 3 or 6, got " + std::to_string(spec.expansion));
      }
      break;
    case BlockKind::nats_cell:
      if (spec.width_set.empty()) throw std::invalid_argument("nats-cell: empty width set");
      for (int w : spec.width_set) {
        if (w <= 0 || w > spec.out_channels) {
          throw std::invalid_argument("nats-cell: width " + std::to_string(w) + " outside (0, " +
                                      std::to_string(spec.out_channels) + "]");
        }
      }
      break;
  }
}

BlockInstance::BlockInstance(BlockSpec spec, Rng& rng) : spec_(std::move(spec)) {
  validate_spec(spec_);
  const int in = spec_.in_channels, out = spec_.out_channels;
  const bool projection = spec_.stride == 2 || in != out;
  switch (spec_.kind) {
    case BlockKind::res_conv: {
      const int mid = in / 2;
      add_conv(params_, "reduce", mid, in, 1, rng);
      add_bn(params_, "reduce.bn", mid);
      add_conv(params_, "mid", mid, mid, 3, rng);
      add_bn(params_, "mid.bn", mid);
      add_conv(params_, "expand", out, mid, 1, rng);
      add_bn(params_, "expand.bn", out);
      if (projection) {
        add_conv(params_, "short", out, in, 1, rng);
        add_bn(params_, "short.bn", out);
      }
      break;
    }
    case BlockKind::res_att: {
      add_conv(params_, "in", out, in, 1, rng);
      add_bn(params_, "in.bn", out);
      params_.add("pos.w", he_normal({uz(out), 1, 3, 3}, 9, rng));
      add_bn(params_, "pos.bn", out);
      for (const char* name : {"q", "k", "v"}) {
        params_.add(std::string(name) + ".w", he_normal({uz(out), uz(out), 1, 1}, uz(out), rng, 1.0));
      }
      add_conv(params_, "out", out, out, 1, rng);
      add_bn(params_, "out.bn", out);
      if (projection) {
        add_conv(params_, "short", out, in, 1, rng);
        add_bn(params_, "short.bn", out);
      }
      break;
    }
    case BlockKind::mb_conv: {
      const int hidden = in * spec_.expansion;
      const int k = spec_.kernel;
      add_conv(params_, "expand", hidden, in, 1, rng);
      add_bn(params_, "expand.bn", hidden);
      params_.add("dw.w", he_normal({uz(hidden), 1, uz(k), uz(k)}, uz(k * k), rng));
      add_bn(params_, "dw.bn", hidden);
      add_conv(params_, "project", out, hidden, 1, rng);
      add_bn(params_, "project.bn", out);
      break;
    }
    case BlockKind::nats_cell: {
      add_conv(params_, "conv", out, in, 3, rng);
      add_bn(params_, "bn", out, spec_.width_set);
      break;
    }
  }
}

int BlockInstance::hidden_channels() const {
  switch (spec_.kind) {
    case BlockKind::res_conv: return spec_.in_channels / 2;
    case BlockKind::res_att: return spec_.out_channels;
    case BlockKind::mb_conv: return spec_.in_channels * spec_.expansion;
    case BlockKind::nats_cell: return spec_.out_channels;
  }
  return 0;
}

Var BlockInstance::bn(Tape& tape, Var x, const std::string& name, bool train_bn, const std::string& stats_suffix) {
  BatchNormStats stats{&params_.buffer(name + ".mean" + stats_suffix), &params_.buffer(name + ".var" + stats_suffix)};
  Var g = tape.param(params_, name + ".g");
  Var b = tape.param(params_, name + ".b");
  const std::size_t c = x.dim(1);
  if (g.dim(0) != c) {
    g = slice_leading(g, {c});
    b = slice_leading(b, {c});
  }
  return batchnorm(x, g, b, stats, train_bn);
}

Var BlockInstance::conv_bn(Tape& tape, Var x, const std::string& name, int stride, bool train_bn, bool depthwise) {
  Var y = depthwise ? depthwise_conv2d(x, tape.param(params_, name + ".w"), stride)
                    : conv2d(x, bind_sliced(tape, params_, name + ".w", x.dim(1)), stride);
  return bn(tape, y, name + ".bn", train_bn);
}

Var BlockInstance::shortcut(Tape& tape, Var x, int stride, bool train_bn) {
  const bool identity = stride == 1 && x.dim(1) == static_cast<std::size_t>(spec_.out_channels);
  if (identity) return x;
  if (!has_projection_shortcut()) {
    throw std::invalid_argument(block_kind_name(spec_.kind) + ": call needs a projection shortcut (stride " +
                                std::to_string(stride) + ", " + std::to_string(x.dim(1)) + " -> " +
                                std::to_string(spec_.out_channels) + " channels) but the spec declares none");
  }
  return conv_bn(tape, x, "short", stride, train_bn);
}

Var BlockInstance::forward(Tape& tape, Var x, bool train_bn) { return forward(tape, x, spec_.stride, train_bn); }

Var BlockInstance::forward(Tape& tape, Var x, int stride, bool train_bn) {
  if (x.shape().size() != 4) throw ShapeError(block_kind_name(spec_.kind) + ": input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) > static_cast<std::size_t>(spec_.in_channels)) {
    throw ShapeError(block_kind_name(spec_.kind) + ": input has " + std::to_string(x.dim(1)) +
                     " channels, block accepts at most " + std::to_string(spec_.in_channels));
  }
  switch (spec_.kind) {
    case BlockKind::res_conv: {
      Var h = relu(conv_bn(tape, x, "reduce", 1, train_bn));
      h = relu(conv_bn(tape, h, "mid", stride, train_bn));
      h = conv_bn(tape, h, "expand", 1, train_bn);
      return add(shortcut(tape, x, stride, train_bn), h);
    }
    case BlockKind::res_att: {
      Var h = relu(conv_bn(tape, x, "in", 1, train_bn));
      h = conv_bn(tape, h, "pos", stride, train_bn, /*depthwise=*/true);
      h = multi_head_self_attention(tape, h, tape.param(params_, "q.w"), tape.param(params_, "k.w"),
                                    tape.param(params_, "v.w"), spec_.heads, spec_.token_cap);
      h = conv_bn(tape, h, "out", 1, train_bn);
      return add(shortcut(tape, x, stride, train_bn), h);
    }
    case BlockKind::mb_conv: {
      if (x.dim(1) != static_cast<std::size_t>(spec_.in_channels)) {
        throw ShapeError("mb-conv: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                         std::to_string(spec_.in_channels));
      }
      Var h = relu(conv_bn(tape, x, "expand", 1, train_bn));
      h = relu(conv_bn(tape, h, "dw", stride, train_bn, /*depthwise=*/true));
      h = conv_bn(tape, h, "project", 1, train_bn);
      if (stride == 1 && spec_.in_channels == spec_.out_channels) return add(x, h);
      return h;
    }
    case BlockKind::nats_cell:
      if (stride != spec_.stride) {
        throw std::invalid_argument("nats-cell: stride is fixed by the spec");
      }
      return forward_width(tape, x, spec_.out_channels, train_bn);
  }
  throw std::logic_error("unreachable");
}

Var BlockInstance::forward_width(Tape& tape, Var x, int width, bool train_bn) {
  if (spec_.kind != BlockKind::nats_cell) throw std::invalid_argument("forward_width on a non-slimmable block");
  if (std::find(spec_.width_set.begin(), spec_.width_set.end(), width) == spec_.width_set.end()) {
    throw std::invalid_argument("nats-cell: width " + std::to_string(width) + " is not in the configured width set");
  }
  if (x.dim(1) > static_cast<std::size_t>(spec_.in_channels)) {
    throw ShapeError("nats-cell: input has " + std::to_string(x.dim(1)) + " channels, layer accepts at most " +
                     std::to_string(spec_.in_channels));
  }
  Var w = tape.param(params_, "conv.w");
  const Shape slice{uz(width), x.dim(1), 3, 3};
  if (w.shape() != slice) w = slice_leading(w, slice);
  Var y = conv2d(x, w, spec_.stride);
  return relu(bn(tape, y, "bn", train_bn, "@" + std::to_string(width)));
}

BlockInstance build_res_conv_mini(const BlockSpec& spec, Rng& rng) {
  if (spec.kind != BlockKind::res_conv) throw std::invalid_argument("build_res_conv_mini: spec kind is " + block_kind_name(spec.kind));
  return BlockInstance(spec, rng);
}

BlockInstance build_res_att_mini(const BlockSpec& spec, Rng& rng) {
  if (spec.kind != BlockKind::res_att) throw std::invalid_argument("build_res_att_mini: spec kind is " + block_kind_name(spec.kind));
  return BlockInstance(spec, rng);
}

BlockInstance build_mbconv_mini(const BlockSpec& spec, Rng& rng) {
  if (spec.kind != BlockKind::mb_conv) throw std::invalid_argument("build_mbconv_mini: spec kind is " + block_kind_name(spec.kind));
  return BlockInstance(spec, rng);
}

BlockInstance build_nats_cell(const BlockSpec& spec, Rng& rng) {
  if (spec.kind != BlockKind::nats_cell) throw std::invalid_argument("build_nats_cell: spec kind is " + block_kind_name(spec.kind));
  return BlockInstance(spec, rng);
}

BlockInstance build_block(const BlockSpec& spec, Rng& rng) { return BlockInstance(spec, rng); }

Var slimmable_forward(BlockInstance& layer, int width, Var input, bool train_bn) {
  return layer.forward_width(*input.tape, input, width, train_bn);
}

namespace {

// [N,C,H,W] -> [N*heads, T, d]
Var to_heads(Var x, int heads) {
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2) * x.dim(3);
  const std::size_t d = c / uz(heads);
  return transpose_last2(reshape(x, {n * uz(heads), d, t}));
}

}  // namespace

Var attention_weights(Tape& tape, Var x, Var wq, Var wk, int heads) {
  (void)tape;
  const std::size_t c = x.dim(1);
  if (heads <= 0 || c % uz(heads) != 0) {
    throw ShapeError("attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
  const double d = static_cast<double>(c / uz(heads));
  Var q = to_heads(conv2d(x, wq), heads);
  Var k = to_heads(conv2d(x, wk), heads);
  return softmax_lastdim(scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(d)));
}

Var multi_head_self_attention(Tape& tape, Var x, Var wq, Var wk, Var wv, int heads, std::size_t token_cap) {
  const std::size_t tokens = x.dim(2) * x.dim(3);
  if (tokens > token_cap) {
    throw std::invalid_argument("res-att: " + std::to_string(tokens) + " tokens exceeds the cap of " +
                                std::to_string(token_cap) + "; attention placed at too large a scale");
  }
  Var attn = attention_weights(tape, x, wq, wk, heads);
  Var v = to_heads(conv2d(x, wv), heads);
  Var o = bmm(attn, v);  // [N*heads, T, d]
  return reshape(transpose_last2(o), x.shape());
}

}  // namespace boss
