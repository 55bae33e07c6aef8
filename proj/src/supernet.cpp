#include "boss/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace boss {

namespace {

std::size_t uz(int v) { return static_cast<std::size_t>(v); }

void add_bn(ParameterStore& p, const std::string& name, std::size_t c) {
  p.add(name + ".g", Tensor({c}, 1.0));
  p.add(name + ".b", Tensor({c}, 0.0));
  p.add_buffer(name + ".mean", Tensor({c}, 0.0));
  p.add_buffer(name + ".var", Tensor({c}, 1.0));
}

Var apply_bn(Tape& tape, ParameterStore& p, const std::string& name, Var x, bool train_bn) {
  return batchnorm(x, tape.param(p, name + ".g"), tape.param(p, name + ".b"),
                   BatchNormStats{&p.buffer(name + ".mean"), &p.buffer(name + ".var")}, train_bn);
}

}  // namespace

Head::Head(int in_max, int hidden, int out, Rng& rng) : out_(out) {
  params_.add("fc1.w", he_normal({uz(in_max), uz(hidden)}, uz(in_max), rng));
  add_bn(params_, "bn1", uz(hidden));
  params_.add("fc2.w", he_normal({uz(hidden), uz(out)}, uz(hidden), rng));
  params_.add("fc2.b", Tensor({uz(out)}, 0.0));
}

Var Head::forward(Tape& tape, Var features, bool train_bn) {
  Var h = features;
  if (h.shape().size() == 4) h = reshape(global_avg_pool(h), {h.dim(0), h.dim(1)});
  Var w1 = tape.param(params_, "fc1.w");
  if (h.dim(1) > w1.dim(0)) {
    throw ShapeError("head: input has " + std::to_string(h.dim(1)) + " features, head accepts at most " +
                     std::to_string(w1.dim(0)));
  }
  if (h.dim(1) != w1.dim(0)) w1 = slice_leading(w1, {h.dim(1), w1.dim(1)});
  h = relu(apply_bn(tape, params_, "bn1", matmul(h, w1), train_bn));
  return add_bias(matmul(h, tape.param(params_, "fc2.w")), tape.param(params_, "fc2.b"));
}

Supernet::Supernet(SearchSpaceDef space, Rng& rng, int head_hidden, int head_out) : space_(std::move(space)) {
  validate_space(space_);
  const int c = space_.stem_channels;
  stem_.add("conv.w", he_normal({uz(c), 3, 3, 3}, 27, rng));
  add_bn(stem_, "bn", uz(c));

  if (space_.kind == SpaceKind::hytra && space_.stem_channels != space_.scale_channels(space_.initial_scale)) {
    throw std::invalid_argument(space_.name + ": stem channels must match the initial scale's channels");
  }

  for (std::size_t layer = 0; layer < space_.layers.size(); ++layer) {
    const LayerDef& def = space_.layers[layer];
    switch (space_.kind) {
      case SpaceKind::hytra: {
        const int top = std::min(space_.max_scale, space_.initial_scale + static_cast<int>(layer) + 1);
        for (std::size_t ci = 0; ci < def.candidates.size(); ++ci) {
          const Candidate& cand = def.candidates[ci];
          for (int s = space_.initial_scale; s <= top; ++s) {
            if (cand.kind == BlockKind::res_att &&
                std::find(space_.attention_scales.begin(), space_.attention_scales.end(), s) ==
                    space_.attention_scales.end()) {
              continue;
            }
            BlockSpec spec;
            spec.kind = cand.kind;
            spec.in_channels = space_.scale_channels(s);
            spec.out_channels = space_.scale_channels(s);
            spec.stride = s > space_.initial_scale ? 2 : 1;
            spec.heads = space_.heads;
            instances_.emplace(Key{layer, static_cast<int>(ci), s}, BlockInstance(spec, rng));
          }
        }
        break;
      }
      case SpaceKind::mbconv:
        for (std::size_t ci = 0; ci < def.candidates.size(); ++ci) {
          BlockSpec spec;
          spec.kind = BlockKind::mb_conv;
          spec.in_channels = def.in_channels;
          spec.out_channels = def.out_channels;
          spec.stride = def.stride;
          spec.kernel = def.candidates[ci].kernel;
          spec.expansion = def.candidates[ci].expansion;
          instances_.emplace(Key{layer, static_cast<int>(ci), space_.initial_scale}, BlockInstance(spec, rng));
        }
        break;
      case SpaceKind::nats_size: {
        BlockSpec spec;
        spec.kind = BlockKind::nats_cell;
        spec.in_channels = def.in_channels;
        spec.out_channels = def.out_channels;
        spec.stride = def.stride;
        for (const Candidate& cand : def.candidates) spec.width_set.push_back(cand.width);
        instances_.emplace(Key{layer, 0, space_.initial_scale}, BlockInstance(spec, rng));
        break;
      }
    }
  }
  for (std::size_t k = 0; k < space_.block_count(); ++k) {
    heads_.emplace_back(max_block_channels(k), head_hidden, head_out, rng);
  }
}

Supernet::Key Supernet::key_for(std::size_t layer, int candidate, int scale) const {
  if (space_.kind == SpaceKind::nats_size) return {layer, 0, space_.initial_scale};
  if (space_.kind == SpaceKind::mbconv) return {layer, candidate, space_.initial_scale};
  return {layer, candidate, scale};
}

BlockInstance& Supernet::instance(std::size_t layer, int candidate, int scale) {
  auto it = instances_.find(key_for(layer, candidate, scale));
  if (it == instances_.end()) {
    throw std::invalid_argument(space_.name + ": no block instance for layer " + std::to_string(layer + 1) +
                                ", candidate " + std::to_string(candidate) + ", scale " + std::to_string(scale));
  }
  return it->second;
}

int Supernet::max_block_channels(std::size_t k) const {
  const std::size_t last = space_.first_layer(k) + space_.block_sizes.at(k) - 1;
  switch (space_.kind) {
    case SpaceKind::hytra:
      return space_.scale_channels(std::min(space_.max_scale, space_.initial_scale + static_cast<int>(last) + 1));
    case SpaceKind::mbconv:
    case SpaceKind::nats_size:
      return space_.layers[last].out_channels;
  }
  return 0;
}

Var Supernet::forward_stem(Tape& tape, Var x, bool train_bn) {
  if (x.shape().size() != 4 || x.dim(1) != 3) {
    throw ShapeError("stem: expected [N,3,H,W] input, got " + shape_str(x.shape()));
  }
  return relu(apply_bn(tape, stem_, "bn", conv2d(x, tape.param(stem_, "conv.w"), space_.stem_stride), train_bn));
}

Var Supernet::forward_block(Tape& tape, std::size_t k, const BlockPath& path, Var x, int entry_scale, bool train_bn) {
  const std::size_t begin = space_.first_layer(k);
  if (path.size() != space_.block_sizes.at(k)) {
    throw std::invalid_argument(space_.name + ": block " + std::to_string(k + 1) + " path has " +
                                std::to_string(path.size()) + " genes, expected " +
                                std::to_string(space_.block_sizes[k]));
  }
  int scale = entry_scale < 0 ? space_.initial_scale : entry_scale;
  if (space_.kind == SpaceKind::hytra) {
    if (auto v = validate_hytra_path(space_, path, scale, begin)) throw std::invalid_argument(space_.name + ": " + *v);
  }
  Var h = x;
  for (std::size_t i = 0; i < path.size(); ++i) {
    const std::size_t layer = begin + i;
    const Gene& g = path[i];
    const auto& cands = space_.layers[layer].candidates;
    if (g.candidate < 0 || static_cast<std::size_t>(g.candidate) >= cands.size()) {
      throw std::invalid_argument(space_.name + ": layer " + std::to_string(layer + 1) + " candidate out of range");
    }
    switch (space_.kind) {
      case SpaceKind::hytra: {
        const int next = scale + (g.stride == 2 ? 1 : 0);
        h = instance(layer, g.candidate, next).forward(tape, h, g.stride, train_bn);
        scale = next;
        break;
      }
      case SpaceKind::mbconv:
        h = instance(layer, g.candidate, scale).forward(tape, h, train_bn);
        break;
      case SpaceKind::nats_size:
        h = instance(layer, g.candidate, scale)
                .forward_width(tape, h, cands[static_cast<std::size_t>(g.candidate)].width, train_bn);
        break;
    }
  }
  return h;
}

std::vector<Var> Supernet::forward(Tape& tape, const Architecture& arch, Var x, bool train_bn, bool detach_between) {
  validate_architecture(space_, arch);
  std::vector<Var> outs;
  Var h = forward_stem(tape, x, train_bn);
  int scale = space_.initial_scale;
  for (std::size_t k = 0; k < arch.blocks.size(); ++k) {
    if (detach_between && k > 0) h = tape.detach(h);
    h = forward_block(tape, k, arch.blocks[k], h, scale, train_bn);
    scale = path_exit_scale(space_, arch.blocks[k], scale);
    outs.push_back(h);
  }
  return outs;
}

std::vector<StoreRef> Supernet::store_refs(const std::string& prefix) {
  std::vector<StoreRef> refs;
  refs.push_back({prefix + "/stem", &stem_});
  for (auto& [key, inst] : instances_) {
    const auto& [layer, cand, scale] = key;
    refs.push_back({prefix + "/L" + std::to_string(layer) + "/c" + std::to_string(cand) + "/s" + std::to_string(scale),
                    &inst.params()});
  }
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    refs.push_back({prefix + "/proj" + std::to_string(k), &heads_[k].params()});
  }
  return refs;
}

std::vector<ParameterStore*> Supernet::stores() {
  std::vector<ParameterStore*> out;
  for (auto& r : store_refs("")) out.push_back(r.store);
  return out;
}

std::size_t Supernet::parameter_count() const {
  std::size_t n = stem_.parameter_count();
  for (const auto& [key, inst] : instances_) n += inst.params().parameter_count();
  for (const auto& h : heads_) n += h.params().parameter_count();
  return n;
}

std::vector<Var> supernet_forward(Supernet& net, Tape& tape, const Architecture& arch, Var input, ForwardMode mode) {
  if (mode == ForwardMode::frozen && tape.recording()) {
    throw std::invalid_argument("supernet_forward: frozen mode needs a non-recording tape");
  }
  return net.forward(tape, arch, input, mode == ForwardMode::recording);
}

}  // namespace boss
