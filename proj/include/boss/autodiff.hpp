#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "boss/tensor.hpp"

namespace boss {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t dim(std::size_t i) const { return value().shape.at(i); }
};

/// Ordered record of primitive applications. A recording tape keeps the
/// closures needed for one reverse pass; a frozen tape only evaluates.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t);
  /// Binds a trainable parameter. Repeated binds of the same (store, id)
  /// return the same leaf, so shared weights accumulate one gradient.
  Var param(ParameterStore& store, const std::string& id);
  /// Read-only bind for frozen tapes.
  Var param(const ParameterStore& store, const std::string& id);
  /// Stop-gradient: a new leaf carrying the same value.
  Var detach(Var v);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const char* kind(std::size_t id) const { return nodes_[id].kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  /// Reverse pass from a scalar loss. Every parameter of every store bound
  /// to this tape receives a gradient (zero when unreachable). Consumes the
  /// tape.
  void backward(Var loss);

  /// Stores bound through param(); deterministic bind order.
  const std::vector<ParameterStore*>& bound_stores() const { return stores_; }

  // Used by primitive implementations.
  Var push(const char* kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::vector<double>& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

 private:
  struct Node {
    const char* kind = "";
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    std::vector<double> grad;
    ParameterStore* store = nullptr;
    std::string param_id;
  };

  bool recording_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::map<std::pair<const ParameterStore*, std::string>, std::size_t> bound_;
  std::vector<ParameterStore*> stores_;
};

/// Running statistics consumed/updated by batchnorm.
struct BatchNormStats {
  Tensor* mean = nullptr;
  Tensor* var = nullptr;
  double momentum = 0.9;
  double eps = 1e-5;
};

enum class Primitive {
  matmul,
  conv2d,
  depthwise_conv2d,
  add,
  relu,
  batchnorm_train,
  batchnorm_eval,
  softmax_lastdim,
  global_avg_pool,
  reshape,
  scale,
  concat_channels,
};

Primitive primitive_from_name(const std::string& name);
std::string primitive_name(Primitive p);

struct PrimitiveAttrs {
  int stride = 1;
  double factor = 1.0;
  Shape shape;
  BatchNormStats stats;
};

/// Uniform entry point over the primitives; rejects unknown kinds and
/// incompatible shapes.
Var forward_primitive(Primitive kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs = {});
Var forward_primitive(const std::string& kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs = {});

// Primitives. Convolutions use floor-symmetric "same" zero padding, so
// stride 2 maps a side H to ceil(H / 2).
Var matmul(Var a, Var b);
/// Batched [B,M,K] x [B,K,N]; with transpose_b the second operand is [B,N,K].
Var bmm(Var a, Var b, bool transpose_b = false);
Var conv2d(Var x, Var w, int stride = 1);
Var depthwise_conv2d(Var x, Var w, int stride = 1);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a bias vector along dim 1 (features of [N,F] or channels of [N,C,H,W]).
Var add_bias(Var x, Var b);
Var relu(Var x);
/// Per-channel batchnorm over dim 1 of a [N,C,...] tensor. train=true uses
/// batch statistics and updates the running ones; train=false reads them.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats stats, bool train);
Var softmax_lastdim(Var x);
Var global_avg_pool(Var x);
Var reshape(Var x, Shape shape);
Var transpose_last2(Var x);
Var scale(Var x, double factor);
Var concat_channels(std::span<const Var> xs);
/// Leading block of x with the given (elementwise smaller or equal) shape.
Var slice_leading(Var x, Shape shape);
Var l2_normalize(Var x, double eps = 1e-12);
Var sum(Var x);
/// Mean softmax cross-entropy of [N,C] logits against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Output side of a "same"-padded convolution.
inline std::size_t conv_out_side(std::size_t side, int stride) {
  return (side + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
}

}  // namespace boss
