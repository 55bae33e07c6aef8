#include "boss/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace boss {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap mmap(double* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.tape) throw std::invalid_argument("variable is not bound to a tape");
    if (t && v.tape != t) throw std::invalid_argument("variables belong to different tapes");
    t = v.tape;
  }
  return *t;
}

void require_rank(const char* op, const Var& v, std::size_t rank, const char* what) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void check_stride(const char* op, int stride) {
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument(std::string(op) + ": stride must be 1 or 2, got " + std::to_string(stride));
  }
}

struct ConvGeometry {
  std::size_t n, cin, h, w, k, stride, pad, ho, wo;
};

// Unrolls one image into [cin*k*k, ho*wo] patches.
void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Row-major strides for an N-d shape.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Visits every leading-block element: fn(src_offset, dst_offset, run_length)
// with the innermost dimension copied as one contiguous run.
template <typename Fn>
void for_each_leading_run(const Shape& full, const Shape& part, Fn&& fn) {
  const std::size_t rank = full.size();
  if (rank == 0) {
    fn(0, 0, 1);
    return;
  }
  const auto fs = strides_of(full);
  const auto ps = strides_of(part);
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t run = part[rank - 1];
  while (true) {
    std::size_t so = 0, po = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      so += idx[d] * fs[d];
      po += idx[d] * ps[d];
    }
    fn(so, po, run);
    std::size_t d = rank - 1;
    while (d-- > 0) {
      if (++idx[d] < part[d]) break;
      idx[d] = 0;
    }
    if (d == static_cast<std::size_t>(-1)) break;
  }
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape) throw std::invalid_argument("variable is not bound to a tape");
  return tape->value(id);
}

Var Tape::push(const char* kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (consumed_) throw std::logic_error("tape already consumed");
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  if (recording_) {
    for (auto in : inputs) node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
    if (node.needs_grad) node.backward = std::move(fn);
  }
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor t) {
  t.grad.reset();
  return push("constant", std::move(t), {}, nullptr);
}

Var Tape::param(ParameterStore& store, const std::string& id) {
  auto key = std::make_pair(static_cast<const ParameterStore*>(&store), id);
  if (auto it = bound_.find(key); it != bound_.end()) return Var{this, it->second};
  Tensor t = store.at(id);
  t.grad.reset();
  Var v = push("param", std::move(t), {}, nullptr);
  if (recording_) {
    nodes_[v.id].needs_grad = true;
    nodes_[v.id].store = &store;
    nodes_[v.id].param_id = id;
    if (std::find(stores_.begin(), stores_.end(), &store) == stores_.end()) stores_.push_back(&store);
  }
  bound_.emplace(std::move(key), v.id);
  return v;
}

Var Tape::param(const ParameterStore& store, const std::string& id) {
  if (recording_) throw std::logic_error("read-only parameter bind on a recording tape: " + id);
  auto key = std::make_pair(&store, id);
  if (auto it = bound_.find(key); it != bound_.end()) return Var{this, it->second};
  Tensor t = store.at(id);
  t.grad.reset();
  Var v = push("param", std::move(t), {}, nullptr);
  bound_.emplace(std::move(key), v.id);
  return v;
}

Var Tape::detach(Var v) {
  Tensor t = value(v);
  return push("detach", std::move(t), {}, nullptr);
}

std::vector<double>& Tape::grad(std::size_t id) {
  auto& g = nodes_[id].grad;
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

void Tape::backward(Var loss) {
  if (!recording_) throw std::logic_error("backward on a frozen tape");
  if (consumed_) throw std::logic_error("tape already consumed");
  if (loss.tape != this) throw std::invalid_argument("loss was not produced by this tape");
  if (value(loss).size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
  }
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && !node.grad.empty()) node.backward(*this, i);
  }
  for (auto* store : stores_) store->zero_grad();
  for (auto& node : nodes_) {
    if (!node.store || node.grad.empty()) continue;
    auto& g = *node.store->at(node.param_id).grad;
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += node.grad[j];
  }
  consumed_ = true;
  nodes_.clear();
  nodes_.shrink_to_fit();
  bound_.clear();
}

// ---------------------------------------------------------------------------
// Primitive dispatch

Primitive primitive_from_name(const std::string& name) {
  static const std::map<std::string, Primitive> table = {
      {"matmul", Primitive::matmul},
      {"conv2d", Primitive::conv2d},
      {"depthwise-conv2d", Primitive::depthwise_conv2d},
      {"add", Primitive::add},
      {"relu", Primitive::relu},
      {"batchnorm-train", Primitive::batchnorm_train},
      {"batchnorm-eval", Primitive::batchnorm_eval},
      {"softmax-lastdim", Primitive::softmax_lastdim},
      {"global-avg-pool", Primitive::global_avg_pool},
      {"reshape", Primitive::reshape},
      {"scale", Primitive::scale},
      {"concat-channels", Primitive::concat_channels},
  };
  auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown primitive kind: " + name);
  return it->second;
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::matmul: return "matmul";
    case Primitive::conv2d: return "conv2d";
    case Primitive::depthwise_conv2d: return "depthwise-conv2d";
    case Primitive::add: return "add";
    case Primitive::relu: return "relu";
    case Primitive::batchnorm_train: return "batchnorm-train";
    case Primitive::batchnorm_eval: return "batchnorm-eval";
    case Primitive::softmax_lastdim: return "softmax-lastdim";
    case Primitive::global_avg_pool: return "global-avg-pool";
    case Primitive::reshape: return "reshape";
    case Primitive::scale: return "scale";
    case Primitive::concat_channels: return "concat-channels";
  }
  throw std::invalid_argument("unknown primitive kind");
}

Var forward_primitive(Primitive kind, std::span<const Var> in, const PrimitiveAttrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(primitive_name(kind) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::matmul: arity(2); return matmul(in[0], in[1]);
    case Primitive::conv2d: arity(2); return conv2d(in[0], in[1], attrs.stride);
    case Primitive::depthwise_conv2d: arity(2); return depthwise_conv2d(in[0], in[1], attrs.stride);
    case Primitive::add: arity(2); return add(in[0], in[1]);
    case Primitive::relu: arity(1); return relu(in[0]);
    case Primitive::batchnorm_train: arity(3); return batchnorm(in[0], in[1], in[2], attrs.stats, true);
    case Primitive::batchnorm_eval: arity(3); return batchnorm(in[0], in[1], in[2], attrs.stats, false);
    case Primitive::softmax_lastdim: arity(1); return softmax_lastdim(in[0]);
    case Primitive::global_avg_pool: arity(1); return global_avg_pool(in[0]);
    case Primitive::reshape: arity(1); return reshape(in[0], attrs.shape);
    case Primitive::scale: arity(1); return scale(in[0], attrs.factor);
    case Primitive::concat_channels: return concat_channels(in);
  }
  throw std::invalid_argument("unknown primitive kind");
}

Var forward_primitive(const std::string& kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs) {
  return forward_primitive(primitive_from_name(kind), inputs, attrs);
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + shape_str(a.shape()) + " rhs " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  mmap(out.data.data(), m, n).noalias() = cmap(a.value().data.data(), m, k) * cmap(b.value().data.data(), k, n);
  const std::size_t ia = a.id, ib = b.id;
  return tape.push("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const auto dc = cmap(t.grad(self).data(), m, n);
    if (t.needs_grad(ia)) {
      mmap(t.grad(ia).data(), m, k).noalias() += dc * cmap(t.value(ib).data.data(), k, n).transpose();
    }
    if (t.needs_grad(ib)) {
      mmap(t.grad(ib).data(), k, n).noalias() += cmap(t.value(ia).data.data(), m, k).transpose() * dc;
    }
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  Tape& tape = same_tape({a, b});
  require_rank("bmm", a, 3, "lhs");
  require_rank("bmm", b, 3, "rhs");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw ShapeError("bmm: incompatible operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     (transpose_b ? " (rhs transposed)" : ""));
  }
  Tensor out({batch, m, n});
  const double* pa = a.value().data.data();
  const double* pb = b.value().data.data();
  for (std::size_t i = 0; i < batch; ++i) {
    auto c = mmap(out.data.data() + i * m * n, m, n);
    auto am = cmap(pa + i * m * k, m, k);
    if (transpose_b) {
      c.noalias() = am * cmap(pb + i * n * k, n, k).transpose();
    } else {
      c.noalias() = am * cmap(pb + i * k * n, k, n);
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape.push("bmm", std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data();
    const double* va = t.value(ia).data.data();
    const double* vb = t.value(ib).data.data();
    const bool ga = t.needs_grad(ia), gb = t.needs_grad(ib);
    double* da = ga ? t.grad(ia).data() : nullptr;
    double* db = gb ? t.grad(ib).data() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      auto dc = cmap(g + i * m * n, m, n);
      auto am = cmap(va + i * m * k, m, k);
      if (transpose_b) {
        auto bm = cmap(vb + i * n * k, n, k);
        if (ga) mmap(da + i * m * k, m, k).noalias() += dc * bm;
        if (gb) mmap(db + i * n * k, n, k).noalias() += dc.transpose() * am;
      } else {
        auto bm = cmap(vb + i * k * n, k, n);
        if (ga) mmap(da + i * m * k, m, k).noalias() += dc * bm.transpose();
        if (gb) mmap(db + i * k * n, k, n).noalias() += am.transpose() * dc;
      }
    }
  });
}

Var conv2d(Var x, Var w, int stride) {
  Tape& tape = same_tape({x, w});
  check_stride("conv2d", stride);
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(xs[1]) + " != weight in-channels " +
                     std::to_string(ws[1]) + " (input " + shape_str(xs) + ", weight " + shape_str(ws) + ")");
  }
  if (ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd side, got " + shape_str(ws));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[2], static_cast<std::size_t>(stride), (ws[2] - 1) / 2, 0, 0};
  g.ho = conv_out_side(g.h, stride);
  g.wo = conv_out_side(g.w, stride);
  const std::size_t cout = ws[0];
  const std::size_t kk = g.cin * g.k * g.k;
  const std::size_t hw_out = g.ho * g.wo;
  const bool direct = g.k == 1 && stride == 1;

  Tensor out({g.n, cout, g.ho, g.wo});
  const double* px = x.value().data.data();
  const auto wm = cmap(w.value().data.data(), cout, kk);
  std::vector<double> cols(direct ? 0 : kk * hw_out);
  for (std::size_t i = 0; i < g.n; ++i) {
    const double* img = px + i * g.cin * g.h * g.w;
    const double* src = img;
    if (!direct) {
      im2col(img, g, cols.data());
      src = cols.data();
    }
    mmap(out.data.data() + i * cout * hw_out, cout, hw_out).noalias() = wm * cmap(src, kk, hw_out);
  }

  const std::size_t ix = x.id, iw = w.id;
  return tape.push("conv2d", std::move(out), {ix, iw}, [=](Tape& t, std::size_t self) {
    const double* gout = t.grad(self).data();
    const double* px = t.value(ix).data.data();
    const auto wm = cmap(t.value(iw).data.data(), cout, kk);
    const bool gx = t.needs_grad(ix), gw = t.needs_grad(iw);
    double* dx = gx ? t.grad(ix).data() : nullptr;
    double* dw = gw ? t.grad(iw).data() : nullptr;
    std::vector<double> cols(direct ? 0 : kk * hw_out);
    std::vector<double> dcols(direct ? 0 : kk * hw_out);
    for (std::size_t i = 0; i < g.n; ++i) {
      const auto go = cmap(gout + i * cout * hw_out, cout, hw_out);
      const double* img = px + i * g.cin * g.h * g.w;
      if (gw) {
        const double* src = img;
        if (!direct) {
          im2col(img, g, cols.data());
          src = cols.data();
        }
        mmap(dw, cout, kk).noalias() += go * cmap(src, kk, hw_out).transpose();
      }
      if (gx) {
        double* dimg = dx + i * g.cin * g.h * g.w;
        if (direct) {
          mmap(dimg, kk, hw_out).noalias() += wm.transpose() * go;
        } else {
          mmap(dcols.data(), kk, hw_out).noalias() = wm.transpose() * go;
          col2im_add(dcols.data(), g, dimg);
        }
      }
    }
  });
}

Var depthwise_conv2d(Var x, Var w, int stride) {
  Tape& tape = same_tape({x, w});
  check_stride("depthwise-conv2d", stride);
  require_rank("depthwise-conv2d", x, 4, "input");
  require_rank("depthwise-conv2d", w, 4, "weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[0] != xs[1] || ws[1] != 1) {
    throw ShapeError("depthwise-conv2d: weight " + shape_str(ws) + " does not match input channels " +
                     std::to_string(xs[1]) + " (expected [" + std::to_string(xs[1]) + ",1,k,k])");
  }
  if (ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw ShapeError("depthwise-conv2d: kernel must be square with odd side, got " + shape_str(ws));
  }
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3], k = ws[2];
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t ho = conv_out_side(h, stride), wo = conv_out_side(wd, stride);
  const auto s = static_cast<std::ptrdiff_t>(stride);

  // Valid output columns for tap kx: ox*s + kx - pad in [0, wd).
  std::vector<std::size_t> lo(k), hi(k);
  for (std::size_t kx = 0; kx < k; ++kx) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
    std::ptrdiff_t a = 0;
    while (a * s + off < 0) ++a;
    std::ptrdiff_t b = static_cast<std::ptrdiff_t>(wo);
    while (b > a && (b - 1) * s + off >= static_cast<std::ptrdiff_t>(wd)) --b;
    lo[kx] = static_cast<std::size_t>(a);
    hi[kx] = static_cast<std::size_t>(std::max(a, b));
  }

  // Calls fn(out_row, in_row, weight_index, kx) for every valid (oy, ky, kx);
  // the callee runs ox over [lo[kx], hi[kx]) with in column ox*s + kx - pad.
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t in_base = (b * c + ch) * h * wd;
        const std::size_t out_base = (b * c + ch) * ho * wo;
        const std::size_t w_base = ch * k * k;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              fn(out_base + oy * wo, in_base + static_cast<std::size_t>(iy) * wd, w_base + ky * k + kx, kx);
            }
          }
        }
      }
    }
  };
  const std::size_t su = static_cast<std::size_t>(stride);
  const std::ptrdiff_t spad = pad;
  // Input column of output column ox for tap kx, valid inside [lo, hi).
  auto col = [su, spad](std::size_t ox, std::size_t kx) {
    return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ox * su + kx) - spad);
  };

  Tensor out({n, c, ho, wo});
  {
    const double* px = x.value().data.data();
    const double* pw = w.value().data.data();
    double* po = out.data.data();
    visit([&](std::size_t orow, std::size_t irow, std::size_t wi, std::size_t kx) {
      const double wv = pw[wi];
      double* o = po + orow;
      const double* in = px + irow;
      if (su == 1) {
        const double* src = in + kx - static_cast<std::size_t>(spad);
        for (std::size_t ox = lo[kx]; ox < hi[kx]; ++ox) o[ox] += wv * src[ox];
      } else {
        for (std::size_t ox = lo[kx]; ox < hi[kx]; ++ox) o[ox] += wv * in[col(ox, kx)];
      }
    });
  }
  const std::size_t ix = x.id, iw = w.id;
  return tape.push("depthwise-conv2d", std::move(out), {ix, iw}, [=](Tape& t, std::size_t self) {
    const double* go = t.grad(self).data();
    const double* px = t.value(ix).data.data();
    const double* pw = t.value(iw).data.data();
    const bool gx = t.needs_grad(ix), gw = t.needs_grad(iw);
    double* dx = gx ? t.grad(ix).data() : nullptr;
    double* dw = gw ? t.grad(iw).data() : nullptr;
    visit([&](std::size_t orow, std::size_t irow, std::size_t wi, std::size_t kx) {
      const double* g = go + orow;
      if (gx) {
        const double wv = pw[wi];
        double* d = dx + irow;
        for (std::size_t ox = lo[kx]; ox < hi[kx]; ++ox) d[col(ox, kx)] += wv * g[ox];
      }
      if (gw) {
        const double* in = px + irow;
        double acc = 0.0;
        for (std::size_t ox = lo[kx]; ox < hi[kx]; ++ox) acc += in[col(ox, kx)] * g[ox];
        dw[wi] += acc;
      }
    });
  });
}

namespace {

template <typename Fwd, typename Bwd>
Var binary_elementwise(const char* name, Var a, Var b, Fwd fwd, Bwd bwd) {
  Tape& tape = same_tape({a, b});
  require_same_shape(name, a, b);
  Tensor out(a.shape());
  const auto& va = a.value().data;
  const auto& vb = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = fwd(va[i], vb[i]);
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(name, std::move(out), {ia, ib}, [ia, ib, bwd](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& va = t.value(ia).data;
    const auto& vb = t.value(ib).data;
    if (t.needs_grad(ia)) {
      auto& da = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += bwd(g[i], va[i], vb[i], true);
    }
    if (t.needs_grad(ib)) {
      auto& db = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += bwd(g[i], va[i], vb[i], false);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, bool) { return g; });
}

Var sub(Var a, Var b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, bool lhs) { return lhs ? g : -g; });
}

Var mul(Var a, Var b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, bool lhs) { return lhs ? g * y : g * x; });
}

Var add_bias(Var x, Var b) {
  Tape& tape = same_tape({x, b});
  if (x.shape().size() < 2) throw ShapeError("add_bias: input must have rank >= 2, got " + shape_str(x.shape()));
  require_rank("add_bias", b, 1, "bias");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (b.dim(0) != c) {
    throw ShapeError("add_bias: bias length " + std::to_string(b.dim(0)) + " != dim 1 of " + shape_str(x.shape()));
  }
  const std::size_t inner = x.value().size() / (n * c);
  Tensor out = x.value();
  out.grad.reset();
  const auto& vb = b.value().data;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) out.data[(i * c + ch) * inner + j] += vb[ch];
  const std::size_t ix = x.id, ib = b.id;
  return tape.push("add_bias", std::move(out), {ix, ib}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ix)) {
      auto& dx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& db = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < inner; ++j) db[ch] += g[(i * c + ch) * inner + j];
    }
  });
}

Var relu(Var x) {
  Tape& tape = same_tape({x});
  Tensor out(x.shape());
  const auto& vx = x.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = vx[i] > 0.0 ? vx[i] : 0.0;
  const std::size_t ix = x.id;
  return tape.push("relu", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& vx = t.value(ix).data;
    auto& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (vx[i] > 0.0) dx[i] += g[i];
    }
  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats stats, bool train) {
  Tape& tape = same_tape({x, gamma, beta});
  const char* name = train ? "batchnorm-train" : "batchnorm-eval";
  if (x.shape().size() < 2) throw ShapeError(std::string(name) + ": input must have rank >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.value().size() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError(std::string(name) + ": affine parameters " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match channels " + std::to_string(c));
  }
  if (!stats.mean || !stats.var) throw std::invalid_argument(std::string(name) + ": running statistics missing");
  if (stats.mean->size() != c || stats.var->size() != c) {
    throw ShapeError(std::string(name) + ": running statistics hold " + std::to_string(stats.mean->size()) +
                     " channels, input has " + std::to_string(c));
  }
  const double count = static_cast<double>(n * inner);
  const auto& vx = x.value().data;
  std::vector<double> mean(c, 0.0), invstd(c, 0.0);
  if (train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) s += vx[(i * c + ch) * inner + j];
      const double m = s / count;
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) {
          const double d = vx[(i * c + ch) * inner + j] - m;
          v += d * d;
        }
      const double var = v / count;
      mean[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(var + stats.eps);
      const double unbiased = count > 1.0 ? v / (count - 1.0) : var;
      (*stats.mean)[ch] = stats.momentum * (*stats.mean)[ch] + (1.0 - stats.momentum) * m;
      (*stats.var)[ch] = stats.momentum * (*stats.var)[ch] + (1.0 - stats.momentum) * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = (*stats.mean)[ch];
      invstd[ch] = 1.0 / std::sqrt((*stats.var)[ch] + stats.eps);
    }
  }
  Tensor out(x.shape());
  const bool keep = tape.recording();
  Tensor xhat = keep ? Tensor(x.shape()) : Tensor();
  const auto& vg = gamma.value().data;
  const auto& vb = beta.value().data;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t idx = (i * c + ch) * inner + j;
        const double h = (vx[idx] - mean[ch]) * invstd[ch];
        if (keep) xhat.data[idx] = h;
        out.data[idx] = vg[ch] * h + vb[ch];
      }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  auto saved = std::make_shared<std::vector<double>>(std::move(xhat.data));
  return tape.push(name, std::move(out), {ix, ig, ib},
                   [=, invstd = std::move(invstd)](Tape& t, std::size_t self) {
                     const auto& g = t.grad(self);
                     const auto& xh = *saved;
                     const auto& vg = t.value(ig).data;
                     std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t j = 0; j < inner; ++j) {
                           const std::size_t idx = (i * c + ch) * inner + j;
                           sum_g[ch] += g[idx];
                           sum_gx[ch] += g[idx] * xh[idx];
                         }
                     if (t.needs_grad(ig)) {
                       auto& dg = t.grad(ig);
                       for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_gx[ch];
                     }
                     if (t.needs_grad(ib)) {
                       auto& db = t.grad(ib);
                       for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_g[ch];
                     }
                     if (t.needs_grad(ix)) {
                       auto& dx = t.grad(ix);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const double k = vg[ch] * invstd[ch];
                           for (std::size_t j = 0; j < inner; ++j) {
                             const std::size_t idx = (i * c + ch) * inner + j;
                             if (train) {
                               dx[idx] += k * (g[idx] - sum_g[ch] / count - xh[idx] * sum_gx[ch] / count);
                             } else {
                               dx[idx] += k * g[idx];
                             }
                           }
                         }
                     }
                   });
}

Var softmax_lastdim(Var x) {
  Tape& tape = same_tape({x});
  if (x.shape().empty()) throw ShapeError("softmax-lastdim: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / d;
  Tensor out(x.shape());
  const auto& vx = x.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = vx.data() + r * d;
    double* o = out.data.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= s;
  }
  const std::size_t ix = x.id;
  return tape.push("softmax-lastdim", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& dx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

Var global_avg_pool(Var x) {
  Tape& tape = same_tape({x});
  require_rank("global-avg-pool", x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c, 1, 1});
  const auto& vx = x.value().data;
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += vx[i * hw + j];
    out.data[i] = s / static_cast<double>(hw);
  }
  const std::size_t ix = x.id;
  return tape.push("global-avg-pool", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] += g[i] * inv;
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = same_tape({x});
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  const std::size_t ix = x.id;
  return tape.push("reshape", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

Var transpose_last2(Var x) {
  Tape& tape = same_tape({x});
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2: rank < 2, got " + shape_str(s));
  const std::size_t m = s[s.size() - 2], n = s.back();
  const std::size_t batch = x.value().size() / (m * n);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  const auto& vx = x.value().data;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.data[b * m * n + j * m + i] = vx[b * m * n + i * n + j];
  const std::size_t ix = x.id;
  return tape.push("transpose_last2", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
  });
}

Var scale(Var x, double factor) {
  Tape& tape = same_tape({x});
  Tensor out(x.shape());
  const auto& vx = x.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = vx[i] * factor;
  const std::size_t ix = x.id;
  return tape.push("scale", std::move(out), {ix}, [ix, factor](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("concat-channels: no inputs");
  Tape& tape = same_tape({xs[0]});
  const Shape& s0 = xs[0].shape();
  if (s0.size() < 2) throw ShapeError("concat-channels: inputs must have rank >= 2, got " + shape_str(s0));
  const std::size_t n = s0[0];
  const std::size_t inner = xs[0].value().size() / (n * s0[1]);
  std::size_t ctotal = 0;
  std::vector<std::size_t> ids;
  for (const auto& v : xs) {
    if (v.tape != &tape) throw std::invalid_argument("concat-channels: variables belong to different tapes");
    const Shape& s = v.shape();
    Shape a = s, b = s0;
    if (a.size() != b.size()) throw ShapeError("concat-channels: rank mismatch " + shape_str(s) + " vs " + shape_str(s0));
    a[1] = b[1] = 0;
    if (a != b) throw ShapeError("concat-channels: non-channel dims differ " + shape_str(s) + " vs " + shape_str(s0));
    ctotal += s[1];
    ids.push_back(v.id);
  }
  Shape os = s0;
  os[1] = ctotal;
  Tensor out(os);
  std::vector<std::size_t> channels;
  std::size_t offset = 0;
  for (const auto& v : xs) {
    const std::size_t c = v.dim(1);
    channels.push_back(c);
    const auto& vx = v.value().data;
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(vx.begin() + static_cast<std::ptrdiff_t>(i * c * inner),
                vx.begin() + static_cast<std::ptrdiff_t>((i + 1) * c * inner),
                out.data.begin() + static_cast<std::ptrdiff_t>((i * ctotal + offset) * inner));
    }
    offset += c;
  }
  return tape.push("concat-channels", std::move(out), ids, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t c = channels[k];
      if (t.needs_grad(ids[k])) {
        auto& dx = t.grad(ids[k]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c * inner; ++j) dx[i * c * inner + j] += g[(i * ctotal + off) * inner + j];
      }
      off += c;
    }
  });
}

Var slice_leading(Var x, Shape shape) {
  Tape& tape = same_tape({x});
  const Shape& full = x.shape();
  if (shape.size() != full.size()) {
    throw ShapeError("slice_leading: rank mismatch, source " + shape_str(full) + " slice " + shape_str(shape));
  }
  for (std::size_t d = 0; d < full.size(); ++d) {
    if (shape[d] == 0 || shape[d] > full[d]) {
      throw ShapeError("slice_leading: slice " + shape_str(shape) + " exceeds source " + shape_str(full));
    }
  }
  if (shape == full) {
    Tensor out = x.value();
    out.grad.reset();
    const std::size_t ix = x.id;
    return tape.push("slice_leading", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
      const auto& g = t.grad(self);
      auto& dx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  Tensor out(shape);
  const auto& vx = x.value().data;
  for_each_leading_run(full, shape, [&](std::size_t so, std::size_t po, std::size_t run) {
    std::copy(vx.begin() + static_cast<std::ptrdiff_t>(so), vx.begin() + static_cast<std::ptrdiff_t>(so + run),
              out.data.begin() + static_cast<std::ptrdiff_t>(po));
  });
  const std::size_t ix = x.id;
  return tape.push("slice_leading", std::move(out), {ix}, [ix, full, shape](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& dx = t.grad(ix);
    for_each_leading_run(full, shape, [&](std::size_t so, std::size_t po, std::size_t run) {
      for (std::size_t j = 0; j < run; ++j) dx[so + j] += g[po + j];
    });
  });
}

Var l2_normalize(Var x, double eps) {
  Tape& tape = same_tape({x});
  require_rank("l2_normalize", x, 2, "input");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> denom(rows);
  const auto& vx = x.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += vx[r * d + j] * vx[r * d + j];
    denom[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = vx[r * d + j] / denom[r];
  }
  const std::size_t ix = x.id;
  return tape.push("l2_normalize", std::move(out), {ix}, [=, denom = std::move(denom)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self).data;
    auto& dx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const bool clamped = denom[r] <= eps;
      double dot = 0.0;
      if (!clamped) {
        for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
      }
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / denom[r];
    }
  });
}

Var sum(Var x) {
  Tape& tape = same_tape({x});
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::size_t ix = x.id;
  return tape.push("sum", Tensor(Shape{}, std::vector<double>{s}), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto& dx = t.grad(ix);
    for (double& v : dx) v += g;
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = same_tape({logits});
  require_rank("softmax_cross_entropy", logits, 2, "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                                  std::to_string(c) + ")");
    }
  }
  const auto& vx = logits.value().data;
  std::vector<double> prob(n * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = vx.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[r * c + j] = std::exp(in[j] - mx);
      s += prob[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[r * c + j] /= s;
    loss -= (in[static_cast<std::size_t>(lab[r])] - mx) - std::log(s);
  }
  loss /= static_cast<double>(n);
  const std::size_t ix = logits.id;
  return tape.push("softmax_cross_entropy", Tensor(Shape{}, std::vector<double>{loss}), {ix},
                   [=, prob = std::move(prob), lab = std::move(lab)](Tape& t, std::size_t self) {
                     const double g = t.grad(self)[0] / static_cast<double>(n);
                     auto& dx = t.grad(ix);
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t j = 0; j < c; ++j) {
                         const double target = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
                         dx[r * c + j] += g * (prob[r * c + j] - target);
                       }
                   });
}

}  // namespace boss
