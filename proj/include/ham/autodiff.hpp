#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records every operation in creation order, which is a topological
// order by construction (an op can only reference existing nodes). backward()
// walks the tape once in reverse and returns a GradMap holding dLoss/dNode for
// every node. Leaves created with param() receive gradients; leaves created
// with constant() and everything depending only on constants are skipped.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ham/error.hpp"
#include "ham/tensor.hpp"

namespace ham::ad {

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  Conv2d,
  Linear,
  Relu,
  MaxPool2d,
  GlobalAvgPool,
  ChannelAffine,
  Softmax,
  Log,
  Add,
  Sub,
  Mul,
  Scale,
  Concat,
  Gather,
  Mean,
  Abs,
  Pow,
};

inline constexpr std::array<OpKind, 17> kDifferentiableOps = {
    OpKind::Conv2d, OpKind::Linear, OpKind::Relu,  OpKind::MaxPool2d, OpKind::GlobalAvgPool, OpKind::ChannelAffine,
    OpKind::Softmax, OpKind::Log,   OpKind::Add,   OpKind::Sub,       OpKind::Mul,           OpKind::Scale,
    OpKind::Concat, OpKind::Gather, OpKind::Mean,  OpKind::Abs,       OpKind::Pow,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Linear: return "linear";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::ChannelAffine: return "channel_affine";
    case OpKind::Softmax: return "softmax";
    case OpKind::Log: return "log";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Concat: return "concat";
    case OpKind::Gather: return "gather";
    case OpKind::Mean: return "mean";
    case OpKind::Abs: return "abs";
    case OpKind::Pow: return "pow";
  }
  return "unknown";
}

namespace testing {
// Fault injection for the verification tooling: when set, the backward rule of
// this op kind scales its input gradients by 1.5.
inline thread_local std::optional<OpKind> corrupt_backward;
}  // namespace testing

// Gradients indexed by node id. Every entry has the shape of the node value;
// entries for nodes the loss does not depend on are exactly zero.
class GradMap {
 public:
  explicit GradMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& operator[](NodeId id) const { return grads_.at(id); }
  std::size_t size() const noexcept { return grads_.size(); }
  friend bool operator==(const GradMap&, const GradMap&) = default;

 private:
  std::vector<Tensor> grads_;
};

class Graph {
 public:
  NodeId param(Tensor value) { return push_leaf(std::move(value), true); }
  NodeId constant(Tensor value) { return push_leaf(std::move(value), false); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_.at(id).needs_grad; }

  // Cross-correlation; input [c_in,a,b], kernel [c_out,c_in,k,k], bias [c_out].
  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, std::size_t stride, std::size_t padding) {
    const Tensor& x = value(input);
    const Tensor& w = value(kernel);
    const Tensor& b = value(bias);
    if (x.rank() != 3) throw ShapeError("conv2d: input must be rank 3 [c_in,a,b], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: kernel must be rank 4, got " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.shape()));
    if (w.dim(1) != x.dim(0))
      throw ShapeError("conv2d: input channel dimension " + std::to_string(x.dim(0)) +
                       " does not match kernel input-channel dimension " + std::to_string(w.dim(1)));
    if (b.rank() != 1 || b.dim(0) != w.dim(0))
      throw ShapeError("conv2d: bias dimension " + shape_str(b.shape()) + " does not match output channels " +
                       std::to_string(w.dim(0)));
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t k = w.dim(2);
    if (k > x.dim(1) + 2 * padding) throw ShapeError("conv2d: kernel height exceeds padded input height");
    if (k > x.dim(2) + 2 * padding) throw ShapeError("conv2d: kernel width exceeds padded input width");
    ConvGeom g = conv_geom(x.shape(), w.shape(), stride, padding);
    Tensor out({g.cout, g.oh, g.ow});
    conv_forward(x, w, b, g, out);
    Node n{OpKind::Conv2d, {input, kernel, bias}, std::move(out)};
    n.ints = {stride, padding};
    return push(std::move(n));
  }

  // weight [out,in]; input [in] or [n,in]; bias [out].
  NodeId linear(NodeId input, NodeId weight, NodeId bias) {
    const Tensor& x = value(input);
    const Tensor& w = value(weight);
    const Tensor& b = value(bias);
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape()));
    const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
    if (b.rank() != 1 || b.dim(0) != out_dim)
      throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match output dimension " +
                       std::to_string(out_dim));
    std::size_t rows = 0;
    Shape out_shape;
    if (x.rank() == 1 && x.dim(0) == in_dim) {
      rows = 1;
      out_shape = {out_dim};
    } else if (x.rank() == 2 && x.dim(1) == in_dim) {
      rows = x.dim(0);
      out_shape = {rows, out_dim};
    } else {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight input dimension " +
                       std::to_string(in_dim));
    }
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data().data() + r * in_dim;
      double* orow = out.data().data() + r * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double* wr = w.data().data() + o * in_dim;
        double acc = b[o];
        for (std::size_t i = 0; i < in_dim; ++i) acc += wr[i] * xr[i];
        orow[o] = acc;
      }
    }
    return push(Node{OpKind::Linear, {input, weight, bias}, std::move(out)});
  }

  NodeId relu(NodeId input) {
    Tensor out = value(input);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(Node{OpKind::Relu, {input}, std::move(out)});
  }

  // 2x2 window, stride 2. Ties resolve to the first index in row-major order.
  NodeId maxpool2d(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 3) throw ShapeError("maxpool2d: input must be rank 3, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 2 || w < 2) throw ShapeError("maxpool2d: spatial extent below 2 in " + shape_str(x.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    Node n{OpKind::MaxPool2d, {input}, Tensor{}};
    n.indices.resize(c * oh * ow);
    const double* xd = x.data().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
              if (xd[idx] > xd[best]) best = idx;
            }
          }
          const std::size_t o = (ch * oh + oy) * ow + ox;
          out[o] = xd[best];
          n.indices[o] = best;
        }
      }
    }
    n.value = std::move(out);
    return push(std::move(n));
  }

  // [c,a,b] -> [c]
  NodeId global_avg_pool(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 3) throw ShapeError("global_avg_pool: input must be rank 3, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += x[ch * hw + i];
      out[ch] = acc / static_cast<double>(hw);
    }
    return push(Node{OpKind::GlobalAvgPool, {input}, std::move(out)});
  }

  // out[c,y,x] = scale[c] * in[c,y,x] + shift[c]
  NodeId channel_affine(NodeId input, NodeId scale, NodeId shift) {
    const Tensor& x = value(input);
    const Tensor& s = value(scale);
    const Tensor& t = value(shift);
    if (x.rank() != 3) throw ShapeError("channel_affine: input must be rank 3, got " + shape_str(x.shape()));
    if (s.shape() != Shape{x.dim(0)} || t.shape() != Shape{x.dim(0)})
      throw ShapeError("channel_affine: scale/shift must have shape [" + std::to_string(x.dim(0)) + "]");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = s[ch] * x[ch * hw + i] + t[ch];
    return push(Node{OpKind::ChannelAffine, {input, scale, shift}, std::move(out)});
  }

  // Rank 1: over the vector. Rank 2: per row.
  NodeId softmax(NodeId input) {
    const Tensor& x = value(input);
    if (x.rank() != 1 && x.rank() != 2) throw ShapeError("softmax: input must be rank 1 or 2");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data().data() + r * cols;
      double* orow = out.data().data() + r * cols;
      const double mx = *std::max_element(xr, xr + cols);
      double z = 0.0;
      for (std::size_t i = 0; i < cols; ++i) z += (orow[i] = std::exp(xr[i] - mx));
      for (std::size_t i = 0; i < cols; ++i) orow[i] /= z;
    }
    return push(Node{OpKind::Softmax, {input}, std::move(out)});
  }

  NodeId log(NodeId input) { return unary(OpKind::Log, input, [](double v) { return std::log(v); }); }
  NodeId abs(NodeId input) { return unary(OpKind::Abs, input, [](double v) { return std::abs(v); }); }

  NodeId pow(NodeId input, double exponent) {
    Tensor out = value(input);
    for (double& v : out.data()) v = std::pow(v, exponent);
    Node n{OpKind::Pow, {input}, std::move(out)};
    n.scalar = exponent;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b, [](double x, double y) { return x + y; }); }
  NodeId sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b, [](double x, double y) { return x - y; }); }
  NodeId mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b, [](double x, double y) { return x * y; }); }

  NodeId scale(NodeId input, double factor) {
    Tensor out = value(input);
    for (double& v : out.data()) v *= factor;
    Node n{OpKind::Scale, {input}, std::move(out)};
    n.scalar = factor;
    return push(std::move(n));
  }

  NodeId concat(std::span<const NodeId> inputs, std::size_t axis) {
    if (inputs.empty()) throw ShapeError("concat: no inputs");
    Shape shape = value(inputs[0]).shape();
    if (axis >= shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(shape));
    std::size_t total = 0;
    for (NodeId id : inputs) {
      const Shape& s = value(id).shape();
      if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
      for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis && s[d] != shape[d])
          throw ShapeError("concat: dimension " + std::to_string(d) + " differs (" + shape_str(s) + " vs " +
                           shape_str(shape) + ")");
      total += s[axis];
    }
    shape[axis] = total;
    const std::size_t outer = numel(Shape(shape.begin(), shape.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel(Shape(shape.begin() + static_cast<long>(axis) + 1, shape.end()));
    Tensor out(shape);
    std::size_t offset = 0;
    for (NodeId id : inputs) {
      const Tensor& t = value(id);
      const std::size_t len = t.dim(axis) * inner;
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(t.data().data() + o * len, len, out.data().data() + o * total * inner + offset * inner);
      offset += t.dim(axis);
    }
    Node n{OpKind::Concat, {inputs.begin(), inputs.end()}, std::move(out)};
    n.ints = {axis};
    return push(std::move(n));
  }
  NodeId concat(std::initializer_list<NodeId> inputs, std::size_t axis) {
    return concat(std::span<const NodeId>(inputs.begin(), inputs.size()), axis);
  }

  // out.flat[i] = input.flat[indices[i]], reshaped to out_shape. Covers slicing,
  // index selection and reshaping.
  NodeId gather(NodeId input, std::vector<std::size_t> indices, Shape out_shape) {
    const Tensor& x = value(input);
    if (numel(out_shape) != indices.size())
      throw ShapeError("gather: output shape " + shape_str(out_shape) + " does not hold " +
                       std::to_string(indices.size()) + " indices");
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= x.size())
        throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of range for " + shape_str(x.shape()));
      out[i] = x[indices[i]];
    }
    Node n{OpKind::Gather, {input}, std::move(out)};
    n.indices = std::move(indices);
    return push(std::move(n));
  }

  // Contiguous flat range [begin, begin + numel(shape)) reshaped to shape.
  NodeId slice_flat(NodeId input, std::size_t begin, Shape shape) {
    std::vector<std::size_t> idx(numel(shape));
    std::iota(idx.begin(), idx.end(), begin);
    return gather(input, std::move(idx), std::move(shape));
  }

  // Range [begin, end) along axis.
  NodeId slice(NodeId input, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = value(input).shape();
    if (axis >= s.size() || begin > end || end > s[axis])
      throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid on axis " +
                       std::to_string(axis) + " of " + shape_str(s));
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    Shape out = s;
    out[axis] = end - begin;
    std::vector<std::size_t> idx;
    idx.reserve(numel(out));
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t a = begin; a < end; ++a)
        for (std::size_t i = 0; i < inner; ++i) idx.push_back((o * s[axis] + a) * inner + i);
    return gather(input, std::move(idx), std::move(out));
  }

  NodeId reshape(NodeId input, Shape shape) {
    if (numel(shape) != value(input).size())
      throw ShapeError("reshape: " + shape_str(value(input).shape()) + " -> " + shape_str(shape));
    return slice_flat(input, 0, std::move(shape));
  }

  // Mean of all entries -> shape [1].
  NodeId mean(NodeId input) {
    const Tensor& x = value(input);
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return push(Node{OpKind::Mean, {input}, Tensor::scalar(acc / static_cast<double>(x.size()))});
  }

  GradMap backward(NodeId loss) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<std::size_t> ints{};
    std::vector<std::size_t> indices{};
    double scalar = 0.0;
    bool needs_grad = false;
  };

  struct ConvGeom {
    std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
  };

  static ConvGeom conv_geom(const Shape& x, const Shape& k, std::size_t stride, std::size_t pad) {
    ConvGeom g{x[0], x[1], x[2], k[0], k[2], stride, pad, 0, 0};
    g.oh = (g.h + 2 * pad - g.k) / stride + 1;
    g.ow = (g.w + 2 * pad - g.k) / stride + 1;
    return g;
  }

  // Output column range [lo, hi) whose input column ox*stride + kx - pad is in bounds.
  static std::pair<std::size_t, std::size_t> valid_range(std::size_t out_n, std::size_t in_n, std::size_t kk,
                                                         std::size_t stride, std::size_t pad) {
    std::size_t lo = 0;
    while (lo < out_n && lo * stride + kk < pad) ++lo;
    std::size_t hi = out_n;
    while (hi > lo && (hi - 1) * stride + kk >= pad + in_n) --hi;
    return {lo, hi};
  }

  // Four partial sums so the loop vectorizes; summation order is fixed.
  static double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      s0 += a[i] * b[i];
      s1 += a[i + 1] * b[i + 1];
      s2 += a[i + 2] * b[i + 2];
      s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
  }

  static void conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeom& g, Tensor& out) {
    double* od = out.data().data();
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    for (std::size_t co = 0; co < g.cout; ++co) {
      double* oc = od + co * g.oh * g.ow;
      std::fill_n(oc, g.oh * g.ow, b[co]);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xc = xd + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const auto [ylo, yhi] = valid_range(g.oh, g.h, ky, g.stride, g.pad);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const double wv = wd[((co * g.cin + ci) * g.k + ky) * g.k + kx];
            const auto [xlo, xhi] = valid_range(g.ow, g.w, kx, g.stride, g.pad);
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const double* xr = xc + (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
              double* orow = oc + oy * g.ow;
              if (g.stride == 1) {
                for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xr[ox];
              } else {
                for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xr[ox * g.stride];
              }
            }
          }
        }
      }
    }
  }

  NodeId push_leaf(Tensor value, bool grad) {
    Node n{OpKind::Leaf, {}, std::move(value)};
    n.needs_grad = grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push(Node n) {
    if (!n.value.all_finite())
      throw NumericError(std::string(op_name(n.kind)) + ": non-finite value in forward output");
    for (NodeId in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  template <class F>
  NodeId unary(OpKind kind, NodeId input, F f) {
    Tensor out = value(input);
    for (double& v : out.data()) v = f(v);
    return push(Node{kind, {input}, std::move(out)});
  }

  // Same-shape elementwise, or one side of size 1 (scalar broadcast).
  template <class F>
  NodeId binary(OpKind kind, NodeId a, NodeId b, F f) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    const bool same = x.shape() == y.shape();
    if (!same && x.size() != 1 && y.size() != 1)
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                       shape_str(y.shape()));
    const Tensor& big = (same || y.size() == 1) ? x : y;
    Tensor out(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = f(x.size() == 1 ? x[0] : x[i], y.size() == 1 ? y[0] : y[i]);
    return push(Node{kind, {a, b}, std::move(out)});
  }

  void backward_node(const Node& n, const Tensor& gout, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
};

inline GradMap Graph::backward(NodeId loss) const {
  if (loss >= nodes_.size()) throw ShapeError("backward: unknown loss node");
  if (nodes_[loss].value.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss].value.shape()));
  std::vector<Tensor> grads;
  grads.reserve(nodes_.size());
  for (const Node& n : nodes_) grads.emplace_back(n.value.shape(), 0.0);
  grads[loss][0] = 1.0;
  for (std::size_t i = loss + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf || !n.needs_grad) continue;
    backward_node(n, grads[i], grads);
  }
  return GradMap(std::move(grads));
}

inline void Graph::backward_node(const Node& n, const Tensor& gout, std::vector<Tensor>& grads) const {
  const double fault = testing::corrupt_backward == n.kind ? 1.5 : 1.0;
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot]].needs_grad; };
  auto gin = [&](std::size_t slot) -> Tensor& { return grads[n.inputs[slot]]; };
  const Tensor& y = n.value;

  switch (n.kind) {
    case OpKind::Leaf: break;

    case OpKind::Conv2d: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& w = value(n.inputs[1]);
      const ConvGeom g = conv_geom(x.shape(), w.shape(), n.ints[0], n.ints[1]);
      const double* gd = gout.data().data();
      const double* xd = x.data().data();
      const double* wd = w.data().data();
      const bool want_x = wants(0), want_w = wants(1);
      double* gx = want_x ? gin(0).data().data() : nullptr;
      double* gw = want_w ? gin(1).data().data() : nullptr;
      if (wants(2)) {
        Tensor& gb = gin(2);
        for (std::size_t co = 0; co < g.cout; ++co) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.oh * g.ow; ++i) acc += gd[co * g.oh * g.ow + i];
          gb[co] += fault * acc;
        }
      }
      for (std::size_t co = 0; co < g.cout; ++co) {
        const double* gc = gd + co * g.oh * g.ow;
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
          const double* xc = xd + ci * g.h * g.w;
          double* gxc = want_x ? gx + ci * g.h * g.w : nullptr;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const auto [ylo, yhi] = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::size_t widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
              const double wv = wd[widx];
              const auto [xlo, xhi] = valid_range(g.ow, g.w, kx, g.stride, g.pad);
              double acc = 0.0;
              for (std::size_t oy = ylo; oy < yhi; ++oy) {
                const std::size_t row = (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
                const double* grow = gc + oy * g.ow;
                const double* xr = xc + row;
                if (g.stride == 1) {
                  if (want_w) acc += dot(grow + xlo, xr + xlo, xhi - xlo);
                  if (want_x) {
                    double* gxr = gxc + row;
                    const double a = fault * wv;
                    for (std::size_t ox = xlo; ox < xhi; ++ox) gxr[ox] += a * grow[ox];
                  }
                  continue;
                }
                if (want_w)
                  for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xr[ox * g.stride];
                if (want_x) {
                  double* gxr = gxc + row;
                  for (std::size_t ox = xlo; ox < xhi; ++ox) gxr[ox * g.stride] += fault * wv * grow[ox];
                }
              }
              if (want_w) gw[widx] += fault * acc;
            }
          }
        }
      }
      break;
    }

    case OpKind::Linear: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& w = value(n.inputs[1]);
      const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
      const std::size_t rows = x.size() / in_dim;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * in_dim;
        const double* gr = gout.data().data() + r * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = fault * gr[o];
          if (go == 0.0) continue;
          if (wants(1)) {
            double* gw = gin(1).data().data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) gw[i] += go * xr[i];
          }
          if (wants(0)) {
            double* gx = gin(0).data().data() + r * in_dim;
            const double* wr = w.data().data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) gx[i] += go * wr[i];
          }
          if (wants(2)) gin(2)[o] += go;
        }
      }
      break;
    }

    case OpKind::Relu: {
      if (!wants(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] > 0.0) g[i] += fault * gout[i];
      break;
    }

    case OpKind::MaxPool2d: {
      if (!wants(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < n.indices.size(); ++i) g[n.indices[i]] += fault * gout[i];
      break;
    }

    case OpKind::GlobalAvgPool: {
      if (!wants(0)) break;
      const Tensor& x = value(n.inputs[0]);
      const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
      Tensor& g = gin(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = fault * gout[ch] / static_cast<double>(hw);
        for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += v;
      }
      break;
    }

    case OpKind::ChannelAffine: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& s = value(n.inputs[1]);
      const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double gs = 0.0, gt = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          const double go = fault * gout[ch * hw + i];
          gs += go * x[ch * hw + i];
          gt += go;
        }
        if (wants(0)) {
          Tensor& gx = gin(0);
          for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += fault * gout[ch * hw + i] * s[ch];
        }
        if (wants(1)) gin(1)[ch] += gs;
        if (wants(2)) gin(2)[ch] += gt;
      }
      break;
    }

    case OpKind::Softmax: {
      if (!wants(0)) break;
      const std::size_t cols = y.shape().back();
      const std::size_t rows = y.size() / cols;
      Tensor& g = gin(0);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < cols; ++i) dot += gout[r * cols + i] * y[r * cols + i];
        for (std::size_t i = 0; i < cols; ++i)
          g[r * cols + i] += fault * y[r * cols + i] * (gout[r * cols + i] - dot);
      }
      break;
    }

    case OpKind::Log: {
      if (!wants(0)) break;
      const Tensor& x = value(n.inputs[0]);
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += fault * gout[i] / x[i];
      break;
    }

    case OpKind::Abs: {
      if (!wants(0)) break;
      const Tensor& x = value(n.inputs[0]);
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double sgn = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
        g[i] += fault * gout[i] * sgn;
      }
      break;
    }

    case OpKind::Pow: {
      if (!wants(0)) break;
      const Tensor& x = value(n.inputs[0]);
      Tensor& g = gin(0);
      const double p = n.scalar;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (p == 0.0) continue;
        g[i] += fault * gout[i] * p * std::pow(x[i], p - 1.0);
      }
      break;
    }

    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const Tensor& a = value(n.inputs[0]);
      const Tensor& b = value(n.inputs[1]);
      for (std::size_t slot = 0; slot < 2; ++slot) {
        if (!wants(slot)) continue;
        Tensor& g = gin(slot);
        const bool reduce = g.size() == 1 && y.size() != 1;
        for (std::size_t i = 0; i < y.size(); ++i) {
          double d = 1.0;
          if (n.kind == OpKind::Sub && slot == 1) d = -1.0;
          if (n.kind == OpKind::Mul) {
            const Tensor& other = slot == 0 ? b : a;
            d = other.size() == 1 ? other[0] : other[i];
          }
          g[reduce ? 0 : i] += fault * gout[i] * d;
        }
      }
      break;
    }

    case OpKind::Scale: {
      if (!wants(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += fault * gout[i] * n.scalar;
      break;
    }

    case OpKind::Concat: {
      const std::size_t axis = n.ints[0];
      const Shape& s = y.shape();
      const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
      const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
      std::size_t offset = 0;
      for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
        const std::size_t extent = value(n.inputs[slot]).dim(axis);
        if (wants(slot)) {
          Tensor& g = gin(slot);
          const std::size_t len = extent * inner;
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len; ++i) g[o * len + i] += fault * gout[o * s[axis] * inner + offset * inner + i];
        }
        offset += extent;
      }
      break;
    }

    case OpKind::Gather: {
      if (!wants(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < n.indices.size(); ++i) g[n.indices[i]] += fault * gout[i];
      break;
    }

    case OpKind::Mean: {
      if (!wants(0)) break;
      Tensor& g = gin(0);
      const double v = fault * gout[0] / static_cast<double>(g.size());
      for (double& e : g.data()) e += v;
      break;
    }
  }
}

}  // namespace ham::ad
