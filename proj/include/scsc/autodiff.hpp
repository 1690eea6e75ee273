#pragma once

// Reverse-mode differentiation over the primitives in ops.hpp.
//
// A Tape is an append-only list of nodes; each node keeps its forward value and
// a backward rule that reads input values back from the tape. Node ids are
// therefore topologically ordered and backward() walks them in reverse once.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scsc/ops.hpp"
#include "scsc/tensor.hpp"

namespace scsc {

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Scale,
  Mul,
  Sum,
  Reshape,
  ConvDense,
  ConvPointwise,
  ConvDepthwise,
  Sigmoid,
  Relu,
  BatchedMatmul,
  BatchNorm,
  LayerNorm,
  GlobalAvgPool,
  SpaceToDepth,
  SpatialFuse,
  CrossEntropy,
};

class Tape;

/// Handle to a value recorded on a tape. Non-owning; the tape must outlive it.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  Shape shape{};

  [[nodiscard]] const Tensor4& value() const;
};

class Gradients {
 public:
  Gradients(std::vector<Tensor4> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  /// dRoot/dv; zeros when v does not influence the root.
  [[nodiscard]] Tensor4 operator[](const Var& v) const {
    if (v.id >= grads_.size()) throw std::out_of_range("Gradients: var not on this tape");
    if (grads_[v.id].empty()) return Tensor4(shapes_[v.id]);
    return grads_[v.id];
  }

 private:
  std::vector<Tensor4> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Tape&, const Tensor4& grad_out, std::vector<Tensor4>& grads)>;

  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor4 value;
    BackwardFn backward;
    bool requires_grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor4 value) { return push(Node{OpKind::Leaf, {}, std::move(value), nullptr, true}); }

  /// Input that receives no gradient.
  Var constant(Tensor4 value) { return push(Node{OpKind::Constant, {}, std::move(value), nullptr, false}); }

  Var record(OpKind op, std::span<const Var> inputs, Tensor4 value, BackwardFn backward) {
    Node node{op, {}, std::move(value), std::move(backward), false};
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape != this) throw std::invalid_argument("Tape::record: input recorded on a different tape");
      node.inputs.push_back(v.id);
      node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(node));
  }

  Var record(OpKind op, std::initializer_list<Var> inputs, Tensor4 value, BackwardFn backward) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(value), std::move(backward));
  }

  [[nodiscard]] const Tensor4& value(const Var& v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] const Tensor4& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] const Node& node(std::size_t id) const { return nodes_.at(id); }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds g into grads[id] if that node carries gradient.
  void accumulate(std::vector<Tensor4>& grads, std::size_t id, Tensor4 g) const {
    if (!nodes_[id].requires_grad) return;
    if (grads[id].empty()) {
      grads[id] = std::move(g);
    } else {
      grads[id] += g;
    }
  }

  /// Gradients of a scalar root with respect to every node. Does not modify the tape.
  [[nodiscard]] Gradients backward(const Var& root) const {
    if (root.tape != this) throw std::invalid_argument("Tape::backward: root recorded on a different tape");
    if (root.shape.size() != 1) {
      throw DimensionError("Tape::backward: root must be scalar, got shape " + root.shape.str());
    }
    std::vector<Tensor4> grads(nodes_.size());
    grads[root.id] = Tensor4(root.shape, 1.0);
    for (std::size_t id = root.id + 1; id-- > 0;) {
      const Node& node = nodes_[id];
      if (grads[id].empty() || !node.backward || !node.requires_grad) continue;
      node.backward(*this, grads[id], grads);
    }
    std::vector<Shape> shapes;
    shapes.reserve(nodes_.size());
    for (const Node& n : nodes_) shapes.push_back(n.value.shape());
    return Gradients(std::move(grads), std::move(shapes));
  }

 private:
  Var push(Node node) {
    const Shape s = node.value.shape();
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1, s};
  }

  std::deque<Node> nodes_;
};

inline const Tensor4& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Recorded operations

namespace ad {

inline Var add(const Var& a, const Var& b) {
  Tensor4 y = scsc::add(a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::Add, {a, b}, std::move(y), [ia, ib](const Tape& t, const Tensor4& g, auto& grads) {
    t.accumulate(grads, ia, g);
    t.accumulate(grads, ib, g);
  });
}

inline Var scale(const Var& a, double s) {
  const std::size_t ia = a.id;
  return a.tape->record(OpKind::Scale, {a}, scsc::scale(a.value(), s),
                        [ia, s](const Tape& t, const Tensor4& g, auto& grads) { t.accumulate(grads, ia, scsc::scale(g, s)); });
}

inline Var mul(const Var& a, const Var& b) {
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::Mul, {a, b}, hadamard(a.value(), b.value()),
                        [ia, ib](const Tape& t, const Tensor4& g, auto& grads) {
                          t.accumulate(grads, ia, hadamard(g, t.value(ib)));
                          t.accumulate(grads, ib, hadamard(g, t.value(ia)));
                        });
}

/// Sum of all elements, as a (1,1,1,1) scalar.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  const Shape as = a.shape;
  return a.tape->record(OpKind::Sum, {a}, Tensor4(Shape{1, 1, 1, 1}, s),
                        [ia, as](const Tape& t, const Tensor4& g, auto& grads) { t.accumulate(grads, ia, Tensor4(as, g[0])); });
}

inline Var reshape(const Var& a, Shape s) {
  const std::size_t ia = a.id;
  const Shape as = a.shape;
  return a.tape->record(OpKind::Reshape, {a}, a.value().reshaped(s),
                        [ia, as](const Tape& t, const Tensor4& g, auto& grads) { t.accumulate(grads, ia, g.reshaped(as)); });
}

inline Var conv2d_dense(const Var& x, const Var& w, const Var& b, const ConvSpec& spec) {
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(OpKind::ConvDense, {x, w, b}, scsc::conv2d_dense(x.value(), w.value(), b.value(), spec),
                        [ix, iw, ib, spec](const Tape& t, const Tensor4& g, auto& grads) {
                          ConvGrads r = conv2d_dense_backward(t.value(ix), t.value(iw), g, spec);
                          t.accumulate(grads, ix, std::move(r.dx));
                          t.accumulate(grads, iw, std::move(r.dw));
                          t.accumulate(grads, ib, std::move(r.db));
                        });
}

inline Var conv2d_pointwise(const Var& x, const Var& w, const Var& b, std::size_t stride = 1) {
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(OpKind::ConvPointwise, {x, w, b},
                        scsc::conv2d_pointwise(x.value(), w.value(), b.value(), stride),
                        [ix, iw, ib, stride](const Tape& t, const Tensor4& g, auto& grads) {
                          ConvGrads r = conv2d_pointwise_backward(t.value(ix), t.value(iw), g, stride);
                          t.accumulate(grads, ix, std::move(r.dx));
                          t.accumulate(grads, iw, std::move(r.dw));
                          t.accumulate(grads, ib, std::move(r.db));
                        });
}

inline Var conv2d_depthwise(const Var& x, const Var& w, const Var& b, const ConvSpec& spec) {
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(OpKind::ConvDepthwise, {x, w, b},
                        scsc::conv2d_depthwise(x.value(), w.value(), b.value(), spec),
                        [ix, iw, ib, spec](const Tape& t, const Tensor4& g, auto& grads) {
                          ConvGrads r = conv2d_depthwise_backward(t.value(ix), t.value(iw), g, spec);
                          t.accumulate(grads, ix, std::move(r.dx));
                          t.accumulate(grads, iw, std::move(r.dw));
                          t.accumulate(grads, ib, std::move(r.db));
                        });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.shape.h != 1 || x.shape.w != 1) {
    throw DimensionError("linear: input must be (n, d, 1, 1), got " + x.shape.str());
  }
  return conv2d_pointwise(x, w, b);
}

inline Var sigmoid(const Var& x) {
  const std::size_t ix = x.id;
  Tape* tape = x.tape;
  const std::size_t out_id = tape->size();
  return tape->record(OpKind::Sigmoid, {x}, scsc::sigmoid(x.value()),
                      [ix, out_id](const Tape& t, const Tensor4& g, auto& grads) {
                        t.accumulate(grads, ix, sigmoid_backward(t.value(out_id), g));
                      });
}

inline Var relu(const Var& x) {
  const std::size_t ix = x.id;
  return x.tape->record(OpKind::Relu, {x}, scsc::relu(x.value()), [ix](const Tape& t, const Tensor4& g, auto& grads) {
    t.accumulate(grads, ix, relu_backward(t.value(ix), g));
  });
}

inline Var batched_matmul(const Var& a, const Var& b) {
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::BatchedMatmul, {a, b}, scsc::batched_matmul(a.value(), b.value()),
                        [ia, ib](const Tape& t, const Tensor4& g, auto& grads) {
                          MatmulGrads r = batched_matmul_backward(t.value(ia), t.value(ib), g);
                          t.accumulate(grads, ia, std::move(r.da));
                          t.accumulate(grads, ib, std::move(r.db));
                        });
}

inline Var global_avg_pool(const Var& x) {
  const std::size_t ix = x.id;
  const Shape xs = x.shape;
  return x.tape->record(OpKind::GlobalAvgPool, {x}, scsc::global_avg_pool(x.value()),
                        [ix, xs](const Tape& t, const Tensor4& g, auto& grads) {
                          t.accumulate(grads, ix, global_avg_pool_backward(xs, g));
                        });
}

/// Train-mode batchnorm. The batch statistics are written to `stats` when given
/// (used by callers that keep running averages).
inline Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                           BatchNormResult* stats = nullptr) {
  BatchNormResult r = scsc::batchnorm_train(x.value(), gamma.value(), beta.value(), eps);
  if (stats != nullptr) {
    stats->mean = r.mean;
    stats->var = r.var;
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(OpKind::BatchNorm, {x, gamma, beta}, std::move(r.y),
                        [ix, ig, ib, eps, mean = std::move(r.mean), var = std::move(r.var)](
                            const Tape& t, const Tensor4& g, auto& grads) {
                          NormGrads d = batchnorm_train_backward(t.value(ix), t.value(ig), mean, var, eps, g);
                          t.accumulate(grads, ix, std::move(d.dx));
                          t.accumulate(grads, ig, std::move(d.dgamma));
                          t.accumulate(grads, ib, std::move(d.dbeta));
                        });
}

inline Var batchnorm_infer(const Var& x, const Var& gamma, const Var& beta, const Tensor4& mean, const Tensor4& var,
                           double eps) {
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(OpKind::BatchNorm, {x, gamma, beta},
                        scsc::batchnorm_infer(x.value(), gamma.value(), beta.value(), mean, var, eps),
                        [ix, ig, ib, eps, mean, var](const Tape& t, const Tensor4& g, auto& grads) {
                          NormGrads d = batchnorm_infer_backward(t.value(ix), t.value(ig), mean, var, eps, g);
                          t.accumulate(grads, ix, std::move(d.dx));
                          t.accumulate(grads, ig, std::move(d.dgamma));
                          t.accumulate(grads, ib, std::move(d.dbeta));
                        });
}

inline Var layernorm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(OpKind::LayerNorm, {x, gamma, beta},
                        scsc::layernorm_channels(x.value(), gamma.value(), beta.value(), eps),
                        [ix, ig, ib, eps](const Tape& t, const Tensor4& g, auto& grads) {
                          NormGrads d = layernorm_channels_backward(t.value(ix), t.value(ig), eps, g);
                          t.accumulate(grads, ix, std::move(d.dx));
                          t.accumulate(grads, ig, std::move(d.dgamma));
                          t.accumulate(grads, ib, std::move(d.dbeta));
                        });
}

inline Var space_to_depth(const Var& x, std::size_t r) {
  const std::size_t ix = x.id;
  return x.tape->record(OpKind::SpaceToDepth, {x}, scsc::space_to_depth(x.value(), r),
                        [ix, r](const Tape& t, const Tensor4& g, auto& grads) {
                          t.accumulate(grads, ix, depth_to_space(g, r));
                        });
}

inline Var spatial_fuse(std::span<const Var> branches, const Var& gates, std::size_t g) {
  std::vector<Tensor4> values;
  values.reserve(branches.size());
  for (const Var& b : branches) values.push_back(b.value());
  Tensor4 y = scsc::spatial_fuse(values, gates.value(), g);

  std::vector<Var> inputs(branches.begin(), branches.end());
  inputs.push_back(gates);
  std::vector<std::size_t> ids;
  for (const Var& b : branches) ids.push_back(b.id);
  const std::size_t ig = gates.id;
  return gates.tape->record(OpKind::SpatialFuse, inputs, std::move(y),
                            [ids, ig, g](const Tape& t, const Tensor4& gout, auto& grads) {
                              std::vector<Tensor4> vals;
                              vals.reserve(ids.size());
                              for (std::size_t id : ids) vals.push_back(t.value(id));
                              FuseGrads r = spatial_fuse_backward(vals, t.value(ig), g, gout);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                t.accumulate(grads, ids[i], std::move(r.dbranches[i]));
                              }
                              t.accumulate(grads, ig, std::move(r.dgates));
                            });
}

/// Mean softmax cross-entropy, as a scalar.
inline Var cross_entropy(const Var& logits, std::vector<int> labels) {
  const double loss = scsc::cross_entropy(logits.value(), labels);
  const std::size_t il = logits.id;
  return logits.tape->record(OpKind::CrossEntropy, {logits}, Tensor4(Shape{1, 1, 1, 1}, loss),
                             [il, labels = std::move(labels)](const Tape& t, const Tensor4& g, auto& grads) {
                               t.accumulate(grads, il, cross_entropy_backward(t.value(il), labels, g[0]));
                             });
}

/// sum(x * weights) with constant weights; a generic scalar probe for gradient tests.
inline Var weighted_sum(const Var& x, const Tensor4& weights) {
  return sum(mul(x, x.tape->constant(weights)));
}

}  // namespace ad

inline Var operator+(const Var& a, const Var& b) { return ad::add(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ad::mul(a, b); }
inline Var operator*(double s, const Var& a) { return ad::scale(a, s); }

}  // namespace scsc
