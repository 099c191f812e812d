#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "casd/tensor.hpp"

namespace casd {

/// Trainable tensor that outlives a single graph. `grad` is accumulated by
/// Graph::backward and consumed (then zeroed) by sgd_step.
template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.shape()),
        velocity(value.shape()) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> velocity;
};

enum class OpKind {
  Input,
  Param,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Conv2d,
  Relu,
  Sigmoid,
  MaxPool2d,
  Softmax,
  LogSoftmax,
  ChannelMean,
  SumAxis,
  Sum,
  ElementwiseMax,
  Mse,
  SmoothL1,
  Detach,
  Clamp,
  Log,
  Reshape,
  FlipW,
  RoiPool,
};

std::string_view op_name(OpKind kind);

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor<T>& value() const { return graph_->value(id_); }
  const Tensor<T>& grad() const { return graph_->grad(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Graph<T>& graph() const noexcept { return *graph_; }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of recorded operations. Nodes are appended in execution order, so
/// every input id precedes the node that consumes it; backward walks the
/// tape once, in reverse. A graph supports a single backward pass.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> input(Tensor<T> value, bool requires_grad = false);
  Var<T> param(Parameter<T>& p);
  Var<T> record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value,
                BackwardFn backward);

  void backward(const Var<T>& loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  // Empty tensor when no gradient reached the node.
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_[id].kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Zero-initialised on first use. Only valid for nodes that require grad.
  Tensor<T>& grad_buffer(std::size_t id);
  void accumulate(std::size_t id, const Tensor<T>& g);

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  // A deque keeps references returned by value() and grad() valid as nodes are appended.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  bool consumed_ = false;
};

// Elementwise with size-1 broadcasting (ranks are right-aligned).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);

// x: [Cin x H x W], w: [Cout x Cin x k x k], b: [Cout]. Cross-correlation.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad);

template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
// 2x2 window, stride 2, over the last two axes of a rank-3 tensor.
template <typename T> Var<T> maxpool2d(const Var<T>& x);
template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);
// log(softmax(x)) computed from logits; finite even where softmax underflows.
template <typename T> Var<T> log_softmax(const Var<T>& x, std::size_t axis);

// Mean over the channel axis: [L x H x W] -> [H x W], [N x L x H x W] -> [N x H x W].
template <typename T> Var<T> channel_mean(const Var<T>& x);
template <typename T> Var<T> sum_axis(const Var<T>& x, std::size_t axis);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

// Gradient goes to the first argmax (lowest list index on ties).
template <typename T> Var<T> elementwise_max(std::span<const Var<T>> xs);

// Mean of squared elementwise differences.
template <typename T> Var<T> l2_norm_sq_mean(const Var<T>& a, const Var<T>& b);
// 0.5 d^2 if |d| < 1 else |d| - 0.5, averaged over elements.
template <typename T> Var<T> smooth_l1(const Var<T>& pred, const Var<T>& target);

template <typename T> Var<T> detach(const Var<T>& x);
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
// Reverses the last axis.
template <typename T> Var<T> flip_w(const Var<T>& x);

/// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v; g <- 0.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, T lr, T momentum, T weight_decay);

}  // namespace casd
