#pragma once

#include "ffgan/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace ffgan {

/// Closed operator vocabulary of the tape.
enum class Op : std::uint8_t {
    leaf,       // parameter: receives gradients
    constant,   // input data or frozen weights
    add,
    sub,
    mul,        // elementwise
    scale,      // multiply by attrs.scalar
    matmul,     // [M,K]x[K,N] (+ optional bias [N])
    conv2d,     // NCHW x OIkk (+ optional bias [O]), zero padding
    upsample2x, // nearest neighbour
    leaky_relu, // slope attrs.scalar
    relu,
    tanh,
    sigmoid,
    mean,       // reduce every axis >= attrs.keep_leading
    sum,
    abs,
    square,
    sqrt,
    concat,     // along axis 1
    slice,      // axis 1, [attrs.begin, attrs.end)
    flip_w,     // reverse the last axis
    softmax_xent, // logits [B,K], labels attrs.labels -> per-sample loss [B]
    forward_diff, // [B,C,H,W] -> [B,C,H-1,W-1]; attrs.axis 0 = along width (dx), 1 = along height (dy)
    reshape,
};

std::string_view op_name(Op op);
/// Inverse of op_name; throws InvalidArgument for names outside the vocabulary.
Op op_from_name(std::string_view name);

struct Attrs {
    double scalar = 0.0;
    int stride = 1;
    int pad = 0;
    int axis = 0;
    std::size_t keep_leading = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> labels;
    double log_floor = 1e-12;
    Shape shape;
};

class Graph;
using NodeId = std::uint32_t;

/// Handle to a node on a Graph tape. Cheap to copy.
class Var {
public:
    Var() = default;
    Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

    Graph* graph() const noexcept { return graph_; }
    NodeId id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Graph* graph_ = nullptr;
    NodeId id_ = 0;
};

/// Gradients of one backward pass, addressable by the parameter leaves.
class Gradients {
public:
    /// Gradient for a leaf; zeros when the loss does not depend on it.
    const Tensor& operator[](const Var& leaf) const;
    bool has(const Var& leaf) const;

private:
    friend class Graph;
    const Graph* graph_ = nullptr;
    std::vector<std::optional<Tensor>> by_node_;
};

/// Eager-forward tape. Values are computed when recorded; backward walks the
/// tape in reverse append order. One graph per thread.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var parameter(Tensor value);
    Var constant(Tensor value);
    /// Constant copy of an existing node's value; cuts the gradient path.
    Var detach(const Var& v);

    Var record(Op op, const std::vector<Var>& inputs, const Attrs& attrs = {});

    /// Reverse-mode pass from a scalar loss. Rejected a second time until reset().
    Gradients backward(const Var& loss);

    void reset();

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    Op op(NodeId id) const { return nodes_.at(id).op; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

private:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        Attrs attrs;
        Tensor value;
        bool requires_grad;
    };

    Var push(Node node);
    void check_owned(const Var& v, Op op) const;
    void backprop_node(const Node& node, const Tensor& grad, std::vector<std::optional<Tensor>>& grads) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Operator front-ends. All inputs must live on the same graph.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var matmul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b, const Var& bias);
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
Var upsample2x(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.2);
Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var mean(const Var& x, std::size_t keep_leading = 0);
Var sum(const Var& x, std::size_t keep_leading = 0);
Var abs(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
Var concat(const std::vector<Var>& parts);
Var slice(const Var& x, std::size_t begin, std::size_t end);
Var flip_w(const Var& x);
Var softmax_xent(const Var& logits, std::vector<std::size_t> labels, double log_floor = 1e-12);
Var forward_diff(const Var& x, int axis);
Var reshape(const Var& x, Shape shape);

} // namespace ffgan
