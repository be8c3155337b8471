#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psep/tensor.hpp"

namespace psep {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const;
    /// Gradient accumulated by the last Graph::backward. Zeros when nothing reached this node.
    Tensor grad() const;
    bool requires_grad() const;

    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in execution order, so the node list
/// is always a topological order and backward is a single reverse sweep.
class Graph {
public:
    /// Propagates the gradient of node `self`; reads inputs and accumulates into their grads.
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    struct Node {
        std::string op;
        Tensor value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        bool leaf = false;
        std::optional<Tensor> grad;
        BackwardFn backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = false, std::string name = "leaf");
    Var constant(Tensor value) { return leaf(std::move(value), false, "constant"); }

    /// Appends an op node. Requires grad iff any input does; otherwise the backward fn is dropped.
    Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    /// Reverse sweep from a one-element node. Resets all gradients first.
    void backward(Var loss);

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient of node `id`; allocates a zero buffer on first use.
    Tensor& grad_slot(std::size_t id);
    const Tensor* grad_if_present(std::size_t id) const;

    std::size_t size() const { return nodes_.size(); }
    std::vector<std::size_t> leaves() const;

private:
    std::vector<Node> nodes_;
};

}  // namespace psep
