#include "psep/autograd.hpp"

#include <stdexcept>

namespace psep {

const Tensor& Var::value() const { return graph_->value(id_); }

const Shape& Var::shape() const { return graph_->value(id_).shape(); }

Tensor Var::grad() const {
    if (const Tensor* g = graph_->grad_if_present(id_)) return *g;
    return Tensor(shape());
}

bool Var::requires_grad() const { return graph_->needs_grad(id_); }

Var Graph::leaf(Tensor value, bool requires_grad, std::string name) {
    Node n;
    n.op = std::move(name);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Graph::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
        if (v.graph_ != this) throw std::invalid_argument(n.op + ": operand belongs to another graph");
        n.inputs.push_back(v.id_);
        n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
}

const Tensor* Graph::grad_if_present(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad ? &*n.grad : nullptr;
}

void Graph::backward(Var loss) {
    if (loss.graph_ != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (loss.value().size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    for (Node& n : nodes_) n.grad.reset();
    if (!nodes_[loss.id_].requires_grad) return;
    grad_slot(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.grad || !n.backward) continue;
        n.backward(*this, i);
    }
    for (Node& n : nodes_) {
        if (n.leaf && n.requires_grad && !n.grad) n.grad.emplace(n.value.shape());
    }
}

std::vector<std::size_t> Graph::leaves() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].leaf) out.push_back(i);
    }
    return out;
}

}  // namespace psep
