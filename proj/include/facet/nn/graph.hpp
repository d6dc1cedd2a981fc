#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "facet/core/error.hpp"
#include "facet/core/tensor.hpp"

namespace facet::nn {

// Reverse-mode autodiff over Tensor<T>. Nodes carry a value, a lazily
// allocated gradient, and a closure that scatters this node's gradient into
// its inputs. Node ids increase monotonically at creation, so every input id
// is smaller than its consumer's; running closures in descending id order is
// a valid reverse topological sweep. Single-threaded by design.

template <class T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // empty until grad_ref() is called during backward
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backward_fn;
    long long id = 0;
    bool requires_grad = false;

    Tensor<T>& grad_ref() {
        if (grad.numel() != val.numel()) grad = Tensor<T>::zeros(val.shape);
        return grad;
    }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

inline long long& node_counter() {
    static long long c = 0;
    return c;
}

template <class T>
Var<T> make_node(Tensor<T> val, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
    n->id = ++node_counter();
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    return n;
}

// Leaf with no gradient flow (dataset samples, noise draws, masks).
template <class T>
Var<T> constant(Tensor<T> t) {
    return make_node<T>(std::move(t), {}, nullptr);
}

// Leaf that collects a gradient (parameters; probe inputs in finite-difference
// checks). The tensor's storage is shared, not copied, so an optimizer update
// through the original Tensor is seen by the next forward pass.
template <class T>
Var<T> leaf(const Tensor<T>& t, bool requires_grad = true) {
    auto n = make_node<T>(t, {}, nullptr);
    n->requires_grad = requires_grad;
    return n;
}

// Seeds root with d(root)/d(root) = 1 and sweeps the reachable subgraph in
// descending id order. Root must be scalar. Gradients accumulate; leaves keep
// theirs until the caller clears them.
template <class T>
void backward(const Var<T>& root) {
    if (root->val.numel() != 1) throw Error(errc::shape_mismatch, "backward root must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs)
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

    root->grad_ref()[0] += T(1);
    for (Node<T>* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

}  // namespace facet::nn
