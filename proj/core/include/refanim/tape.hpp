#pragma once

#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refanim/tensor.hpp"

namespace refanim {

// Named parameter tensors with deterministic iteration order.
template <class S>
struct ParamStore {
    std::map<std::string, Tensor<S>> tensors;

    Tensor<S>& create(const std::string& name, Tensor<S> init) {
        auto [it, inserted] = tensors.emplace(name, std::move(init));
        if (!inserted) throw std::logic_error("parameter already registered: " + name);
        return it->second;
    }

    Tensor<S>& get(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<S>& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    size_t size() const { return tensors.size(); }
};

template <class To, class From>
ParamStore<To> store_cast(const ParamStore<From>& in) {
    ParamStore<To> out;
    for (const auto& [name, t] : in.tensors) out.tensors.emplace(name, tensor_cast<To>(t));
    return out;
}

// Reverse-mode autodiff tape. Nodes are appended in evaluation order; backward
// walks the list in reverse. Backward closures capture node indices by value
// and receive the tape by reference, so Tape objects stay movable.
template <class S>
class Tape {
public:
    using BackFn = std::function<void(Tape<S>&)>;

    struct Node {
        Tensor<S> val;
        Tensor<S> grad;  // allocated on first accumulation
        bool requires_grad = false;
        BackFn back;
    };

    int constant(Tensor<S> v) { return push(std::move(v), false, nullptr); }

    int leaf(Tensor<S> v, bool requires_grad = true) {
        return push(std::move(v), requires_grad, nullptr);
    }

    // Binds a store parameter as a leaf (copied); repeated binds return the
    // same node. requires_grad can be turned off per-name via set_trainable.
    int param(const ParamStore<S>& store, const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        bool rg = trainable_.empty() || trainable_.count(name) != 0;
        int id = leaf(store.get(name), rg);
        bound_.emplace(name, id);
        return id;
    }

    // Restrict gradient tracking to the given parameter names. Empty = all.
    void set_trainable(std::vector<std::string> names) {
        trainable_.clear();
        for (auto& n : names) trainable_.insert(std::move(n));
    }

    const std::map<std::string, int>& bound_params() const { return bound_; }

    int push(Tensor<S> v, bool requires_grad, BackFn back) {
        nodes_.push_back(Node{std::move(v), {}, requires_grad, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Attach the backward closure after the node id is known.
    void set_back(int id, BackFn back) { nodes_[static_cast<size_t>(id)].back = std::move(back); }

    const Tensor<S>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    Tensor<S>& val(int id) { return nodes_[static_cast<size_t>(id)].val; }

    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Gradient of a node; empty tensor if nothing was accumulated.
    const Tensor<S>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

    bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad.numel() != 0; }

    // Adds g into the gradient buffer of id (allocating on first use).
    void acc_grad(int id, const Tensor<S>& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.numel() == 0) {
            n.grad = g;
            return;
        }
        for (long i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }

    // Gradient buffer for in-place accumulation; allocates zeros if empty.
    Tensor<S>* grad_buffer(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return nullptr;
        if (n.grad.numel() == 0) n.grad = Tensor<S>::zeros(n.val.shape);
        return &n.grad;
    }

    void backward(int root) {
        Node& r = nodes_[static_cast<size_t>(root)];
        if (r.val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        if (!r.requires_grad) throw std::invalid_argument("backward: root does not require grad");
        if (r.grad.numel() == 0) r.grad = Tensor<S>::full({1}, S(1));
        for (int i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && n.requires_grad && n.grad.numel() != 0) n.back(*this);
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::map<std::string, int> bound_;
    std::set<std::string> trainable_;
};

}  // namespace refanim
