#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "vistok/tensor.hpp"

namespace vistok {

namespace detail {
bool& grad_mode();
}

// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.numel() != value.numel()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
    bool has_grad() const { return grad.numel() == value.numel() && value.numel() > 0; }
};

// Handle to a node of the autodiff tape. Copying a Var shares the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        return Var(std::move(n));
    }
    static Var leaf(Tensor<T> v, bool requires_grad = true) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    std::size_t numel() const { return node_->value.numel(); }
    T item() const { return node_->value.item(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    bool has_grad() const { return node_->has_grad(); }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    // Reverse-mode sweep from a scalar output, seeding d(out)/d(out) = 1.
    void backward() const;

private:
    std::shared_ptr<Node<T>> node_;
};

// Builds an op output node. When grad mode is off or no parent needs a
// gradient, the node is a constant and the closure is dropped.
template <class T, class Backward>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, Backward&& make_backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool any = false;
    if (grad_enabled()) {
        for (const auto& p : parents) any = any || p.requires_grad();
    }
    if (any) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node_ptr());
        Node<T>* self = n.get();
        n->backward_fn = make_backward(self);
    }
    return Var<T>(std::move(n));
}

extern template class Var<float>;
extern template class Var<double>;

}  // namespace vistok
