#include "vistok/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace vistok {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

template <class T>
void Var<T>::backward() const {
    if (!node_) throw ContractError("backward() on undefined Var");
    if (node_->value.numel() != 1) {
        throw ContractError("backward() requires a scalar output, got shape " +
                            shape_str(node_->value.shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS; parent order is fixed so the sweep is deterministic.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn();
    }
}

template class Var<float>;
template class Var<double>;

}  // namespace vistok
