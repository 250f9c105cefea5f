/*
 * Copyright 2026 The mixsup Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mixsup/core/error.hpp"

namespace mixsup::num {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t numel_of(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Floor applied by every guarded log/div. Mutable so experiments can change it.
inline double& epsilon_floor_ref()
{
    static double value = 1e-7;
    return value;
}
inline double epsilon_floor() { return epsilon_floor_ref(); }
inline void set_epsilon_floor(double value) { epsilon_floor_ref() = value; }

namespace detail {
inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into inputs that require grad.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return inputs.empty(); }
    bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
    void ensure_grad()
    {
        if (!has_grad()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false)
    {
        if (shape.empty()) shape = {1};
        for (auto extent : shape) {
            if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
        }
        if (numel_of(shape) != values.size()) {
            throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                             to_string(shape));
        }
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false)
    {
        auto n = numel_of(shape.empty() ? Shape{1} : shape);
        return from_values(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

    static Tensor scalar(T v, bool requires_grad = false) { return from_values({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    T at(std::size_t flat) const { return node_->value.at(flat); }
    T item() const
    {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
        return node_->value[0];
    }

    /// Only leaves may be mutated (parameter updates, test probing).
    std::span<T> mutable_values()
    {
        if (!node_->is_leaf()) throw Error(std::string("cannot mutate output of op '") + node_->op + "'");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag)
    {
        if (!node_->is_leaf()) throw Error("requires_grad can only be set on leaves");
        node_->requires_grad = flag;
    }

    bool has_grad() const { return node_->has_grad(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad()
    {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad()
    {
        if (node_->has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    Tensor detach() const { return from_values(shape(), node_->value, false); }

    const char* op() const { return node_->op; }
    const std::shared_ptr<Node<T>>& impl() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
bool all_finite(const Tensor<T>& t)
{
    return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> inputs, std::function<void(Node<T>&)> backward_fn)
{
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = op;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (any && grad_enabled()) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

} // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; intermediate gradients are reset at the start of each sweep.
template <class T>
void backward(const Tensor<T>& root)
{
    if (!root.defined() || root.numel() != 1) {
        throw ShapeError("backward requires a scalar root, got " +
                         (root.defined() ? to_string(root.shape()) : std::string("undefined")));
    }
    Node<T>* start = root.impl().get();
    if (!start->requires_grad) return;

    // Iterative post-order DFS yields a topological order (inputs first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(start, 0);
    visited.insert(start);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* node : order) {
        if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
    }
    start->ensure_grad();
    start->grad[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->is_leaf() || !node->backward_fn) continue;
        for (auto& in : node->inputs) {
            if (in->requires_grad) in->ensure_grad();
        }
        node->backward_fn(*node);
    }
}

} // namespace mixsup::num
