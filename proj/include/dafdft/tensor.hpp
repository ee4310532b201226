#pragma once

// Dense NCHW tensors with tape-free reverse-mode differentiation.
//
// A TensorT is a cheap handle onto a shared node. Every differentiable op
// records its inputs and a backward closure on the output node, so the graph
// is rebuilt on each forward pass and released when the last handle to the
// loss goes away. Everything is templated on the scalar so that the same
// graph can be evaluated in float for training and in double for gradient
// checking.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dafdft {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised for any shape contract violation. The message names the shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline Index element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

enum class Mode { Train, Infer };

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename Scalar>
struct Node {
    Shape shape;
    Buffer<Scalar> value;
    Buffer<Scalar> grad;  // empty until populated
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }
    bool has_grad() const { return grad.size() != 0; }

    /// Zero-initialised gradient storage, allocated on first use.
    Buffer<Scalar>& grad_buffer()
    {
        if (grad.size() == 0) grad = Buffer<Scalar>::Zero(value.size());
        return grad;
    }

    template <typename Expr>
    void accumulate(const Eigen::ArrayBase<Expr>& g)
    {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
};

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
class TensorT {
public:
    using scalar_type = Scalar;

    TensorT() = default;
    explicit TensorT(NodePtr<Scalar> node) : node_(std::move(node)) {}

    TensorT(Shape shape, Buffer<Scalar> data, bool requires_grad = false)
        : node_(std::make_shared<Node<Scalar>>())
    {
        for (Index d : shape)
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        if (element_count(shape) != data.size())
            throw ShapeError("shape " + to_string(shape) + " does not hold " + std::to_string(data.size()) +
                             " values");
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false)
    {
        const Index n = element_count(shape);
        return TensorT(std::move(shape), Buffer<Scalar>::Zero(n), requires_grad);
    }

    static TensorT full(Shape shape, Scalar value, bool requires_grad = false)
    {
        const Index n = element_count(shape);
        return TensorT(std::move(shape), Buffer<Scalar>::Constant(n, value), requires_grad);
    }

    static TensorT from_values(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false)
    {
        Buffer<Scalar> data = Eigen::Map<const Buffer<Scalar>>(values.data(), static_cast<Index>(values.size()));
        return TensorT(std::move(shape), std::move(data), requires_grad);
    }

    static TensorT from_values(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
    {
        return from_values(std::move(shape), std::vector<Scalar>(values), requires_grad);
    }

    static TensorT scalar(Scalar value, bool requires_grad = false) { return full({1}, value, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const NodePtr<Scalar>& node() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    Index numel() const { return node_->value.size(); }

    /// Dimension `axis`; negative values count from the back.
    Index dim(int axis) const
    {
        const int r = rank();
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r)
            throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
        return node_->shape[static_cast<std::size_t>(a)];
    }

    Buffer<Scalar>& data() { return node_->value; }
    const Buffer<Scalar>& data() const { return node_->value; }

    Scalar item() const
    {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    /// Row-major multi-index access, mainly for tests.
    Scalar at(std::initializer_list<Index> index) const { return node_->value[offset(index)]; }

    Index offset(std::initializer_list<Index> index) const
    {
        if (static_cast<int>(index.size()) != rank())
            throw ShapeError("index rank does not match shape " + to_string(shape()));
        Index flat = 0;
        std::size_t k = 0;
        for (Index i : index) {
            if (i < 0 || i >= node_->shape[k]) throw ShapeError("index out of range for " + to_string(shape()));
            flat = flat * node_->shape[k] + i;
            ++k;
        }
        return flat;
    }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool flag)
    {
        node_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return node_->has_grad(); }
    const Buffer<Scalar>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.resize(0); }

    /// Gradient reshaped as a tensor (zeros if none was populated).
    TensorT grad_tensor() const
    {
        if (!has_grad()) return zeros(shape());
        return TensorT(shape(), node_->grad);
    }

    /// New leaf holding a copy of the values.
    TensorT detach() const { return TensorT(shape(), node_->value, false); }

    template <typename To>
    TensorT<To> cast() const
    {
        return TensorT<To>(shape(), node_->value.template cast<To>(), false);
    }

private:
    NodePtr<Scalar> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// Builds the output of a differentiable op. The backward closure is only
/// recorded when grad mode is on and at least one input requires a gradient;
/// otherwise the result is a plain constant. Undefined inputs (an absent
/// bias, say) are skipped.
template <typename Scalar, typename Backward>
TensorT<Scalar> make_op(std::string_view op, Shape shape, Buffer<Scalar> value,
                        std::initializer_list<TensorT<Scalar>> inputs, Backward&& backward)
{
    TensorT<Scalar> out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || (in.defined() && in.requires_grad());
    if (!needs_grad) return out;

    auto& node = *out.node();
    node.requires_grad = true;
    node.op = std::string(op);
    for (const auto& in : inputs)
        if (in.defined()) node.inputs.push_back(in.node());
    node.backward = std::forward<Backward>(backward);
    return out;
}

struct BackwardOptions {
    /// Keep gradients of intermediate nodes after they have been propagated.
    /// Training loops turn this off to bound peak memory.
    bool retain_intermediate_grads = true;
};

/// Reverse-mode sweep from a scalar loss.
///
/// Leaf gradients accumulate across calls until zero_grad(); intermediate
/// gradients are recomputed from scratch on every call, so calling backward
/// twice on the same graph doubles the leaf gradients and nothing else.
template <typename Scalar>
void backward(const TensorT<Scalar>& loss, BackwardOptions options = {})
{
    if (loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw std::logic_error("backward(): loss does not depend on any trainable tensor");

    // Iterative post-order DFS; `order` ends up topologically sorted.
    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> visited;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<Scalar>* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<Scalar>* node : order)
        if (!node->is_leaf()) node->grad.resize(0);

    loss.node()->grad = Buffer<Scalar>::Ones(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Scalar>* node = *it;
        if (node->is_leaf() || !node->has_grad()) continue;
        node->backward(*node);
        if (!options.retain_intermediate_grads) node->grad.resize(0);
    }
}

}  // namespace dafdft
