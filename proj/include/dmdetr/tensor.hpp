#pragma once

#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmdetr/rng.hpp"

namespace dmdetr {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class MaskError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;
using Mask = std::vector<std::uint8_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

struct TensorNode;

// Scoped switch that disables graph recording (inference mode).
struct NoGrad {
    NoGrad() : prev(flag()) { flag() = true; }
    ~NoGrad() { flag() = prev; }
    static bool& flag() {
        thread_local bool f = false;
        return f;
    }
    bool prev;
};

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // accumulates into parents' grads

    std::vector<double>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

// Value-semantic handle to a node in the computation graph.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->value.assign(shape_numel(shape), 0.0);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.values()) x = v;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::size_t size() const { return node_->value.size(); }

    // Tensor is a shared handle; const applies to the handle, not the payload.
    std::vector<double>& values() const { return node_->value; }
    std::vector<double>& grad() const { return node_->grad_buf(); }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }

    double item() const {
        if (size() != 1) throw ContractError("item: tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }
    double operator()(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
    double operator()(int i, int j) const {
        return node_->value[static_cast<std::size_t>(i) * dim(1) + j];
    }

    void zero_grad() const { node_->grad.clear(); }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Builds an op node. Graph edges are recorded only when some parent requires
// gradients and inference mode is off; otherwise the result is a plain tensor.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool record = false;
    if (!NoGrad::flag()) {
        for (const auto& p : parents)
            if (p.requires_grad()) record = true;
    }
    if (record) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate: calling twice
// without zeroing doubles them.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) {
        // Loss does not depend on any parameter; nothing to do.
        return;
    }
    // Iterative post-order DFS: each node lands after all nodes it feeds from,
    // so the reversed order visits every node exactly once before its parents.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    root->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace dmdetr
