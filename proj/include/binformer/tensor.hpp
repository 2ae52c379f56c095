#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "binformer/error.hpp"

namespace binformer {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

// One recorded operation. Nodes form the reverse-mode graph: `inputs` are the
// operands this value was computed from, `backward` distributes this node's
// grad into them. Leaf nodes have no inputs and no backward rule.
struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily during backward
    bool requires_grad = false;
    const char* op = "leaf";
    int site = -1;  // quantization site id when this node is a quantizer output
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};

}  // namespace detail

// Whether newly created ops record backward rules. Teacher inference and
// evaluation run with grads disabled to keep graphs flat.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Dense row-major float32 tensor, also a handle to its node in the autodiff
// graph. Copies are shallow (shared node).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float v);
    static Tensor from(Shape shape, std::vector<float> data);
    static Tensor scalar(float v);
    static Tensor randn(Shape shape, std::mt19937& rng, float stddev = 1.0f);
    static Tensor uniform(Shape shape, std::mt19937& rng, float lo, float hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    std::span<const float> data() const { return node_->value; }
    std::span<float> mutable_data() { return node_->value; }
    float item() const;
    float at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    // Value copy with no history.
    Tensor detach() const;

    const char* op() const { return node_->op; }

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

// Topologically ordered view of the graph reachable from a root: every
// operation's inputs precede it in `order()`. backward() seeds the root with
// ones and applies each backward rule exactly once, in reverse order.
class Tape {
public:
    static Tape from_root(const Tensor& root);
    void backward();
    size_t size() const { return order_.size(); }
    const std::vector<detail::Node*>& order() const { return order_; }

private:
    Tensor root_;
    std::vector<detail::Node*> order_;
};

// Convenience: build the tape for `loss` and run backward.
void backward(const Tensor& loss);

}  // namespace binformer
