#include "binformer/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace binformer {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<float> data) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()) + " elements");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return n;
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor Tensor::zeros(Shape shape) {
    auto n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f)));
}

Tensor Tensor::full(Shape shape, float v) {
    auto n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<float>(static_cast<size_t>(n), v)));
}

Tensor Tensor::from(Shape shape, std::vector<float> data) {
    return wrap(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

Tensor Tensor::randn(Shape shape, std::mt19937& rng, float stddev) {
    auto n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (auto& x : data) x = dist(rng);
    return wrap(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::uniform(Shape shape, std::mt19937& rng, float lo, float hi) {
    auto n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& x : data) x = dist(rng);
    return wrap(make_leaf(std::move(shape), std::move(data)));
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor with " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw DimensionError("index rank mismatch");
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) {
        flat = flat * s[i] + v;
        ++i;
    }
    return node_->value[static_cast<size_t>(flat)];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<detail::Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return wrap(n);
}

Tape Tape::from_root(const Tensor& root) {
    Tape t;
    t.root_ = root;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            t.order_.push_back(node);
            stack.pop_back();
        }
    }
    return t;
}

void Tape::backward() {
    if (order_.empty()) return;
    detail::Node* root = order_.back();
    root->ensure_grad();
    std::fill(root->grad.begin(), root->grad.end(), 1.0f);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

void backward(const Tensor& loss) { Tape::from_root(loss).backward(); }

}  // namespace binformer
