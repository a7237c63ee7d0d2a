#include "ikd/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ikd/errors.hpp"

namespace ikd {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void Node::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

static NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    for (auto d : shape)
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
        throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf(Shape{}, std::vector<double>{value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size())
        throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

std::span<const double> Tensor::grad() const {
    if (node_->grad.empty()) throw ContractError("tensor has no gradient");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw IndexError("index rank does not match " + shape_str(s));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw IndexError("index out of range for " + shape_str(s));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

std::vector<double> Tensor::to_vector() const { return node_->data; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor::from(shape(), node_->data, false); }

std::vector<Node*> topological_order(const Tensor& root) {
    std::vector<Node*> order;
    if (!root.defined() || !root.requires_grad()) return order;
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS; deep transformer graphs overflow recursion.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void Tensor::backward() const {
    if (numel() != 1)
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
    auto order = topological_order(*this);
    for (Node* n : order) {
        if (n->backward) n->grad.assign(n->data.size(), 0.0);
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward) continue;
        for (auto& in : n->inputs)
            if (in->requires_grad) in->ensure_grad();
        n->backward(*n);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_op(const char* name, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = name;
    bool track = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) track = track || in.requires_grad();
    }
    if (track) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

std::uint64_t checksum(std::span<const Tensor> tensors) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tensors) {
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xffU;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

}  // namespace ikd
