#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ikd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

// One vertex of the dynamically recorded compute graph. `backward` reads
// `self.grad` and accumulates into the grads of `inputs`.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    BackwardFn backward;
    const char* op = "leaf";

    void ensure_grad();
};

// Dense row-major float64 tensor with an optional gradient buffer.
//
// A Tensor is a cheap handle; copies alias the same storage. Values are
// treated as immutable once created, except through `mutable_data()` which
// is reserved for optimizer updates and finite-difference probes on leaves.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    bool has_grad() const;

    double item() const;
    double at(std::initializer_list<std::size_t> index) const;
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    void zero_grad();

    // Copy of the values with no graph history.
    Tensor detach() const;

    // Reverse-mode sweep from this scalar. Leaf grads accumulate across
    // calls; intermediate grads are recomputed each call.
    void backward() const;

    const NodePtr& node() const { return node_; }

  private:
    NodePtr node_;
};

// Thread-local switch: while disabled, ops record no graph history.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

// Builds a graph node from precomputed output values. The node only records
// history when grad mode is on and some input requires grad. Public so that
// callers (and tests) can register custom differentiable operations.
Tensor make_op(const char* name, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward);

// Nodes reachable from `root` that require grad, in topological order
// (inputs before consumers).
std::vector<Node*> topological_order(const Tensor& root);

// Order-sensitive FNV-1a over the bit patterns of the values.
std::uint64_t checksum(std::span<const Tensor> tensors);

}  // namespace ikd
