#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace geniedrive::nn {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// One vertex of the dynamic autodiff graph.
///
/// `inputs` and `backward` are only populated when the node was produced by an
/// op while gradient recording was enabled and at least one input required a
/// gradient. `grad` is allocated lazily on first accumulation.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access; only valid on leaves (parameter init, optimizer updates).
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(int64_t flat_index) const { return node_->value[static_cast<size_t>(flat_index)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar. Gradients accumulate into leaves.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of values into a new leaf.
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Thread-local switch for graph recording.
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

/// Builds the output node of an op. When recording is off or no input needs a
/// gradient, the backward closure and the input links are dropped.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

}  // namespace geniedrive::nn
