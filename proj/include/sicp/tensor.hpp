#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sicp::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node& self)>;

/// A graph vertex. `value` is immutable once the node has consumers;
/// `grad` is allocated lazily during backward.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  std::vector<double>& ensure_grad();
};

/// Gradient buffer of input `k`, or nullptr when that input is untracked.
inline double* input_grad(Node& self, std::size_t k) {
  auto& in = self.inputs[k];
  return (in && in->requires_grad) ? in->ensure_grad().data() : nullptr;
}

/// Handle to a node in a reverse-mode graph. Copies share storage.
///
/// Leaves created with `requires_grad = true` act as parameters: their
/// gradients accumulate across `backward()` calls until `zero_grad()`.
/// Every op returns a fresh node; tracked tensors are never mutated in place
/// by ops. Optimizers may rewrite leaf values between graph builds.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for leaves only (parameter updates, test setup).
  std::span<double> mutable_data();
  std::span<const double> grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  void set_requires_grad(bool flag);

  double item() const;
  double at(std::size_t c, std::size_t i, std::size_t j) const;

  /// Reverse sweep from a single-element tensor, seeding d(self)/d(self) = 1.
  void backward() const;
  void zero_grad();

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);

  std::shared_ptr<Node> node_;
};

/// Builds an op output. `backward` is attached only if some input needs a
/// gradient; it must read `self.grad` and accumulate into inputs' grads.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   BackwardFn backward);

}  // namespace sicp::ad
