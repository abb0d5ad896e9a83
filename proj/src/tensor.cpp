#include "sicp/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

#include "sicp/error.hpp"

namespace sicp {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonScalarObjective: return "NonScalarObjective";
    case ErrorKind::DegenerateAffine: return "DegenerateAffine";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::RejectionBudget: return "RejectionBudget";
    case ErrorKind::DegenerateBox: return "DegenerateBox";
    case ErrorKind::UndefinedRecall: return "UndefinedRecall";
    case ErrorKind::MalformedMessage: return "MalformedMessage";
    case ErrorKind::CorruptPayload: return "CorruptPayload";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorKind::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::Io: return "IoError";
  }
  return "Unknown";
}

}  // namespace sicp

namespace sicp::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(ad::numel(shape), value);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != ad::numel(shape)) {
    throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(values.size()) +
                                              " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t axis) const { return node_->shape.at(axis); }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

double Tensor::item() const {
  if (numel() != 1) throw Error(ErrorKind::NonScalarObjective, "item() on shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t c, std::size_t i, std::size_t j) const {
  const auto& s = node_->shape;
  return node_->value[(c * s[1] + i) * s[2] + j];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return from(node_->shape, node_->value, requires_grad); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw Error(ErrorKind::NonScalarObjective, "backward() needs a single-element tensor, got " +
                                                   shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior grads are per-sweep scratch; leaves accumulate.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    for (auto& t : inputs) node->inputs.push_back(t.defined() ? t.node() : nullptr);
  }
  return Tensor(std::move(node));
}

}  // namespace sicp::ad
