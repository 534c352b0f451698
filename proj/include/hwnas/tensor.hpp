#pragma once

// Dense n-dimensional tensors with tape-free reverse-mode autodiff.
//
// Every op result keeps shared pointers to its inputs plus a backward
// closure; Tensor::backward() topologically sorts the reachable graph and
// runs the closures in reverse order. Leaf tensors (parameters, inputs)
// accumulate gradients across backward calls until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hwnas {

#ifdef HWNAS_REAL_F64
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;
using BackwardFn = std::function<void(const TensorNode& self)>;

struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // sized on first use
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
  std::vector<Real>& ensure_grad();
};

// Scoped switch for graph recording. Inference and optimizer steps run
// with recording disabled.
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

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor scalar(Real v, bool requires_grad = false);
  static Tensor from_node(NodePtr node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<Real> values() { return node_->value; }
  std::span<const Real> values() const { return node_->value; }
  std::vector<Real>& raw() { return node_->value; }
  const std::vector<Real>& raw() const { return node_->value; }

  // Gradient view; allocated (zero-filled) on demand so it always matches
  // the value shape.
  std::span<Real> grad();
  std::span<const Real> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }

  Real item() const;
  Real at(std::size_t flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  void zero_grad();

  // New leaf sharing no graph with this tensor; values are copied.
  Tensor detach() const;

  // Seeds d(self)/d(self) = 1 and propagates to every reachable node that
  // requires grad. Self must hold exactly one element.
  void backward() const;

  TensorNode* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

// Builds an op result. The node records `parents` and `fn` only when grad
// recording is on and at least one parent requires grad.
Tensor make_result(Shape shape, std::vector<Real> values,
                   std::vector<Tensor> parents, BackwardFn fn);

}  // namespace hwnas
