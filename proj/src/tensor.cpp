#include "hwnas/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace hwnas {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<Real>& TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(Shape shape, Real fill, bool requires_grad) : node_(std::make_shared<TensorNode>()) {
  node_->value.assign(hwnas::numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  if (values.size() != hwnas::numel(shape)) {
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Real v, bool requires_grad) { return Tensor(Shape{}, v, requires_grad); }

Tensor Tensor::from_node(NodePtr node) { return Tensor(std::move(node)); }

int Tensor::dim(int i) const {
  const int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw std::out_of_range("dim " + std::to_string(i) + " of " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

std::span<Real> Tensor::grad() { return node_->ensure_grad(); }

std::span<const Real> Tensor::grad() const { return node_->ensure_grad(); }

Real Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) throw std::logic_error("backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode* p = n->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are allocated lazily by the first consumer that
  // writes into them.
  for (TensorNode* n : order)
    if (!n->is_leaf()) std::vector<Real>().swap(n->grad);
  node_->ensure_grad()[0] += Real(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->is_leaf()) continue;
    if (n->grad.empty()) continue;  // nothing flowed into this node
    n->backward(*n);
    // Interior gradients are scratch; only the root and leaves keep theirs.
    if (n != node_.get()) std::vector<Real>().swap(n->grad);
  }
}

Tensor make_result(Shape shape, std::vector<Real> values, std::vector<Tensor> parents, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  TensorNode* n = out.node();
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node_ptr());
  n->backward = std::move(fn);
  return out;
}

}  // namespace hwnas
