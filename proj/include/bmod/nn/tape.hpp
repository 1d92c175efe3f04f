#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace bmod::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape);

// A named trainable tensor. `grad` has the same length as `value` and is
// accumulated into by Tape::backward.
template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(std::move(s)), value(numel(shape)), grad(numel(shape)) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives
// and has not been cleared.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Shape& shape() const;
  std::span<const T> value() const;
  std::size_t size() const { return value().size(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode autodiff tape. Nodes are appended in evaluation order and
// backward() walks them in reverse. Each node's backward closure reads the
// node's own gradient and accumulates into its inputs.
template <typename T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var<T> constant(Shape shape, std::vector<T> value);
  Var<T> param(Parameter<T>& p);

  // Appends a computed node. The closure is dropped when no input needs grad.
  Var<T> push(Shape shape, std::vector<T> value, bool needs_grad, std::function<void()> backward);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool needs_grad(int id) const { return node(id).needs_grad; }

  // Gradient buffer for a node, allocated (zeroed) on first access.
  std::vector<T>& grad(int id);

  // Adds `g` into the gradient of `v`; used to seed backward from losses
  // computed outside the tape.
  void seed(const Var<T>& v, std::span<const T> g);

  void backward();
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Shape& Var<T>::shape() const {
  return tape->node(id).shape;
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return tape->node(id).value;
}

template <typename T>
Var<T> Tape<T>::constant(Shape shape, std::vector<T> value) {
  return push(std::move(shape), std::move(value), false, nullptr);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Var<T> out = push(p.shape, p.value, true, nullptr);
  const int id = out.id;
  Parameter<T>* target = &p;
  node(id).backward = [this, id, target] {
    const auto& g = node(id).grad;
    for (std::size_t i = 0; i < g.size(); ++i) target->grad[i] += g[i];
  };
  return out;
}

template <typename T>
Var<T> Tape<T>::push(Shape shape, std::vector<T> value, bool needs_grad,
                     std::function<void()> backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
std::vector<T>& Tape<T>::grad(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::seed(const Var<T>& v, std::span<const T> g) {
  auto& dst = grad(v.id);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <typename T>
void Tape<T>::backward() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward();
  }
}

}  // namespace bmod::nn
