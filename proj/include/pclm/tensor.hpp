#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pclm/error.hpp"

namespace pclm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major array of doubles. Copies of a Tensor share storage; use
// clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage>()) {
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) throw ShapeError("tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  const std::vector<double>& values() const { return s_->data; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("tensor: item() on shape " + shape_str(shape()));
    }
    return s_->data[0];
  }

  double operator[](std::size_t flat) const { return s_->data[flat]; }
  double at(std::size_t row, std::size_t col) const {
    return s_->data[row * s_->shape.back() + col];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  // Gradient buffers live in the shared storage, so these are const on the
  // handle.
  std::span<double> mutable_grad() const {
    ensure_grad();
    return s_->grad;
  }
  void ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  }
  void zero_grad() const { s_->grad.assign(s_->data.size(), 0.0); }
  void clear_grad() { s_->grad.clear(); }

  // Gradient as a standalone tensor (zeros when nothing accumulated).
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), s_->grad);
  }

  Tensor clone() const {
    Tensor t(shape(), s_->data, s_->requires_grad);
    return t;
  }

  // Same values, outside any graph.
  Tensor detach() const { return Tensor(shape(), s_->data, false); }

  const void* id() const { return s_.get(); }
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<detail::Storage> s_;
};

inline bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// One recorded primitive application. `backward` reads output's gradient and
// accumulates into the inputs that require it.
struct GraphNode {
  std::string primitive;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

// Append-only tape of primitive applications; creation order is a valid
// topological order.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  void record(GraphNode node) {
    produced_.insert(node.output.id());
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  bool produced(const Tensor& t) const { return produced_.contains(t.id()); }

  void clear() {
    nodes_.clear();
    produced_.clear();
  }

 private:
  std::vector<GraphNode> nodes_;
  std::unordered_set<const void*> produced_;
};

namespace detail {
inline Graph*& active_graph_slot() {
  thread_local Graph* active = nullptr;
  return active;
}
}  // namespace detail

inline Graph* active_graph() { return detail::active_graph_slot(); }

// Makes `graph` the recording target for the current thread until the scope
// ends. Outside any scope, primitives compute values without recording.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph) : previous_(detail::active_graph_slot()) {
    detail::active_graph_slot() = &graph;
  }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
  ~GraphScope() { detail::active_graph_slot() = previous_; }

 private:
  Graph* previous_;
};

// Suspends recording for the current thread.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_graph_slot()) {
    detail::active_graph_slot() = nullptr;
  }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
  ~NoGradScope() { detail::active_graph_slot() = previous_; }

 private:
  Graph* previous_;
};

// Leaf gradients produced by one backward pass, keyed by tensor identity.
class GradientMap {
 public:
  void put(const Tensor& leaf) { grads_[leaf.id()] = leaf.grad_tensor(); }

  bool contains(const Tensor& t) const { return grads_.contains(t.id()); }

  // Zeros for tensors the loss does not depend on.
  Tensor get(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor(t.shape());
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const void*, Tensor> grads_;
};

// Reverse sweep over `graph` from a scalar loss. Leaf tensors accumulate into
// their grad buffers (callers zero them between steps).
inline GradientMap backward(const Tensor& loss, Graph& graph) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "<null>"));
  }
  if (!graph.produced(loss)) {
    throw ContractError("backward: loss was not produced by this graph");
  }
  Tensor seed = loss;
  seed.zero_grad();
  seed.mutable_grad()[0] = 1.0;

  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }

  GradientMap out;
  for (const auto& node : nodes) {
    for (const auto& in : node.inputs) {
      if (in.requires_grad() && !graph.produced(in)) out.put(in);
    }
  }
  return out;
}

}  // namespace pclm
