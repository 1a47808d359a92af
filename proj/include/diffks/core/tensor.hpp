#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/rng.hpp"

namespace diffks {

enum class Init { zeros, glorot_uniform, standard_normal };

/// A trainable matrix with its gradient buffer and Adam moment slots.
/// Storage is row-major; vectors are stored as n x 1.
template <class T>
struct Param {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Init init = Init::zeros;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m;
  std::vector<T> v;

  std::size_t size() const { return rows * cols; }
};

template <class T>
struct ParamGroup {
  std::string name;
  std::vector<Param<T>*> params;
  std::uint64_t step = 0;
};

/// Owns every parameter of a model. Each parameter belongs to exactly one group;
/// iteration order is insertion order, which fixes the checkpoint layout.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Param<T>& add(const std::string& group, const std::string& name, std::size_t rows,
                std::size_t cols, Init init) {
    if (rows == 0 || cols == 0) throw DimensionError("parameter " + name + " has an empty shape");
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto& p = params_.emplace_back();
    p.name = name;
    p.rows = rows;
    p.cols = cols;
    p.init = init;
    p.value.assign(rows * cols, T(0));
    p.grad.assign(rows * cols, T(0));
    p.m.assign(rows * cols, T(0));
    p.v.assign(rows * cols, T(0));
    index_[name] = &p;
    group_of(group).params.push_back(&p);
    return p;
  }

  /// Glorot-uniform for matrices, zeros for biases, N(0,1) where requested.
  void initialize(Rng& rng) {
    for (auto& p : params_) {
      switch (p.init) {
        case Init::zeros:
          std::fill(p.value.begin(), p.value.end(), T(0));
          break;
        case Init::glorot_uniform: {
          const double limit = std::sqrt(6.0 / static_cast<double>(p.rows + p.cols));
          for (auto& x : p.value) x = static_cast<T>((2.0 * uniform_real(rng) - 1.0) * limit);
          break;
        }
        case Init::standard_normal:
          for (auto& x : p.value) x = static_cast<T>(standard_normal(rng));
          break;
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Param<T>>& params() { return params_; }
  const std::deque<Param<T>>& params() const { return params_; }
  std::vector<ParamGroup<T>>& groups() { return groups_; }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

 private:
  ParamGroup<T>& group_of(const std::string& name) {
    for (auto& g : groups_)
      if (g.name == name) return g;
    groups_.push_back(ParamGroup<T>{name, {}, 0});
    return groups_.back();
  }

  std::deque<Param<T>> params_;
  std::vector<ParamGroup<T>> groups_;
  std::map<std::string, Param<T>*> index_;
};

template <class T>
class Tape;

/// Handle to a node on a Tape: a differentiable real matrix.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return rows() * cols(); }
  bool requires_grad() const;

  std::span<const T> values() const;
  /// Empty when no gradient reached this node.
  std::span<const T> grad() const;
  T at(std::size_t r, std::size_t c = 0) const { return values()[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + detail::shape_str(rows(), cols()));
    return values()[0];
  }
  std::vector<T> to_vector() const { return {values().begin(), values().end()}; }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode computation graph. Nodes are appended in evaluation order, so the
/// reverse of creation order is a valid topological order for backward().
///
/// A tape belongs to one thread at a time. Parameter leaves alias the parameter's
/// value and accumulate straight into Param::grad.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> value;
    std::vector<T> grad;
    Param<T>* param = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Tensor<T> constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return leaf(rows, cols, std::move(values), false);
  }
  Tensor<T> variable(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return leaf(rows, cols, std::move(values), true);
  }
  Tensor<T> zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<T>(rows * cols, T(0)));
  }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Tensor<T> param(Param<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Tensor<T>(this, it->second);
    auto& n = nodes_.emplace_back();
    n.rows = p.rows;
    n.cols = p.cols;
    n.param = &p;
    n.requires_grad = grad_enabled_;
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    param_nodes_[&p] = id;
    return Tensor<T>(this, id);
  }

  /// Appends an operation result. The backward closure runs only if some gradient
  /// reached this node and at least one input requires a gradient.
  Tensor<T> make(std::size_t rows, std::size_t cols, std::vector<T> value,
                 std::initializer_list<Tensor<T>> inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& t : inputs) rg = rg || node(t.id()).requires_grad;
    return push(rows, cols, std::move(value), rg, std::move(backward));
  }
  Tensor<T> make(std::size_t rows, std::size_t cols, std::vector<T> value,
                 std::span<const Tensor<T>> inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& t : inputs) rg = rg || node(t.id()).requires_grad;
    return push(rows, cols, std::move(value), rg, std::move(backward));
  }
  /// Result whose gradient flows only into parameters (e.g. embedding gathers).
  Tensor<T> make_param_sink(std::size_t rows, std::size_t cols, std::vector<T> value,
                            Backward backward) {
    return push(rows, cols, std::move(value), grad_enabled_, std::move(backward));
  }

  Node& node(std::uint32_t id) { return nodes_[id]; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  const T* data(std::uint32_t id) const {
    const auto& n = nodes_[id];
    return n.param ? n.param->value.data() : n.value.data();
  }

  /// Gradient accumulator for an input, or nullptr when it needs none.
  T* accum(std::uint32_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    n.has_grad = true;
    if (n.param) return n.param->grad.data();
    if (n.grad.empty()) n.grad.assign(n.rows * n.cols, T(0));
    return n.grad.data();
  }
  const T* grad_of(std::uint32_t id) const {
    const auto& n = nodes_[id];
    if (!n.has_grad) return nullptr;
    return n.param ? n.param->grad.data() : n.grad.data();
  }

  /// Seeds d(root)/d(root) = 1 and propagates. Gradients accumulate additively,
  /// including into parameters; callers zero Param::grad between optimizer steps.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1)
      throw DimensionError("backward() needs a scalar root, got " +
                           detail::shape_str(root.rows(), root.cols()));
    if (!grad_enabled_) throw std::logic_error("backward() on a tape with gradients disabled");
    T* g = accum(root.id());
    if (!g) return;
    g[0] += T(1);
    for (std::int64_t i = root.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }

 private:
  Tensor<T> leaf(std::size_t rows, std::size_t cols, std::vector<T> values, bool rg) {
    if (values.size() != rows * cols)
      throw DimensionError("leaf value count " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(rows, cols));
    return push(rows, cols, std::move(values), rg && grad_enabled_, nullptr);
  }

  Tensor<T> push(std::size_t rows, std::size_t cols, std::vector<T> value, bool rg, Backward bw) {
    auto& n = nodes_.emplace_back();
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(bw);
    return Tensor<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, std::uint32_t> param_nodes_;
};

template <class T>
std::size_t Tensor<T>::rows() const {
  return tape_->node(id_).rows;
}
template <class T>
std::size_t Tensor<T>::cols() const {
  return tape_->node(id_).cols;
}
template <class T>
bool Tensor<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}
template <class T>
std::span<const T> Tensor<T>::values() const {
  return {tape_->data(id_), size()};
}
template <class T>
std::span<const T> Tensor<T>::grad() const {
  const T* g = tape_->grad_of(id_);
  if (!g) return {};
  return {g, size()};
}

}  // namespace diffks
