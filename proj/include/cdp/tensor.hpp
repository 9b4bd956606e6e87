#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cdp/rng.hpp"

namespace cdp {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

// Tape construction is enabled by default; NoGradGuard disables it for
// inference-only forward passes on the current thread.
inline thread_local bool g_grad_enabled = true;

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev; }
  bool prev;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

// Dense row-major tensor participating in a reverse-mode autodiff tape.
// Values are immutable once the tensor has been consumed by an op; gradient
// accumulators are the only mutable state after that point.
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.n_ = std::make_shared<detail::Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(shape_numel(t.n_->shape), S(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static TensorT full(Shape shape, S v, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw TensorError("from_data: shape " + shape_str(shape) + " does not match data size " +
                        std::to_string(data.size()));
    TensorT t;
    t.n_ = std::make_shared<detail::Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(S v) { return from_data({1}, {v}); }

  static TensorT randn(Shape shape, Rng& rng, S stdev = S(1), bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.n_->value) v = static_cast<S>(rng.normal()) * stdev;
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const {
    int r = static_cast<int>(n_->shape.size());
    if (i < 0) i += r;
    return n_->shape[i];
  }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return n_->numel(); }

  const std::vector<S>& data() const { return n_->value; }
  // Mutation is only safe before the tensor enters the graph (e.g. parameter
  // init and optimizer updates between steps).
  std::vector<S>& mutable_data() { return n_->value; }

  S item() const {
    if (numel() != 1) throw TensorError("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  TensorT& set_requires_grad(bool f) {
    n_->requires_grad = f;
    return *this;
  }

  const std::vector<S>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  std::vector<S>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Reverse pass from a scalar root. Accumulates into .grad of every
  // reachable tensor that requires grad.
  void backward() const {
    if (numel() != 1) throw TensorError("backward: root must be scalar, got " + shape_str(shape()));
    // Topological order by iterative DFS.
    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    std::vector<std::pair<detail::Node<S>*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        detail::Node<S>* p = node->parents[idx++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (auto* node : order) node->ensure_grad();
    n_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

  static TensorT wrap(std::shared_ptr<detail::Node<S>> n) {
    TensorT t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<S>> n_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

// Create a result node. Parents/backward are attached only when the tape is
// active and some parent requires grad.
template <typename S>
TensorT<S> make_result(Shape shape, std::vector<S> value,
                       std::vector<TensorT<S>> parents,
                       std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = g_grad_enabled;
  if (track) {
    bool any = false;
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) any = true;
    track = any;
  }
  if (track) {
    n->is_leaf = false;
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return TensorT<S>::wrap(std::move(n));
}

}  // namespace detail

}  // namespace cdp
