#pragma once
// Dense f64 tensors with a define-by-run tape for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "corma/common.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace corma::nk {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct TensorImpl;
using NodePtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set once a backward pass has run through this node
  std::vector<NodePtr> parents;
  std::function<void(TensorImpl&)> backward_fn;  // reads this->grad, accumulates into parents
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
#ifdef NDEBUG
inline thread_local bool check_finite = false;
#else
inline thread_local bool check_finite = true;
#endif
}  // namespace detail

/// Disables graph recording in its scope (inference).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS after every op; training allocates and frees megabytes per op.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)done;
#endif
}

/// Turns the per-op NaN/Inf check on or off for this thread (on by default
/// in debug builds).
inline void set_check_finite(bool on) { detail::check_finite = on; }
inline bool check_finite_enabled() { return detail::check_finite; }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr p) : p_(std::move(p)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto p = std::make_shared<TensorImpl>();
    p->data.assign(numel(shape), 0.0);
    p->shape = std::move(shape);
    p->requires_grad = requires_grad;
    return Tensor(p);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.p_->data.begin(), t.p_->data.end(), v);
    return t;
  }
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw InvalidArgument("Tensor: shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                            " values, got " + std::to_string(data.size()));
    auto p = std::make_shared<TensorImpl>();
    p->shape = std::move(shape);
    p->data = std::move(data);
    p->requires_grad = requires_grad;
    return Tensor(p);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t size() const { return p_->data.size(); }
  bool requires_grad() const { return p_->requires_grad; }

  std::vector<double>& data() { return p_->data; }
  const std::vector<double>& data() const { return p_->data; }
  double operator[](std::size_t i) const { return p_->data[i]; }

  /// Gradient buffer; zeros when nothing has been accumulated.
  std::vector<double>& grad() {
    p_->ensure_grad();
    return p_->grad;
  }
  bool has_grad() const { return p_->grad.size() == p_->data.size(); }
  void zero_grad() { p_->grad.clear(); }

  double item() const {
    if (p_->data.size() != 1) throw InvalidArgument("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return p_->data[0];
  }

  /// Copy of the values without graph history.
  Tensor detach() const { return from(shape(), data(), false); }

  TensorImpl* impl() const { return p_.get(); }
  const NodePtr& node() const { return p_; }

 private:
  NodePtr p_;
};

inline void check_values(const TensorImpl& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + t.op);
}

/// Creates an op output. Records a backward closure when any input needs a
/// gradient and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                          std::function<void(TensorImpl&)> backward) {
  auto p = std::make_shared<TensorImpl>();
  p->shape = std::move(shape);
  p->data = std::move(data);
  p->op = op;
  if (detail::check_finite) check_values(*p);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any && detail::grad_enabled) {
    p->requires_grad = true;
    for (auto& t : inputs) p->parents.push_back(t.node());
    p->backward_fn = std::move(backward);
  }
  return Tensor(p);
}

/// Reverse-mode pass from a scalar loss. Leaves accumulate into .grad();
/// the graph may not be traversed twice.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw InvalidArgument("backward: undefined tensor");
  if (loss.size() != 1 || loss.rank() != 0)
    throw InvalidArgument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw InvalidArgument("backward: loss does not depend on any parameter");
  if (loss.impl()->consumed) throw std::logic_error("backward: graph already traversed");

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl(), 0}};
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* par = node->parents[next++].get();
      if (par->requires_grad && seen.insert(par).second) stack.push_back({par, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // interior gradients are allocated on first use and freed once
  // propagated; leaves keep accumulating across calls
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->is_leaf()) continue;
    if (n->consumed) throw std::logic_error("backward: graph already traversed");
    for (auto& par : n->parents)
      if (par->requires_grad) par->ensure_grad();
    n->backward_fn(*n);
    n->consumed = true;
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace corma::nk
