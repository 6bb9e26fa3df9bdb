#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcompat/error.hpp"

namespace mcompat {

using Dims = std::vector<std::size_t>;

inline std::string dims_str(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

// Row-major strides: stride[j] = prod(dims[m] for m > j).
inline Dims strides_of(const Dims& dims) {
  Dims s(dims.size(), 1);
  for (std::size_t j = dims.size(); j-- > 1;) s[j - 1] = s[j] * dims[j];
  return s;
}

namespace detail {

template <class T>
struct TensorImpl;

// One recorded operation. `backward` receives the gradient of the node's
// output and accumulates into the gradients of `inputs`.
template <class T>
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T>)> backward;
};

template <class T>
struct TensorImpl {
  Dims dims;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;

  bool needs_grad() const { return requires_grad || node != nullptr; }

  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline void validate_dims(const Dims& dims) {
  for (auto d : dims)
    if (d < 1) throw ShapeError("tensor extents must be >= 1, got " + dims_str(dims));
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the enclosing scope (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share storage and graph history;
/// use clone() for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Dims dims, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    detail::validate_dims(dims);
    impl_->data.assign(numel_of(dims), fill);
    impl_->dims = std::move(dims);
  }

  Tensor(Dims dims, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    detail::validate_dims(dims);
    if (numel_of(dims) != values.size())
      throw ShapeError("element count " + std::to_string(values.size()) +
                       " does not match dims " + dims_str(dims));
    impl_->dims = std::move(dims);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims), T(0)); }
  static Tensor ones(Dims dims) { return Tensor(std::move(dims), T(1)); }
  static Tensor full(Dims dims, T value) { return Tensor(std::move(dims), value); }
  static Tensor iota(Dims dims, T start = T(0)) {
    Tensor t(std::move(dims));
    std::iota(t.impl_->data.begin(), t.impl_->data.end(), start);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Dims& dims() const { return impl_->dims; }
  std::size_t dim(std::size_t i) const { return impl_->dims.at(i); }
  std::size_t rank() const { return impl_->dims.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Direct write access; only for leaves (initialization, optimizer updates).
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor with dims " + dims_str(dims()));
    return impl_->data[0];
  }

  template <class... Idx>
  T at(Idx... idx) const {
    return impl_->data[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("index rank mismatch for dims " + dims_str(dims()));
    std::size_t off = 0;
    std::size_t j = 0;
    for (auto i : idx) {
      if (i >= impl_->dims[j]) throw ShapeError("index out of range for dims " + dims_str(dims()));
      off = off * impl_->dims[j] + i;
      ++j;
    }
    return off;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    impl_->requires_grad = flag;
    return *this;
  }
  bool needs_grad() const { return impl_->needs_grad(); }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  // Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const T> grad() const { return impl_->grad_buffer(); }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  const char* grad_fn() const { return impl_->node ? impl_->node->op : ""; }

  // Same values, no history, independent storage.
  Tensor clone() const { return Tensor(dims(), impl_->data); }
  Tensor detach() const { return clone(); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(dims(), std::move(v));
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <class T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->needs_grad()) return true;
  return false;
}

template <class T>
bool should_record(const std::vector<Tensor<T>>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto& t : inputs)
    if (t.needs_grad()) return true;
  return false;
}

template <class T, class Fn>
void attach(Tensor<T>& out, const char* op, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
            Fn&& backward) {
  auto node = std::make_shared<GradNode<T>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::forward<Fn>(backward);
  out.impl()->node = std::move(node);
}

// Gradient sink for an input, or an empty span when the input does not
// participate in differentiation.
template <class T>
std::span<T> grad_sink(TensorImpl<T>* impl) {
  if (!impl || !impl->needs_grad()) return {};
  return impl->grad_buffer();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Gradients accumulate into every
/// reachable leaf with requires_grad; callers zero them between steps.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() requires a scalar loss, got dims " +
                     (loss.defined() ? dims_str(loss.dims()) : std::string("<undefined>")));
  using Impl = detail::TensorImpl<T>;
  Impl* root = loss.impl().get();
  if (!root->needs_grad()) return;

  // Iterative post-order DFS: inputs precede their consumers in `order`.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      Impl* child = impl->node->inputs[next++].get();
      if (child->needs_grad() && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (!impl->node) continue;
    if (impl->grad.size() == impl->data.size()) impl->node->backward(impl->grad);
    // Interior gradients are not retained.
    std::vector<T>().swap(impl->grad);
  }
}

}  // namespace mcompat
