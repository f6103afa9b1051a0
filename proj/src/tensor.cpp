#include "mslae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mslae/error.hpp"

namespace mslae {

namespace {
thread_local bool t_grad_enabled = true;
}

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

std::vector<float>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0f, requires_grad); }

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  return from_data(shape, std::vector<float>(static_cast<size_t>(shape.numel()), value), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
  if (shape.n <= 0 || shape.c <= 0 || shape.h <= 0 || shape.w <= 0)
    throw ConfigError("tensor shape must be positive in every dimension, got " + shape.str());
  if (static_cast<int64_t>(data.size()) != shape.numel())
    throw ConfigError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                      shape.str());
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full(Shape{}, value, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->shape;
}

std::span<const float> Tensor::data() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ConfigError("item() requires a single-element tensor, got " + shape().str());
  return impl_->data[0];
}

int64_t Tensor::index(int64_t n, int64_t c, int64_t h, int64_t w) const {
  const Shape& s = shape();
  return ((n * s.c + c) * s.h + h) * s.w + w;
}

float Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
  return impl_->data[static_cast<size_t>(index(n, c, h, w))];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw ConfigError("use of undefined tensor");
  impl_->requires_grad = value;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!impl_) throw ConfigError("use of undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return from_data(shape(), impl_->data, false); }

bool Tensor::is_leaf() const { return impl_ && !impl_->backward_fn; }

void Tensor::backward() const {
  if (!impl_) throw ConfigError("backward() on undefined tensor");
  if (numel() != 1) throw ConfigError("backward() requires a scalar loss, got shape " + shape().str());
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the reachable graph.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  impl_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(node->grad);
  }
}

Tensor make_result(const Shape& shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const std::vector<float>&)> backward_fn) {
  check_finite(data, "op output");
  Tensor out = Tensor::from_data(shape, std::move(data), false);
  if (!t_grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.impl_->requires_grad = true;
  for (const Tensor& t : inputs)
    if (t.defined()) out.impl_->parents.push_back(t.impl_ptr());
  out.impl_->backward_fn = std::move(backward_fn);
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const float> values) {
  if (!t.requires_grad()) return;
  auto& g = t.impl()->grad_buffer();
  for (size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

bool grad_mode_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void check_finite(std::span<const float> values, const char* what) {
  for (float v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::version_mismatch: return "version mismatch";
    case CheckpointErrorKind::truncated: return "truncated checkpoint";
    case CheckpointErrorKind::unknown_tensor: return "unknown tensor";
    case CheckpointErrorKind::shape_mismatch: return "shape mismatch";
    case CheckpointErrorKind::malformed: return "malformed checkpoint";
  }
  return "checkpoint error";
}

}  // namespace mslae
