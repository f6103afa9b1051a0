#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mslae {

/// Dense N x C x H x W extent. All tensors in the engine are 4-D; scalars are 1x1x1x1.
struct Shape {
  int64_t n = 1;
  int64_t c = 1;
  int64_t h = 1;
  int64_t w = 1;

  int64_t numel() const { return n * c * h * w; }
  int64_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tensor;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until the first accumulation
  bool requires_grad = false;

  // Graph edge: inputs this value was computed from, and the closure that
  // pushes this node's grad into theirs.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const std::vector<float>& grad_out)> backward_fn;

  std::vector<float>& grad_buffer();
};

}  // namespace detail

/// Reference-counted handle to a tensor value plus its autograd node.
///
/// Copies share storage. Values are treated as immutable once produced by an
/// op; only parameters are updated in place (by the optimizer) and only grad
/// buffers are written during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const { return shape().numel(); }

  std::span<const float> data() const;
  // In-place access; only for leaves (parameters, freshly built inputs).
  std::span<float> mutable_data();

  float item() const;
  float at(int64_t n, int64_t c, int64_t h, int64_t w) const;
  int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  // Copy of the values without graph history.
  Tensor detach() const;
  bool is_leaf() const;

  /// Reverse-mode pass from this scalar; accumulates into every reachable
  /// tensor with requires_grad.
  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(const Shape&, std::vector<float>, std::initializer_list<Tensor>,
                            std::function<void(const std::vector<float>&)>);
};

/// Builds an op output. When grad mode is on and any input requires grad, the
/// result records `inputs` as parents and `backward_fn` as its pullback.
Tensor make_result(const Shape& shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const std::vector<float>&)> backward_fn);

// Adds `values` into t's grad buffer if t participates in autograd.
void accumulate_grad(const Tensor& t, std::span<const float> values);

bool grad_mode_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void check_finite(std::span<const float> values, const char* what);

}  // namespace mslae
