#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace levit {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

// Precision used by factories when no dtype is passed. Gradient checks switch
// this to F64 for the duration of a test.
DType default_dtype();
void set_default_dtype(DType dtype);

class DefaultDTypeGuard {
 public:
  explicit DefaultDTypeGuard(DType dtype);
  ~DefaultDTypeGuard();
  DefaultDTypeGuard(const DefaultDTypeGuard&) = delete;
  DefaultDTypeGuard& operator=(const DefaultDTypeGuard&) = delete;

 private:
  DType previous_;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Global switch for graph recording. Inference paths disable it.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct TensorImpl;

/// Dense row-major array with shared storage and an optional autograd node.
///
/// Copies are shallow: two Tensor handles may refer to the same storage, which
/// is how parameters are shared between a module and an optimizer. Use clone()
/// for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = default_dtype());
  static Tensor ones(const Shape& shape, DType dtype = default_dtype());
  static Tensor full(const Shape& shape, double value, DType dtype = default_dtype());
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = default_dtype());
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = default_dtype());

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  // Negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  double item() const;
  double value(std::int64_t flat_index) const;
  void set_value(std::int64_t flat_index, double v);
  std::vector<double> to_vector() const;

  Tensor to(DType dtype) const;
  Tensor clone() const;
  Tensor detach() const;
  // Differentiable; returns a copy with the new shape.
  Tensor reshape(const Shape& shape) const;
  // Overwrites the elements from another tensor of the same shape (no graph).
  void copy_from(const Tensor& other);

  bool requires_grad() const;
  Tensor& set_requires_grad(bool enabled);
  bool is_leaf() const;

  // Accumulated gradient; a zero tensor when nothing has been accumulated.
  Tensor grad() const;
  bool has_grad() const;
  void zero_grad();

  // Reverse-mode pass from a single-element tensor. Gradients accumulate into
  // every reachable leaf that requires grad.
  void backward() const;

  const void* id() const { return impl_.get(); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

}  // namespace levit
