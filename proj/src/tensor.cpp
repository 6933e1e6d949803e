#include "levit/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "tensor_impl.hpp"

namespace levit {

namespace {

DType g_default_dtype = DType::F32;
bool g_grad_enabled = true;

Storage make_storage(DType dtype, std::int64_t n) {
  if (dtype == DType::F32) {
    return std::vector<float>(static_cast<std::size_t>(n), 0.0f);
  }
  return std::vector<double>(static_cast<std::size_t>(n), 0.0);
}

void check_shape(const Shape& shape) {
  for (auto extent : shape) {
    if (extent <= 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
}

TensorImpl& require(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) {
    throw std::logic_error("operation on an undefined tensor");
  }
  return *impl;
}

}  // namespace

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

const char* dtype_name(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

DType default_dtype() { return g_default_dtype; }
void set_default_dtype(DType dtype) { g_default_dtype = dtype; }

DefaultDTypeGuard::DefaultDTypeGuard(DType dtype) : previous_(g_default_dtype) {
  g_default_dtype = dtype;
}
DefaultDTypeGuard::~DefaultDTypeGuard() { g_default_dtype = previous_; }

std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor empty_like_shape(const Shape& shape, DType dtype) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  impl->storage = make_storage(dtype, shape_numel(shape));
  return Tensor(std::move(impl));
}

bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!GradMode::enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

Tensor attach_grad(Tensor out, std::string name, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!needs_grad(inputs)) return out;
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return empty_like_shape(shape, dtype); }

Tensor Tensor::ones(const Shape& shape, DType dtype) { return full(shape, 1.0, dtype); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = empty_like_shape(shape, dtype);
  std::visit([&](auto& v) { std::fill(v.begin(), v.end(), static_cast<typename std::decay_t<decltype(v)>::value_type>(value)); },
             t.impl_->storage);
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  Tensor t = empty_like_shape(shape, dtype);
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::transform(values.begin(), values.end(), v.begin(),
                       [](double x) { return static_cast<T>(x); });
      },
      t.impl_->storage);
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dtype) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

const Shape& Tensor::shape() const { return require(impl_).shape; }

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  const int n = static_cast<int>(s.size());
  const int k = i < 0 ? n + i : i;
  if (k < 0 || k >= n) {
    throw ShapeError("dimension index " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(k)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const { return require(impl_).dtype; }

template <typename T>
std::span<T> Tensor::data() {
  auto& impl = require(impl_);
  if (impl.dtype != dtype_of<T>()) {
    throw std::logic_error(std::string("tensor holds ") + dtype_name(impl.dtype) +
                           ", requested " + dtype_name(dtype_of<T>()));
  }
  auto& v = std::get<std::vector<T>>(impl.storage);
  return {v.data(), v.size()};
}

template <typename T>
std::span<const T> Tensor::data() const {
  const auto& impl = require(impl_);
  if (impl.dtype != dtype_of<T>()) {
    throw std::logic_error(std::string("tensor holds ") + dtype_name(impl.dtype) +
                           ", requested " + dtype_name(dtype_of<T>()));
  }
  const auto& v = std::get<std::vector<T>>(impl.storage);
  return {v.data(), v.size()};
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
  }
  return value(0);
}

double Tensor::value(std::int64_t flat_index) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(flat_index))); },
                    require(impl_).storage);
}

void Tensor::set_value(std::int64_t flat_index, double x) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        v.at(static_cast<std::size_t>(flat_index)) = static_cast<T>(x);
      },
      require(impl_).storage);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    require(impl_).storage);
}

Tensor Tensor::to(DType dtype) const {
  Tensor out = empty_like_shape(shape(), dtype);
  std::visit(
      [&](const auto& src) {
        std::visit(
            [&](auto& dst) {
              using T = typename std::decay_t<decltype(dst)>::value_type;
              std::transform(src.begin(), src.end(), dst.begin(),
                             [](auto x) { return static_cast<T>(x); });
            },
            out.impl_->storage);
      },
      impl_->storage);
  out.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return out;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;
  impl->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::reshape(const Shape& new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  Tensor out = detach();
  out.impl_->shape = new_shape;
  const Shape old_shape = shape();
  return attach_grad(out, "reshape", {*this}, [old_shape](const Tensor& g) {
    return std::vector<Tensor>{g.reshape(old_shape)};
  });
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ShapeError("copy_from shape mismatch: " + shape_str(other.shape()) + " vs " +
                     shape_str(shape()));
  }
  if (other.dtype() == dtype()) {
    impl_->storage = other.impl_->storage;
  } else {
    impl_->storage = other.to(dtype()).impl_->storage;
  }
}

bool Tensor::requires_grad() const { return require(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
  auto& impl = require(impl_);
  if (impl.grad_fn && !enabled) {
    throw std::logic_error("cannot clear requires_grad on a non-leaf tensor; use detach()");
  }
  impl.requires_grad = enabled;
  return *this;
}

bool Tensor::is_leaf() const { return !require(impl_).grad_fn; }

bool Tensor::has_grad() const { return require(impl_).grad.has_value(); }

Tensor Tensor::grad() const {
  const auto& impl = require(impl_);
  if (!impl.grad) return Tensor::zeros(impl.shape, impl.dtype);
  auto g = std::make_shared<TensorImpl>();
  g->shape = impl.shape;
  g->dtype = impl.dtype;
  g->storage = *impl.grad;
  return Tensor(std::move(g));
}

void Tensor::zero_grad() { require(impl_).grad.reset(); }

namespace {

void accumulate_into(Storage& dst, const Tensor& g) {
  std::visit(
      [&](auto& d) {
        using T = typename std::decay_t<decltype(d)>::value_type;
        auto src = g.data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
      },
      dst);
}

Tensor add_same(const Tensor& a, const Tensor& b) {
  Tensor out = a.clone();
  accumulate_into(out.impl()->storage, b);
  return out;
}

}  // namespace

void Tensor::backward() const {
  auto& root = require(impl_);
  if (shape_numel(root.shape) != 1) {
    throw ShapeError("backward() requires a single-element output, got " + shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw std::logic_error("backward() on a tensor that does not participate in autograd");
  }
  NoGradGuard no_grad;

  // Post-order DFS gives a topological order; walking it backwards visits every
  // node once, after all of its consumers.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node_impl, next] = stack.back();
    const auto& fn = node_impl->grad_fn;
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].impl().get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node_impl);
    stack.pop_back();
  }

  std::unordered_map<TensorImpl*, Tensor> pending;
  pending.emplace(impl_.get(), Tensor::ones(root.shape, root.dtype));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    auto found = pending.find(t);
    if (found == pending.end()) continue;
    Tensor g = std::move(found->second);
    pending.erase(found);
    if (!t->grad_fn) {
      if (t->requires_grad) {
        if (t->grad) {
          accumulate_into(*t->grad, g);
        } else {
          t->grad = g.impl()->storage;
        }
      }
      continue;
    }
    auto input_grads = t->grad_fn->backward(g);
    const auto& inputs = t->grad_fn->inputs;
    for (std::size_t i = 0; i < inputs.size() && i < input_grads.size(); ++i) {
      if (!input_grads[i].defined() || !inputs[i].defined() || !inputs[i].requires_grad()) continue;
      if (input_grads[i].shape() != inputs[i].shape()) {
        throw std::logic_error("gradient shape mismatch in node " + t->grad_fn->name + ": " +
                               shape_str(input_grads[i].shape()) + " vs " +
                               shape_str(inputs[i].shape()));
      }
      TensorImpl* key = inputs[i].impl().get();
      auto slot = pending.find(key);
      if (slot == pending.end()) {
        pending.emplace(key, input_grads[i]);
      } else {
        slot->second = add_same(slot->second, input_grads[i]);
      }
    }
  }
}

}  // namespace levit
