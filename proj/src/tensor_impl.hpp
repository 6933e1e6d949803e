#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "levit/tensor.hpp"

namespace levit {

using Storage = std::variant<std::vector<float>, std::vector<double>>;

// Given d(out), returns d(input_i) for every input; undefined entries mean
// "no gradient flows to this input".
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  Storage storage;
  bool requires_grad = false;
  std::optional<Storage> grad;
  std::shared_ptr<Node> grad_fn;
};

template <typename F>
decltype(auto) dispatch(DType dtype, F&& f) {
  switch (dtype) {
    case DType::F32:
      return f.template operator()<float>();
    case DType::F64:
      return f.template operator()<double>();
  }
  throw std::logic_error("unknown dtype");
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::F32;
  } else {
    return DType::F64;
  }
}

// Allocates an uninitialized-by-contract (zero-filled) result tensor.
Tensor empty_like_shape(const Shape& shape, DType dtype);

// Attaches a graph node to `out` when recording is enabled and any input
// participates in autograd.
Tensor attach_grad(Tensor out, std::string name, std::vector<Tensor> inputs, BackwardFn backward);

bool needs_grad(const std::vector<Tensor>& inputs);

}  // namespace levit
