#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "levit/tensor.hpp"

namespace levit {

// One row of cost accounting. MACs follow the multiply-add convention:
// activations, softmax, bias additions and normalization count zero.
struct CostRecord {
  std::string name;
  std::int64_t macs = 0;
  std::int64_t params = 0;
  Shape out_shape;
};

using CostLog = std::vector<CostRecord>;

}  // namespace levit
