#pragma once

#include <stdexcept>
#include <string>

#include "levit/model.hpp"
#include "levit/tensor.hpp"

namespace levit {

struct FoldedAffine {
  Tensor weight;
  Tensor bias;
};

/// Folds an inference-mode BN that follows a convolution into the convolution:
/// W' = W * g / sqrt(v + eps) per output channel, b' = beta + (b - mu) g / sqrt(v + eps).
/// `bias` may be undefined (treated as zero). Arithmetic is done in double.
FoldedAffine fuse_conv_bn(const Tensor& weight, const Tensor& bias, const Tensor& gamma,
                          const Tensor& beta, const Tensor& mean, const Tensor& var,
                          double epsilon);

// Folds a BN over features that precedes a linear map (K, C) into that map.
FoldedAffine fuse_bn_linear(const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                            const Tensor& var, double epsilon, const Tensor& weight,
                            const Tensor& bias);

struct FusionResult {
  Model model;
  bool already_fused = false;  // input was fused; the result is an unchanged copy
};

// Copy of `model` with every BN folded away. Rejects models in train mode.
FusionResult fuse_model(const Model& model);

// ---------------------------------------------------------------------------
// Weight archive
//
// Little-endian layout:
//   "LEVITWA\0" | u32 version | u32 flags (bit 0: fused)
//   u64 spec length | spec JSON bytes
//   u64 entry count | entries
// entry: u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 ndim | u64 dims...
//        | u64 byte length | raw element bytes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kArchiveVersion = 1;

class ArchiveError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, UnsupportedVersion, Truncated, Corrupt, ShapeMismatch };
  ArchiveError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void save_weights(const Model& model, const std::string& path);
// Rebuilds the model from the embedded spec and restores every tensor bit-exactly.
Model load_weights(const std::string& path);
// As above, and additionally checks every entry's shape against `expected`.
Model load_weights(const std::string& path, const ModelSpec& expected);

}  // namespace levit
