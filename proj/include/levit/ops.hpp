#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "levit/tensor.hpp"

namespace levit {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Factories
// ---------------------------------------------------------------------------

Tensor random_normal(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0,
                     DType dtype = default_dtype());
// Normal draws rejected outside two standard deviations.
Tensor truncated_normal(const Shape& shape, std::mt19937_64& rng, double stddev,
                        DType dtype = default_dtype());
Tensor random_uniform(const Shape& shape, std::mt19937_64& rng, double low, double high,
                      DType dtype = default_dtype());

// ---------------------------------------------------------------------------
// Differentiable operations. All record onto the autograd graph when grad mode
// is enabled and an input requires grad.
// ---------------------------------------------------------------------------

/// 2-D cross-correlation on BCHW input. `weight` is (Cout, Cin, kh, kw) and
/// `bias` may be undefined. Output extent is floor((H + 2p - kh) / s) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding);
std::int64_t conv2d_macs(const Shape& input, const Shape& weight, int stride, int padding);

/// Batch normalization over axis 1 of a (B, C, ...) tensor.
///
/// Train mode normalizes with the batch mean and biased variance and updates
/// the running statistics in place: r <- (1 - momentum) r + momentum * batch.
/// Eval mode uses the running statistics and leaves them untouched.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode, double momentum = 0.1,
                  double epsilon = 1e-5);

// Normalizes each (b, spatial) site across the channel axis of a (B, C, ...) tensor.
Tensor layer_norm_channels(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                           double epsilon = 1e-5);

// x * clamp(x + 3, 0, 6) / 6. Gradient is 0 for x <= -3 and 1 for x >= 3.
Tensor hardswish(const Tensor& input);

Tensor softmax_lastdim(const Tensor& input);

/// Batched product over the last two axes: (.., m, k) x (.., k, n). With
/// `transpose_b` the second operand is read as (.., n, k). Leading extents must
/// match, or one operand may be a plain matrix that is broadcast.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
std::int64_t matmul_macs(const Shape& a, const Shape& b, bool transpose_b = false);

// (B, C, H, W) -> (B, C)
Tensor avgpool_global(const Tensor& input);

// Elementwise a + b. `b` may also match a trailing suffix of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Multiplies sample i (leading axis) by factors[i].
Tensor scale_samples(const Tensor& a, std::span<const double> factors);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// x (B, C), weight (K, C), bias (K) or undefined -> (B, K)
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Channels [offset, offset + heads*head_dim) of (B, C, H, W), as (B, heads, H*W, head_dim).
Tensor split_heads(const Tensor& input, std::int64_t channel_offset, std::int64_t heads,
                   std::int64_t head_dim);
// (B, N, H*W, d) -> (B, N*d, H, W)
Tensor merge_heads(const Tensor& input, std::int64_t height, std::int64_t width);

// Keeps sites (stride*i, stride*j); output extent is ceil(H / stride).
Tensor subsample(const Tensor& input, int stride);

// out.flat[i] = source.flat[index[i]]; gradients scatter-add back.
Tensor gather(const Tensor& source, std::vector<std::int64_t> index, const Shape& out_shape);

// Mean negative log-likelihood over the batch for (B, K) logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

double max_abs_diff(const Tensor& a, const Tensor& b);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace levit
