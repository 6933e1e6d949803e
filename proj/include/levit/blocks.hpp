#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "levit/cost.hpp"
#include "levit/ops.hpp"
#include "levit/profiler.hpp"
#include "levit/tensor.hpp"

namespace levit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ForwardContext {
  Mode mode = Mode::Eval;
  // Drop-path sampling source; required in train mode when p > 0.
  std::mt19937_64* rng = nullptr;
  Profiler* profiler = nullptr;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using StateList = std::vector<NamedTensor>;

// Spatial extents (height, width) of an activation map.
struct Grid {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t tokens() const { return height * width; }
  bool operator==(const Grid&) const = default;
};

struct Pixel {
  std::int64_t x = 0;  // row, in [0, height)
  std::int64_t y = 0;  // column, in [0, width)
};

// Parameter initialization source shared by every block constructor.
struct Initializer {
  std::mt19937_64 rng;
  DType dtype = DType::F32;
  double weight_std = 0.02;
  Tensor weight(const Shape& shape);
};

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNorm make(std::int64_t channels, double gamma_init, DType dtype);
  Tensor forward(const Tensor& x, Mode mode);
  std::int64_t params() const { return gamma.numel() + beta.numel(); }
  void collect(const std::string& prefix, StateList& out) const;
};

struct LayerNorm {
  Tensor gamma, beta;
  double epsilon = 1e-5;

  static LayerNorm make(std::int64_t channels, DType dtype);
  Tensor forward(const Tensor& x) const;
  std::int64_t params() const { return gamma.numel() + beta.numel(); }
  void collect(const std::string& prefix, StateList& out) const;
};

/// Convolution followed by batch normalization. Fusion folds the BN into the
/// convolution weights and a bias, and removes the BN.
struct ConvBn {
  Tensor weight;                // (Cout, Cin, k, k)
  Tensor bias;                  // present after fusion or when built without BN
  std::optional<BatchNorm> bn;
  int stride = 1;
  int padding = 0;

  static ConvBn make(Initializer& init, std::int64_t in_channels, std::int64_t out_channels,
                     int kernel, int stride, int padding, double bn_gamma, bool with_bn = true);

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t params() const;
  void fuse();
  void collect(const std::string& prefix, StateList& out) const;
  // Appends conv (and BN) records; returns the output shape.
  Shape account(const std::string& name, const Shape& in, CostLog& log) const;
};

// BN over features followed by a linear map; one classifier head.
struct NormLinear {
  std::optional<BatchNorm> bn;
  Tensor weight;  // (K, C)
  Tensor bias;    // (K)

  static NormLinear make(Initializer& init, std::int64_t features, std::int64_t classes);
  Tensor forward(const Tensor& x, Mode mode);
  std::int64_t params() const;
  void fuse();
  void collect(const std::string& prefix, StateList& out) const;
};

/// Identity in eval mode or for p = 0. In train mode each sample's branch is
/// kept with probability 1 - p and rescaled by 1 / (1 - p).
Tensor drop_path(const Tensor& branch, double p, Mode mode, std::mt19937_64* rng);

// ---------------------------------------------------------------------------
// Attention bias
// ---------------------------------------------------------------------------

/// Offset (|x - x'|, |y - y'|) between two pixels of a grid.
std::pair<std::int64_t, std::int64_t> bias_index(Pixel p, Pixel q, Grid grid);

/// Per-head learnable table over absolute pixel offsets of `key_grid`.
/// Queries sit at (stride*i, stride*j) of the key grid, so stride 2 serves the
/// shrinking block.
class AttentionBias {
 public:
  AttentionBias(std::int64_t heads, Grid key_grid, int query_stride, DType dtype);

  std::int64_t heads() const { return table_.dim(0); }
  Grid key_grid() const { return key_grid_; }
  Grid query_grid() const { return query_grid_; }
  int query_stride() const { return stride_; }

  Tensor& table() { return table_; }
  const Tensor& table() const { return table_; }

  // Flat table index feeding logit (head, query, key).
  const std::vector<std::int64_t>& index() const { return index_; }

  // (heads, query_tokens, key_tokens), differentiable w.r.t. the table.
  Tensor expanded() const;
  double lookup(std::int64_t head, Pixel query, Pixel key) const;

 private:
  Tensor table_;  // (heads, H, W)
  Grid key_grid_;
  Grid query_grid_;
  int stride_;
  std::vector<std::int64_t> index_;
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

enum class NormKind { BatchNorm, LayerNorm };

class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, ForwardContext& ctx) = 0;
  virtual void collect(const std::string& prefix, StateList& out) const = 0;
  virtual Shape account(const std::string& name, const Shape& in, CostLog& log) const = 0;
  virtual void fuse() = 0;
  // Is this a residual block whose branch can be zeroed?
  virtual bool residual() const = 0;
  // Residual branches only; others ignore it.
  virtual void set_drop_path(double) {}
};

struct AttentionConfig {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t heads = 0;
  std::int64_t key_dim = 0;
  std::int64_t value_dim = 0;  // per head
  Grid grid;                   // input grid
  int stride = 1;              // 2 for the shrinking block
  bool attention_bias = true;
  bool activation = true;      // Hardswish on the per-head context
  NormKind norm = NormKind::BatchNorm;
  double drop_path = 0.0;
};

/// Multi-head attention on BCHW maps with the offset-indexed logit bias.
///
/// stride 1: residual block, C -> C. stride 2: shrinking block with queries on
/// the subsampled grid, C -> C', no residual.
class Attention final : public Module {
 public:
  Attention(const AttentionConfig& config, Initializer& init);

  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  // Output before the residual add (equal to forward() for shrinking blocks).
  Tensor branch(const Tensor& x, ForwardContext& ctx);
  // Softmax weights (B, heads, Tq, Tk) for inspection.
  Tensor attention_weights(const Tensor& x, ForwardContext& ctx);

  void collect(const std::string& prefix, StateList& out) const override;
  Shape account(const std::string& name, const Shape& in, CostLog& log) const override;
  void fuse() override;
  bool residual() const override { return config_.stride == 1; }
  void set_drop_path(double p) override {
    if (residual()) config_.drop_path = p;
  }

  const AttentionConfig& config() const { return config_; }
  AttentionBias* bias() { return bias_ ? &*bias_ : nullptr; }
  const AttentionBias* bias() const { return bias_ ? &*bias_ : nullptr; }
  ConvBn& q() { return q_; }
  ConvBn& k() { return k_; }
  ConvBn& v() { return v_; }
  ConvBn& proj() { return proj_; }

 private:
  struct Heads {
    Tensor q, k, v;  // (B, N, T, d)
    Grid query_grid;
  };
  Heads project(const Tensor& x, ForwardContext& ctx);
  Tensor weights(const Heads& h, ForwardContext& ctx);

  AttentionConfig config_;
  std::optional<LayerNorm> norm_;
  ConvBn q_, k_, v_, proj_;
  std::optional<AttentionBias> bias_;
};

struct MlpConfig {
  std::int64_t channels = 0;
  std::int64_t hidden = 0;
  NormKind norm = NormKind::BatchNorm;
  double drop_path = 0.0;
};

/// Residual pointwise MLP: x + conv1x1 -> BN -> Hardswish -> conv1x1 -> BN.
class Mlp final : public Module {
 public:
  Mlp(const MlpConfig& config, Initializer& init);

  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor branch(const Tensor& x, ForwardContext& ctx);
  void collect(const std::string& prefix, StateList& out) const override;
  Shape account(const std::string& name, const Shape& in, CostLog& log) const override;
  void fuse() override;
  bool residual() const override { return true; }
  void set_drop_path(double p) override { config_.drop_path = p; }

  const MlpConfig& config() const { return config_; }
  ConvBn& fc1() { return fc1_; }
  ConvBn& fc2() { return fc2_; }

 private:
  MlpConfig config_;
  std::optional<LayerNorm> norm_;
  ConvBn fc1_, fc2_;
};

/// Convolutional stem: 3x3 stride-2 conv + BN + Hardswish, repeated so the map
/// shrinks by 16 (or a single 16x16 stride-16 conv for the ablation).
class PatchEmbed final : public Module {
 public:
  // channels: (3, c1, ..., C). With `single_conv` only (3, C).
  PatchEmbed(const std::vector<std::int64_t>& channels, bool single_conv, Initializer& init);

  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  void collect(const std::string& prefix, StateList& out) const override;
  Shape account(const std::string& name, const Shape& in, CostLog& log) const override;
  void fuse() override;
  bool residual() const override { return false; }

  std::vector<ConvBn>& layers() { return layers_; }

 private:
  std::vector<ConvBn> layers_;
};

// Learnable absolute position map added once after the stem (ablation A5).
class PositionalEmbedding final : public Module {
 public:
  PositionalEmbedding(std::int64_t channels, Grid grid, Initializer& init);

  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  void collect(const std::string& prefix, StateList& out) const override;
  Shape account(const std::string& name, const Shape& in, CostLog& log) const override;
  void fuse() override {}
  bool residual() const override { return false; }

 private:
  Tensor embedding_;  // (C, H, W)
};

/// Global average pool followed by one or two independent classifiers
/// (classification and distillation).
class Head {
 public:
  Head(std::int64_t features, std::int64_t classes, int count, Initializer& init);

  // One logit tensor per classifier, from (B, C, H, W) maps or pooled (B, C).
  std::vector<Tensor> forward(const Tensor& features, Mode mode);
  // Mean of the classifiers' logits.
  static Tensor average(const std::vector<Tensor>& logits);

  void collect(const std::string& prefix, StateList& out) const;
  Shape account(const std::string& name, const Shape& in, CostLog& log) const;
  void fuse();
  int count() const { return static_cast<int>(heads_.size()); }
  std::int64_t params_per_head() const { return heads_.front().params(); }
  std::vector<NormLinear>& classifiers() { return heads_; }

 private:
  std::vector<NormLinear> heads_;
};

}  // namespace levit
