#include "levit/blocks.hpp"

#include <cmath>
#include <string>

#include "levit/fusion.hpp"

namespace levit {

namespace {

Shape with_channels(Shape s, std::int64_t channels) {
  s[1] = channels;
  return s;
}

void append_trainable(StateList& out, const std::string& name, const Tensor& t) {
  if (t.defined()) out.push_back({name, t, true});
}

}  // namespace

Tensor Initializer::weight(const Shape& shape) {
  Tensor w = truncated_normal(shape, rng, weight_std, dtype);
  w.set_requires_grad(true);
  return w;
}

// ---------------------------------------------------------------------------
// BatchNorm / LayerNorm
// ---------------------------------------------------------------------------

BatchNorm BatchNorm::make(std::int64_t channels, double gamma_init, DType dtype) {
  BatchNorm bn;
  bn.gamma = Tensor::full({channels}, gamma_init, dtype).set_requires_grad(true);
  bn.beta = Tensor::zeros({channels}, dtype).set_requires_grad(true);
  bn.running_mean = Tensor::zeros({channels}, dtype);
  bn.running_var = Tensor::ones({channels}, dtype);
  return bn;
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  return batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum, epsilon);
}

void BatchNorm::collect(const std::string& prefix, StateList& out) const {
  out.push_back({prefix + ".weight", gamma, true});
  out.push_back({prefix + ".bias", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

LayerNorm LayerNorm::make(std::int64_t channels, DType dtype) {
  LayerNorm ln;
  ln.gamma = Tensor::ones({channels}, dtype).set_requires_grad(true);
  ln.beta = Tensor::zeros({channels}, dtype).set_requires_grad(true);
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm_channels(x, gamma, beta, epsilon);
}

void LayerNorm::collect(const std::string& prefix, StateList& out) const {
  out.push_back({prefix + ".weight", gamma, true});
  out.push_back({prefix + ".bias", beta, true});
}

// ---------------------------------------------------------------------------
// ConvBn
// ---------------------------------------------------------------------------

ConvBn ConvBn::make(Initializer& init, std::int64_t in_channels, std::int64_t out_channels,
                    int kernel, int stride, int padding, double bn_gamma, bool with_bn) {
  ConvBn c;
  c.weight = init.weight({out_channels, in_channels, kernel, kernel});
  c.stride = stride;
  c.padding = padding;
  if (with_bn) {
    c.bn = BatchNorm::make(out_channels, bn_gamma, init.dtype);
  } else {
    c.bias = Tensor::zeros({out_channels}, init.dtype).set_requires_grad(true);
  }
  return c;
}

Tensor ConvBn::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor y = conv2d(x, weight, bias, stride, padding);
  if (bn) {
    ProfileScope scope(ctx.profiler, Component::Normalization);
    y = bn->forward(y, ctx.mode);
  }
  return y;
}

std::int64_t ConvBn::params() const {
  return weight.numel() + (bias.defined() ? bias.numel() : 0) + (bn ? bn->params() : 0);
}

void ConvBn::fuse() {
  if (!bn) return;
  auto folded = fuse_conv_bn(weight, bias, bn->gamma, bn->beta, bn->running_mean,
                             bn->running_var, bn->epsilon);
  weight = folded.weight.set_requires_grad(true);
  bias = folded.bias.set_requires_grad(true);
  bn.reset();
}

void ConvBn::collect(const std::string& prefix, StateList& out) const {
  append_trainable(out, prefix + ".conv.weight", weight);
  append_trainable(out, prefix + ".conv.bias", bias);
  if (bn) bn->collect(prefix + ".bn", out);
}

Shape ConvBn::account(const std::string& name, const Shape& in, CostLog& log) const {
  Shape out = conv2d_output_shape(in, weight.shape(), stride, padding);
  log.push_back({name + ".conv", conv2d_macs(in, weight.shape(), stride, padding),
                 weight.numel() + (bias.defined() ? bias.numel() : 0), out});
  if (bn) log.push_back({name + ".bn", 0, bn->params(), out});
  return out;
}

// ---------------------------------------------------------------------------
// NormLinear
// ---------------------------------------------------------------------------

NormLinear NormLinear::make(Initializer& init, std::int64_t features, std::int64_t classes) {
  NormLinear h;
  h.bn = BatchNorm::make(features, 1.0, init.dtype);
  h.weight = init.weight({classes, features});
  h.bias = Tensor::zeros({classes}, init.dtype).set_requires_grad(true);
  return h;
}

Tensor NormLinear::forward(const Tensor& x, Mode mode) {
  Tensor y = bn ? bn->forward(x, mode) : x;
  return linear(y, weight, bias);
}

std::int64_t NormLinear::params() const {
  return weight.numel() + bias.numel() + (bn ? bn->params() : 0);
}

void NormLinear::fuse() {
  if (!bn) return;
  auto folded = fuse_bn_linear(bn->gamma, bn->beta, bn->running_mean, bn->running_var,
                               bn->epsilon, weight, bias);
  weight = folded.weight.set_requires_grad(true);
  bias = folded.bias.set_requires_grad(true);
  bn.reset();
}

void NormLinear::collect(const std::string& prefix, StateList& out) const {
  if (bn) bn->collect(prefix + ".bn", out);
  append_trainable(out, prefix + ".linear.weight", weight);
  append_trainable(out, prefix + ".linear.bias", bias);
}

// ---------------------------------------------------------------------------
// drop path
// ---------------------------------------------------------------------------

Tensor drop_path(const Tensor& branch, double p, Mode mode, std::mt19937_64* rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("drop_path: probability must lie in [0, 1), got " +
                                std::to_string(p));
  }
  if (mode == Mode::Eval || p == 0.0) return branch;
  if (!rng) throw std::logic_error("drop_path: train mode with p > 0 needs a random source");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> factors(static_cast<std::size_t>(branch.dim(0)));
  for (auto& f : factors) f = keep(*rng) ? 1.0 / (1.0 - p) : 0.0;
  return scale_samples(branch, factors);
}

// ---------------------------------------------------------------------------
// AttentionBias
// ---------------------------------------------------------------------------

std::pair<std::int64_t, std::int64_t> bias_index(Pixel p, Pixel q, Grid grid) {
  auto inside = [&](Pixel a) {
    return a.x >= 0 && a.x < grid.height && a.y >= 0 && a.y < grid.width;
  };
  if (!inside(p) || !inside(q)) {
    throw std::out_of_range("bias_index: pixel outside the " + std::to_string(grid.height) + "x" +
                            std::to_string(grid.width) + " grid");
  }
  return {std::abs(p.x - q.x), std::abs(p.y - q.y)};
}

AttentionBias::AttentionBias(std::int64_t heads, Grid key_grid, int query_stride, DType dtype)
    : table_(Tensor::zeros({heads, key_grid.height, key_grid.width}, dtype)),
      key_grid_(key_grid),
      query_grid_{(key_grid.height + query_stride - 1) / query_stride,
                  (key_grid.width + query_stride - 1) / query_stride},
      stride_(query_stride) {
  table_.set_requires_grad(true);
  const std::int64_t per_head = key_grid.tokens();
  index_.reserve(static_cast<std::size_t>(heads * query_grid_.tokens() * key_grid.tokens()));
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t qi = 0; qi < query_grid_.height; ++qi)
      for (std::int64_t qj = 0; qj < query_grid_.width; ++qj)
        for (std::int64_t ki = 0; ki < key_grid.height; ++ki)
          for (std::int64_t kj = 0; kj < key_grid.width; ++kj) {
            const auto [dx, dy] =
                bias_index({qi * query_stride, qj * query_stride}, {ki, kj}, key_grid);
            index_.push_back(h * per_head + dx * key_grid.width + dy);
          }
}

Tensor AttentionBias::expanded() const {
  return gather(table_, index_, {heads(), query_grid_.tokens(), key_grid_.tokens()});
}

double AttentionBias::lookup(std::int64_t head, Pixel query, Pixel key) const {
  const auto [dx, dy] = bias_index({query.x * stride_, query.y * stride_}, key, key_grid_);
  return table_.value((head * key_grid_.height + dx) * key_grid_.width + dy);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

Attention::Attention(const AttentionConfig& config, Initializer& init) : config_(config) {
  const auto& c = config_;
  if (c.heads <= 0 || c.key_dim <= 0 || c.value_dim <= 0 || c.in_channels <= 0 ||
      c.out_channels <= 0) {
    throw ConfigError("attention: heads, key_dim, value_dim and channels must be positive");
  }
  if (c.stride == 1 && c.in_channels != c.out_channels) {
    throw ConfigError("attention: residual block must preserve channels");
  }
  const bool bn = c.norm == NormKind::BatchNorm;
  // Residual branches end in a zero-initialized BN gamma.
  const double proj_gamma = c.stride == 1 ? 0.0 : 1.0;
  if (!bn) norm_ = LayerNorm::make(c.in_channels, init.dtype);
  q_ = ConvBn::make(init, c.in_channels, c.heads * c.key_dim, 1, 1, 0, 1.0, bn);
  k_ = ConvBn::make(init, c.in_channels, c.heads * c.key_dim, 1, 1, 0, 1.0, bn);
  v_ = ConvBn::make(init, c.in_channels, c.heads * c.value_dim, 1, 1, 0, 1.0, bn);
  proj_ = ConvBn::make(init, c.heads * c.value_dim, c.out_channels, 1, 1, 0, proj_gamma, bn);
  if (c.attention_bias) bias_.emplace(c.heads, c.grid, c.stride, init.dtype);
}

Attention::Heads Attention::project(const Tensor& x, ForwardContext& ctx) {
  const auto& c = config_;
  if (x.ndim() != 4 || x.dim(1) != c.in_channels) {
    throw ShapeError("attention: expected (B, " + std::to_string(c.in_channels) + ", H, W), got " +
                     shape_str(x.shape()));
  }
  if (x.dim(2) != c.grid.height || x.dim(3) != c.grid.width) {
    throw ConfigError("attention: input grid " + std::to_string(x.dim(2)) + "x" +
                      std::to_string(x.dim(3)) + " does not match the configured " +
                      std::to_string(c.grid.height) + "x" + std::to_string(c.grid.width));
  }
  Tensor xn = x;
  if (norm_) {
    ProfileScope scope(ctx.profiler, Component::Normalization);
    xn = norm_->forward(x);
  }
  Heads h;
  {
    ProfileScope scope(ctx.profiler, Component::KeysQK);
    Tensor xq = c.stride > 1 ? subsample(xn, c.stride) : xn;
    h.query_grid = {xq.dim(2), xq.dim(3)};
    h.q = split_heads(q_.forward(xq, ctx), 0, c.heads, c.key_dim);
    h.k = split_heads(k_.forward(xn, ctx), 0, c.heads, c.key_dim);
  }
  {
    ProfileScope scope(ctx.profiler, Component::ValuesV);
    h.v = split_heads(v_.forward(xn, ctx), 0, c.heads, c.value_dim);
  }
  return h;
}

Tensor Attention::weights(const Heads& h, ForwardContext& ctx) {
  ProfileScope scope(ctx.profiler, Component::ProductQKt);
  Tensor logits = scale(matmul(h.q, h.k, /*transpose_b=*/true),
                        1.0 / std::sqrt(static_cast<double>(config_.key_dim)));
  if (bias_) logits = add(logits, bias_->expanded());
  return softmax_lastdim(logits);
}

Tensor Attention::attention_weights(const Tensor& x, ForwardContext& ctx) {
  return weights(project(x, ctx), ctx);
}

Tensor Attention::branch(const Tensor& x, ForwardContext& ctx) {
  Heads h = project(x, ctx);
  Tensor attn = weights(h, ctx);
  Tensor merged;
  {
    ProfileScope scope(ctx.profiler, Component::ProductAV);
    Tensor context = matmul(attn, h.v);
    if (config_.activation) context = hardswish(context);
    merged = merge_heads(context, h.query_grid.height, h.query_grid.width);
  }
  ProfileScope scope(ctx.profiler, Component::AttentionProjection);
  return proj_.forward(merged, ctx);
}

Tensor Attention::forward(const Tensor& x, ForwardContext& ctx) {
  Tensor y = branch(x, ctx);
  if (!residual()) return y;
  ProfileScope scope(ctx.profiler, Component::AttentionProjection);
  return add(x, drop_path(y, config_.drop_path, ctx.mode, ctx.rng));
}

void Attention::collect(const std::string& prefix, StateList& out) const {
  if (norm_) norm_->collect(prefix + ".norm", out);
  q_.collect(prefix + ".q", out);
  k_.collect(prefix + ".k", out);
  v_.collect(prefix + ".v", out);
  if (bias_) out.push_back({prefix + ".attention_bias", bias_->table(), true});
  proj_.collect(prefix + ".proj", out);
}

Shape Attention::account(const std::string& name, const Shape& in, CostLog& log) const {
  const auto& c = config_;
  if (norm_) log.push_back({name + ".norm", 0, norm_->params(), in});
  Shape q_in = in;
  q_in[2] = (in[2] + c.stride - 1) / c.stride;
  q_in[3] = (in[3] + c.stride - 1) / c.stride;
  q_.account(name + ".q", q_in, log);
  k_.account(name + ".k", in, log);
  v_.account(name + ".v", in, log);
  const std::int64_t batch = in[0];
  const std::int64_t tq = q_in[2] * q_in[3], tk = in[2] * in[3];
  log.push_back({name + ".qk", batch * c.heads * tq * tk * c.key_dim, 0,
                 {batch, c.heads, tq, tk}});
  if (bias_) {
    log.push_back({name + ".attention_bias", 0, bias_->table().numel(), {batch, c.heads, tq, tk}});
  }
  log.push_back({name + ".av", batch * c.heads * tq * tk * c.value_dim, 0,
                 {batch, c.heads, tq, c.value_dim}});
  return proj_.account(name + ".proj", with_channels(q_in, c.heads * c.value_dim), log);
}

void Attention::fuse() {
  q_.fuse();
  k_.fuse();
  v_.fuse();
  proj_.fuse();
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp::Mlp(const MlpConfig& config, Initializer& init) : config_(config) {
  if (config.channels <= 0 || config.hidden <= 0) {
    throw ConfigError("mlp: channels and hidden width must be positive");
  }
  const bool bn = config.norm == NormKind::BatchNorm;
  if (!bn) norm_ = LayerNorm::make(config.channels, init.dtype);
  fc1_ = ConvBn::make(init, config.channels, config.hidden, 1, 1, 0, 1.0, bn);
  fc2_ = ConvBn::make(init, config.hidden, config.channels, 1, 1, 0, 0.0, bn);
}

Tensor Mlp::branch(const Tensor& x, ForwardContext& ctx) {
  if (x.ndim() != 4 || x.dim(1) != config_.channels) {
    throw ShapeError("mlp: expected (B, " + std::to_string(config_.channels) + ", H, W), got " +
                     shape_str(x.shape()));
  }
  Tensor xn = x;
  if (norm_) {
    ProfileScope scope(ctx.profiler, Component::Normalization);
    xn = norm_->forward(x);
  }
  return fc2_.forward(hardswish(fc1_.forward(xn, ctx)), ctx);
}

Tensor Mlp::forward(const Tensor& x, ForwardContext& ctx) {
  ProfileScope scope(ctx.profiler, Component::Mlp);
  Tensor y = branch(x, ctx);
  return add(x, drop_path(y, config_.drop_path, ctx.mode, ctx.rng));
}

void Mlp::collect(const std::string& prefix, StateList& out) const {
  if (norm_) norm_->collect(prefix + ".norm", out);
  fc1_.collect(prefix + ".fc1", out);
  fc2_.collect(prefix + ".fc2", out);
}

Shape Mlp::account(const std::string& name, const Shape& in, CostLog& log) const {
  if (norm_) log.push_back({name + ".norm", 0, norm_->params(), in});
  Shape hidden = fc1_.account(name + ".fc1", in, log);
  return fc2_.account(name + ".fc2", hidden, log);
}

void Mlp::fuse() {
  fc1_.fuse();
  fc2_.fuse();
}

// ---------------------------------------------------------------------------
// PatchEmbed
// ---------------------------------------------------------------------------

PatchEmbed::PatchEmbed(const std::vector<std::int64_t>& channels, bool single_conv,
                       Initializer& init) {
  if (single_conv) {
    if (channels.size() != 2) throw ConfigError("patch embed: single conv takes (3, C)");
    layers_.push_back(ConvBn::make(init, channels[0], channels[1], 16, 16, 0, 1.0));
    return;
  }
  if (channels.size() != 5) {
    throw ConfigError("patch embed: expected 5 channel entries (3, c1, c2, c3, C), got " +
                      std::to_string(channels.size()));
  }
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    layers_.push_back(ConvBn::make(init, channels[i], channels[i + 1], 3, 2, 1, 1.0));
  }
}

Tensor PatchEmbed::forward(const Tensor& x, ForwardContext& ctx) {
  if (x.ndim() != 4 || x.dim(1) != layers_.front().weight.dim(1)) {
    throw ShapeError("patch embed: expected (B, 3, H, W) images, got " + shape_str(x.shape()));
  }
  if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw ShapeError("patch embed: image extents must be divisible by 16, got " +
                     shape_str(x.shape()));
  }
  Tensor y = x;
  for (auto& layer : layers_) y = hardswish(layer.forward(y, ctx));
  return y;
}

void PatchEmbed::collect(const std::string& prefix, StateList& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(prefix + "." + std::to_string(i), out);
  }
}

Shape PatchEmbed::account(const std::string& name, const Shape& in, CostLog& log) const {
  Shape s = in;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    s = layers_[i].account(name + "." + std::to_string(i), s, log);
  }
  return s;
}

void PatchEmbed::fuse() {
  for (auto& layer : layers_) layer.fuse();
}

// ---------------------------------------------------------------------------
// PositionalEmbedding
// ---------------------------------------------------------------------------

PositionalEmbedding::PositionalEmbedding(std::int64_t channels, Grid grid, Initializer& init)
    : embedding_(init.weight({channels, grid.height, grid.width})) {}

Tensor PositionalEmbedding::forward(const Tensor& x, ForwardContext&) {
  return add(x, embedding_);
}

void PositionalEmbedding::collect(const std::string& prefix, StateList& out) const {
  out.push_back({prefix + ".embedding", embedding_, true});
}

Shape PositionalEmbedding::account(const std::string& name, const Shape& in, CostLog& log) const {
  log.push_back({name, 0, embedding_.numel(), in});
  return in;
}

// ---------------------------------------------------------------------------
// Head
// ---------------------------------------------------------------------------

Head::Head(std::int64_t features, std::int64_t classes, int count, Initializer& init) {
  if (count < 1 || count > 2) throw ConfigError("head: one or two classifiers supported");
  for (int i = 0; i < count; ++i) heads_.push_back(NormLinear::make(init, features, classes));
}

std::vector<Tensor> Head::forward(const Tensor& features, Mode mode) {
  Tensor pooled = features.ndim() == 2 ? features : avgpool_global(features);
  std::vector<Tensor> out;
  out.reserve(heads_.size());
  for (auto& h : heads_) out.push_back(h.forward(pooled, mode));
  return out;
}

Tensor Head::average(const std::vector<Tensor>& logits) {
  if (logits.size() == 1) return logits.front();
  Tensor total = logits.front();
  for (std::size_t i = 1; i < logits.size(); ++i) total = add(total, logits[i]);
  return scale(total, 1.0 / static_cast<double>(logits.size()));
}

void Head::collect(const std::string& prefix, StateList& out) const {
  static const char* names[] = {"head", "head_dist"};
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    heads_[i].collect(prefix + "." + names[i], out);
  }
}

Shape Head::account(const std::string& name, const Shape& in, CostLog& log) const {
  static const char* names[] = {"head", "head_dist"};
  const Shape pooled{in[0], in[1]};
  log.push_back({name + ".pool", 0, 0, pooled});
  Shape out;
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const auto& h = heads_[i];
    out = {in[0], h.weight.dim(0)};
    if (h.bn) log.push_back({name + "." + names[i] + ".bn", 0, h.bn->params(), pooled});
    log.push_back({name + "." + names[i] + ".linear", in[0] * h.weight.numel(),
                   h.weight.numel() + h.bias.numel(), out});
  }
  return out;
}

void Head::fuse() {
  for (auto& h : heads_) h.fuse();
}

}  // namespace levit
