#include "levit/model.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace levit {

namespace {

std::string grid_str(Grid g) { return std::to_string(g.height) + "x" + std::to_string(g.width); }

[[noreturn]] void config_fail(const std::string& field, const std::string& message) {
  throw ConfigError(field + ": " + message);
}

// The five family members share one layout: three stages, shrinks with heads C/D.
ModelSpec pyramid(const std::string& name, std::int64_t key_dim,
                  const std::array<std::int64_t, 3>& channels,
                  const std::array<std::int64_t, 3>& heads, const std::array<int, 3>& depth,
                  double drop_path) {
  ModelSpec s;
  s.name = name;
  const auto c0 = channels[0];
  s.embed_channels = {3, c0 / 8, c0 / 4, c0 / 2, c0};
  const auto grids = stage_grids(s.image_size, 3);
  for (int i = 0; i < 3; ++i) {
    s.stages.push_back({depth[i], channels[i], heads[i], key_dim, 2, grids[i]});
  }
  for (int i = 0; i < 2; ++i) {
    s.subsamples.push_back({channels[i] / key_dim, key_dim, 4, channels[i], channels[i + 1]});
  }
  s.drop_path = drop_path;
  return s;
}

ModelSpec straight_stack() {
  ModelSpec s;
  s.name = "A1-straight";
  s.embed_channels = {3, 114 / 8, 114 / 4, 114 / 2, 114};
  s.stages.push_back({11, 114, 3, 19, 2, stage_grids(s.image_size, 1)[0]});
  return s;
}

ModelSpec classic_blocks() {
  ModelSpec s;
  s.name = "A6-classic-blocks";
  s.embed_channels = {3, 120 / 8, 120 / 4, 120 / 2, 120};
  const auto grids = stage_grids(s.image_size, 3);
  const std::int64_t channels[] = {120, 180, 240}, heads[] = {4, 6, 8};
  const int depth[] = {2, 3, 4};
  for (int i = 0; i < 3; ++i) s.stages.push_back({depth[i], channels[i], heads[i], 30, 1, grids[i]});
  for (int i = 0; i < 2; ++i) {
    s.subsamples.push_back({4 * channels[i] / 30, 30, 1, channels[i], channels[i + 1]});
  }
  s.mlp_ratio = 4;
  return s;
}

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

std::vector<Grid> stage_grids(std::int64_t image_size, std::size_t stages) {
  std::vector<Grid> grids;
  std::int64_t extent = image_size / 16;
  for (std::size_t i = 0; i < stages; ++i) {
    grids.push_back({extent, extent});
    extent = (extent + 1) / 2;
  }
  return grids;
}

ModelSpec with_image_size(ModelSpec spec, std::int64_t image_size) {
  spec.image_size = image_size;
  const auto grids = stage_grids(image_size, spec.stages.size());
  for (std::size_t i = 0; i < spec.stages.size(); ++i) spec.stages[i].grid = grids[i];
  return spec;
}

void ModelSpec::validate() const {
  if (image_size <= 0 || image_size % 16 != 0) {
    config_fail("image_size", "must be a positive multiple of 16, got " + std::to_string(image_size));
  }
  if (stages.empty()) config_fail("stages", "at least one stage is required");
  if (subsamples.size() + 1 != stages.size()) {
    config_fail("subsamples", "expected " + std::to_string(stages.size() - 1) +
                                  " entries (one between each pair of stages), got " +
                                  std::to_string(subsamples.size()));
  }
  const std::size_t want_embed = patch_embed == PatchEmbedKind::Conv4 ? 5 : 2;
  if (embed_channels.size() != want_embed) {
    config_fail("embed_channels", "expected " + std::to_string(want_embed) + " entries, got " +
                                      std::to_string(embed_channels.size()));
  }
  if (embed_channels.front() != 3) config_fail("embed_channels", "must start with 3 (RGB)");
  for (auto c : embed_channels) {
    if (c <= 0) config_fail("embed_channels", "entries must be positive");
  }
  if (embed_channels.back() != stages.front().channels) {
    config_fail("embed_channels", "must end at stage-1 channels " +
                                      std::to_string(stages.front().channels));
  }
  const auto grids = stage_grids(image_size, stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const std::string f = "stages[" + std::to_string(i) + "]";
    if (st.depth < 1) config_fail(f + ".depth", "must be at least 1");
    if (st.channels <= 0) config_fail(f + ".channels", "must be positive");
    if (st.heads <= 0) config_fail(f + ".heads", "must be positive");
    if (st.key_dim <= 0) config_fail(f + ".key_dim", "must be positive");
    if (st.value_ratio <= 0) config_fail(f + ".value_ratio", "must be positive");
    if (!(st.grid == grids[i])) {
      config_fail(f + ".grid", "expected " + grid_str(grids[i]) + " for " +
                                   std::to_string(image_size) + " input, got " +
                                   grid_str(st.grid));
    }
  }
  for (std::size_t i = 0; i < subsamples.size(); ++i) {
    const auto& sub = subsamples[i];
    const std::string f = "subsamples[" + std::to_string(i) + "]";
    if (sub.source_channels != stages[i].channels) {
      config_fail(f + ".source_channels",
                  "must equal stages[" + std::to_string(i) + "].channels " +
                      std::to_string(stages[i].channels));
    }
    if (sub.target_channels != stages[i + 1].channels) {
      config_fail(f + ".target_channels",
                  "must equal stages[" + std::to_string(i + 1) + "].channels " +
                      std::to_string(stages[i + 1].channels));
    }
    if (sub.target_channels <= sub.source_channels) {
      config_fail(f + ".target_channels", "must exceed source_channels");
    }
    if (sub.key_dim <= 0 || sub.value_ratio <= 0) {
      config_fail(f + ".key_dim", "key_dim and value_ratio must be positive");
    }
    if (sub.heads <= 0) config_fail(f + ".heads", "must be positive");
  }
  if (!(drop_path >= 0.0 && drop_path < 1.0)) config_fail("drop_path", "must lie in [0, 1)");
  if (num_classes < 1) config_fail("num_classes", "must be at least 1");
  if (mlp_ratio < 1) config_fail("mlp_ratio", "must be at least 1");
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"LeViT-128S", "LeViT-128", "LeViT-192",
                                                 "LeViT-256",  "LeViT-384", "A1-straight",
                                                 "A6-classic-blocks"};
  return names;
}

ModelSpec preset(const std::string& name) {
  if (name == "LeViT-128S") return pyramid(name, 16, {128, 256, 384}, {4, 6, 8}, {2, 3, 4}, 0.0);
  if (name == "LeViT-128") return pyramid(name, 16, {128, 256, 384}, {4, 8, 12}, {4, 4, 4}, 0.0);
  if (name == "LeViT-192") return pyramid(name, 32, {192, 288, 384}, {3, 5, 6}, {4, 4, 4}, 0.0);
  if (name == "LeViT-256") return pyramid(name, 32, {256, 384, 512}, {4, 6, 8}, {4, 4, 4}, 0.0);
  if (name == "LeViT-384") {
    // The 384 model uses 18 heads in its second shrink, not 512 / 32 = 16.
    ModelSpec s = pyramid(name, 32, {384, 512, 768}, {6, 9, 12}, {4, 4, 4}, 0.1);
    s.subsamples[1].heads = 18;
    return s;
  }
  if (name == "A1-straight") return straight_stack();
  if (name == "A6-classic-blocks") return classic_blocks();
  throw ConfigError("unknown preset '" + name + "'; known presets: " + join(preset_names()) +
                    "; ablations: " + join(ablation_names()));
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"A2", "A3", "A4", "A5", "A7"};
  return names;
}

ModelSpec ablation(const std::string& code) {
  ModelSpec s = preset("LeViT-128S");
  s.name = "LeViT-128S-" + code;
  if (code == "A2") {
    s.patch_embed = PatchEmbedKind::Single16;
    s.embed_channels = {3, s.stages.front().channels};
  } else if (code == "A3") {
    s.norm = NormKind::LayerNorm;
  } else if (code == "A4") {
    s.distillation = false;
  } else if (code == "A5") {
    s.position = PositionKind::AbsoluteEmbedding;
  } else if (code == "A7") {
    s.attention_activation = false;
  } else {
    throw ConfigError("unknown ablation '" + code + "'; known: " + join(ablation_names()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json spec_to_json(const ModelSpec& spec) {
  using nlohmann::json;
  json stages = json::array();
  for (const auto& st : spec.stages) {
    stages.push_back({{"depth", st.depth},
                      {"channels", st.channels},
                      {"heads", st.heads},
                      {"key_dim", st.key_dim},
                      {"value_ratio", st.value_ratio},
                      {"grid", {st.grid.height, st.grid.width}}});
  }
  json subs = json::array();
  for (const auto& sub : spec.subsamples) {
    subs.push_back({{"heads", sub.heads},
                    {"key_dim", sub.key_dim},
                    {"value_ratio", sub.value_ratio},
                    {"source_channels", sub.source_channels},
                    {"target_channels", sub.target_channels}});
  }
  return {{"name", spec.name},
          {"image_size", spec.image_size},
          {"patch_embed", spec.patch_embed == PatchEmbedKind::Conv4 ? "conv4" : "single16"},
          {"embed_channels", spec.embed_channels},
          {"stages", stages},
          {"subsamples", subs},
          {"drop_path", spec.drop_path},
          {"num_classes", spec.num_classes},
          {"mlp_ratio", spec.mlp_ratio},
          {"norm", spec.norm == NormKind::BatchNorm ? "batch" : "layer"},
          {"distillation", spec.distillation},
          {"position", spec.position == PositionKind::AttentionBias ? "attention_bias" : "absolute"},
          {"attention_activation", spec.attention_activation}};
}

namespace {

template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) config_fail(where + key, "missing");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    config_fail(where + key, std::string("wrong type (") + e.what() + ")");
  }
}

template <typename T>
void optional_field(const nlohmann::json& j, const std::string& key, const std::string& where,
                    T& out) {
  if (j.contains(key)) out = field<T>(j, key, where);
}

std::string choice(const nlohmann::json& j, const std::string& key,
                   const std::vector<std::string>& allowed, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = field<std::string>(j, key, "");
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
    config_fail(key, "expected one of " + join(allowed) + ", got '" + v + "'");
  }
  return v;
}

// Fields that may override a preset or complete a full description.
void apply_common(const nlohmann::json& j, ModelSpec& s) {
  optional_field(j, "name", "", s.name);
  optional_field(j, "drop_path", "", s.drop_path);
  optional_field(j, "num_classes", "", s.num_classes);
  optional_field(j, "mlp_ratio", "", s.mlp_ratio);
  optional_field(j, "distillation", "", s.distillation);
  optional_field(j, "attention_activation", "", s.attention_activation);
  s.norm = choice(j, "norm", {"batch", "layer"}, s.norm == NormKind::BatchNorm ? "batch" : "layer") ==
                   "batch"
               ? NormKind::BatchNorm
               : NormKind::LayerNorm;
  s.position = choice(j, "position", {"attention_bias", "absolute"},
                      s.position == PositionKind::AttentionBias ? "attention_bias" : "absolute") ==
                       "attention_bias"
                   ? PositionKind::AttentionBias
                   : PositionKind::AbsoluteEmbedding;
}

}  // namespace

ModelSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model spec must be a JSON object");
  ModelSpec s;
  if (j.contains("preset")) {
    const auto name = field<std::string>(j, "preset", "");
    const auto& codes = ablation_names();
    s = std::find(codes.begin(), codes.end(), name) != codes.end() ? ablation(name) : preset(name);
    if (j.contains("image_size")) s = with_image_size(s, field<std::int64_t>(j, "image_size", ""));
    apply_common(j, s);
    s.validate();
    return s;
  }

  s.image_size = field<std::int64_t>(j, "image_size", "");
  s.patch_embed = choice(j, "patch_embed", {"conv4", "single16"}, "conv4") == "conv4"
                      ? PatchEmbedKind::Conv4
                      : PatchEmbedKind::Single16;
  s.embed_channels = field<std::vector<std::int64_t>>(j, "embed_channels", "");
  const auto& stages = j.contains("stages") ? j.at("stages") : nlohmann::json();
  if (!stages.is_array()) config_fail("stages", "must be an array");
  const auto grids = stage_grids(s.image_size, stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const std::string w = "stages[" + std::to_string(i) + "].";
    StageSpec spec;
    spec.depth = field<int>(st, "depth", w);
    spec.channels = field<std::int64_t>(st, "channels", w);
    spec.heads = field<std::int64_t>(st, "heads", w);
    spec.key_dim = field<std::int64_t>(st, "key_dim", w);
    optional_field(st, "value_ratio", w, spec.value_ratio);
    spec.grid = grids[i];
    if (st.contains("grid")) {
      const auto g = field<std::vector<std::int64_t>>(st, "grid", w);
      if (g.size() != 2) config_fail(w + "grid", "expected [height, width]");
      spec.grid = {g[0], g[1]};
    }
    s.stages.push_back(spec);
  }
  if (j.contains("subsamples")) {
    const auto& subs = j.at("subsamples");
    if (!subs.is_array()) config_fail("subsamples", "must be an array");
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const std::string w = "subsamples[" + std::to_string(i) + "].";
      SubsampleSpec sub;
      sub.heads = field<std::int64_t>(subs[i], "heads", w);
      sub.key_dim = field<std::int64_t>(subs[i], "key_dim", w);
      optional_field(subs[i], "value_ratio", w, sub.value_ratio);
      sub.source_channels = field<std::int64_t>(subs[i], "source_channels", w);
      sub.target_channels = field<std::int64_t>(subs[i], "target_channels", w);
      s.subsamples.push_back(sub);
    }
  }
  apply_common(j, s);
  s.validate();
  return s;
}

ModelSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open spec file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec_from_json(j);
}

void save_spec(const ModelSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write spec file " + path);
  out << spec_to_json(spec).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

Model Model::build(const ModelSpec& spec, std::uint64_t seed, DType dtype) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  m.dtype_ = dtype;
  m.drop_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  Initializer init{std::mt19937_64(seed), dtype};

  m.embed_ = std::make_unique<PatchEmbed>(spec.embed_channels,
                                          spec.patch_embed == PatchEmbedKind::Single16, init);
  if (spec.position == PositionKind::AbsoluteEmbedding) {
    m.position_ = std::make_unique<PositionalEmbedding>(spec.stages.front().channels,
                                                        spec.stages.front().grid, init);
  }

  auto attention = [&](std::int64_t in, std::int64_t out, std::int64_t heads, std::int64_t key_dim,
                       std::int64_t value_ratio, Grid grid, int stride) {
    AttentionConfig c;
    c.in_channels = in;
    c.out_channels = out;
    c.heads = heads;
    c.key_dim = key_dim;
    c.value_dim = value_ratio * key_dim;
    c.grid = grid;
    c.stride = stride;
    c.attention_bias = spec.position == PositionKind::AttentionBias;
    c.activation = spec.attention_activation;
    c.norm = spec.norm;
    c.drop_path = stride == 1 ? spec.drop_path : 0.0;
    return std::make_unique<Attention>(c, init);
  };
  auto mlp = [&](std::int64_t channels) {
    return std::make_unique<Mlp>(
        MlpConfig{channels, spec.mlp_ratio * channels, spec.norm, spec.drop_path}, init);
  };

  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    const int stage = static_cast<int>(s);
    for (int i = 0; i < st.depth; ++i) {
      const std::string prefix = "stages." + std::to_string(s) + "." + std::to_string(i);
      m.blocks_.push_back({prefix + ".attn",
                           attention(st.channels, st.channels, st.heads, st.key_dim,
                                     st.value_ratio, st.grid, 1),
                           stage});
      m.blocks_.push_back({prefix + ".mlp", mlp(st.channels), stage});
    }
    if (s + 1 < spec.stages.size()) {
      const auto& sub = spec.subsamples[s];
      const std::string prefix = "subsample." + std::to_string(s);
      m.blocks_.push_back({prefix + ".attn",
                           attention(sub.source_channels, sub.target_channels, sub.heads,
                                     sub.key_dim, sub.value_ratio, st.grid, 2),
                           stage + 1});
      m.blocks_.push_back({prefix + ".mlp", mlp(sub.target_channels), stage + 1});
    }
  }
  m.head_ = std::make_unique<Head>(spec.stages.back().channels, spec.num_classes,
                                   spec.distillation ? 2 : 1, init);
  return m;
}

void Model::set_mode(Mode mode) {
  if (fused_ && mode == Mode::Train) {
    throw std::logic_error("fused model is inference-only; train mode is unavailable");
  }
  mode_ = mode;
}

Tensor Model::embed(const Tensor& images, Profiler* profiler) {
  ForwardContext ctx{mode_, &drop_rng_, profiler};
  Tensor x = embed_->forward(images, ctx);
  if (position_) x = position_->forward(x, ctx);
  return x;
}

ModelOutput Model::forward(const Tensor& images, Profiler* profiler) {
  ForwardContext ctx{mode_, &drop_rng_, profiler};
  Tensor x = embed(images, profiler);
  for (auto& e : blocks_) x = e.module->forward(x, ctx);
  ModelOutput out;
  out.head_logits = head_->forward(x, mode_);
  out.logits = Head::average(out.head_logits);
  return out;
}

std::vector<Tensor> Model::forward_stages(const Tensor& images) {
  ForwardContext ctx{mode_, &drop_rng_, nullptr};
  Tensor x = embed(images);
  std::vector<Tensor> outputs;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i].module->forward(x, ctx);
    if (i + 1 == blocks_.size() || blocks_[i + 1].stage != blocks_[i].stage) outputs.push_back(x);
  }
  return outputs;
}

StateList Model::state() const {
  StateList out;
  embed_->collect("patch_embed", out);
  if (position_) position_->collect("pos_embed", out);
  for (const auto& e : blocks_) e.module->collect(e.name, out);
  head_->collect("head", out);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> params;
  for (auto& e : state()) {
    if (e.trainable) params.push_back(e.tensor);
  }
  return params;
}

void Model::load_state(const StateList& other) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& e : other) by_name[e.name] = &e.tensor;
  StateList mine = state();
  if (mine.size() != other.size()) {
    throw ConfigError("state has " + std::to_string(other.size()) + " entries, model expects " +
                      std::to_string(mine.size()));
  }
  for (auto& e : mine) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ConfigError("state is missing entry " + e.name);
    if (it->second->shape() != e.tensor.shape()) {
      throw ShapeError("state entry " + e.name + " has shape " + shape_str(it->second->shape()) +
                       ", model expects " + shape_str(e.tensor.shape()));
    }
    e.tensor.copy_from(*it->second);
  }
}

Model Model::clone() const {
  Model copy = build(spec_, 0, dtype_);
  if (fused_) copy.fuse_in_place();
  copy.load_state(state());
  copy.mode_ = mode_;
  copy.drop_rng_ = drop_rng_;
  return copy;
}

void Model::set_drop_path(double p) {
  if (!(p >= 0.0 && p < 1.0)) config_fail("drop_path", "must lie in [0, 1)");
  spec_.drop_path = p;
  for (auto& e : blocks_) e.module->set_drop_path(p);
}

void Model::fuse_in_place() {
  embed_->fuse();
  for (auto& e : blocks_) e.module->fuse();
  head_->fuse();
  fused_ = true;
  mode_ = Mode::Eval;
}

Module& Model::block(const std::string& name) {
  for (auto& e : blocks_) {
    if (e.name == name) return *e.module;
  }
  throw std::out_of_range("no block named " + name);
}

CostLog Model::account(std::int64_t batch) const {
  CostLog log;
  Shape s{batch, 3, spec_.image_size, spec_.image_size};
  s = embed_->account("patch_embed", s, log);
  if (position_) s = position_->account("pos_embed", s, log);
  for (const auto& e : blocks_) s = e.module->account(e.name, s, log);
  head_->account("head", s, log);
  return log;
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

namespace {

// Closed-form layer records mirroring the layer walk, built from the spec alone.
class SpecCounter {
 public:
  SpecCounter(const ModelSpec& spec, std::int64_t batch) : spec_(spec), batch_(batch) {}

  CostLog run() {
    Shape s{batch_, 3, spec_.image_size, spec_.image_size};
    const auto& ch = spec_.embed_channels;
    if (spec_.patch_embed == PatchEmbedKind::Conv4) {
      for (std::size_t i = 0; i + 1 < ch.size(); ++i) {
        s = conv("patch_embed." + std::to_string(i), s, ch[i + 1], 3, 2, 1, true);
      }
    } else {
      s = conv("patch_embed.0", s, ch[1], 16, 16, 0, true);
    }
    if (spec_.position == PositionKind::AbsoluteEmbedding) {
      log_.push_back({"pos_embed", 0, s[1] * s[2] * s[3], s});
    }
    for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
      const auto& st = spec_.stages[i];
      for (int d = 0; d < st.depth; ++d) {
        const std::string p = "stages." + std::to_string(i) + "." + std::to_string(d);
        s = attention(p + ".attn", s, st.channels, st.heads, st.key_dim,
                      st.value_ratio * st.key_dim, 1);
        s = mlp(p + ".mlp", s);
      }
      if (i + 1 < spec_.stages.size()) {
        const auto& sub = spec_.subsamples[i];
        const std::string p = "subsample." + std::to_string(i);
        s = attention(p + ".attn", s, sub.target_channels, sub.heads, sub.key_dim,
                      sub.value_ratio * sub.key_dim, 2);
        s = mlp(p + ".mlp", s);
      }
    }
    head(s);
    return std::move(log_);
  }

 private:
  bool bn() const { return spec_.norm == NormKind::BatchNorm; }

  Shape conv(const std::string& name, const Shape& in, std::int64_t out_channels, int kernel,
             int stride, int padding, bool with_bn) {
    const std::int64_t ho = (in[2] + 2 * padding - kernel) / stride + 1;
    const std::int64_t wo = (in[3] + 2 * padding - kernel) / stride + 1;
    const std::int64_t weights = out_channels * in[1] * kernel * kernel;
    const Shape out{in[0], out_channels, ho, wo};
    log_.push_back({name + ".conv", in[0] * ho * wo * weights,
                    weights + (with_bn ? 0 : out_channels), out});
    if (with_bn) log_.push_back({name + ".bn", 0, 2 * out_channels, out});
    return out;
  }

  Shape attention(const std::string& name, const Shape& in, std::int64_t out_channels,
                  std::int64_t heads, std::int64_t key_dim, std::int64_t value_dim, int stride) {
    if (!bn()) log_.push_back({name + ".norm", 0, 2 * in[1], in});
    const Shape q_in{in[0], in[1], (in[2] + stride - 1) / stride, (in[3] + stride - 1) / stride};
    conv(name + ".q", q_in, heads * key_dim, 1, 1, 0, bn());
    conv(name + ".k", in, heads * key_dim, 1, 1, 0, bn());
    conv(name + ".v", in, heads * value_dim, 1, 1, 0, bn());
    const std::int64_t tq = q_in[2] * q_in[3], tk = in[2] * in[3];
    log_.push_back({name + ".qk", in[0] * heads * tq * tk * key_dim, 0, {in[0], heads, tq, tk}});
    if (spec_.position == PositionKind::AttentionBias) {
      log_.push_back({name + ".attention_bias", 0, heads * tk, {in[0], heads, tq, tk}});
    }
    log_.push_back(
        {name + ".av", in[0] * heads * tq * tk * value_dim, 0, {in[0], heads, tq, value_dim}});
    return conv(name + ".proj", {in[0], heads * value_dim, q_in[2], q_in[3]}, out_channels, 1, 1,
                0, bn());
  }

  Shape mlp(const std::string& name, const Shape& in) {
    if (!bn()) log_.push_back({name + ".norm", 0, 2 * in[1], in});
    const Shape hidden = conv(name + ".fc1", in, spec_.mlp_ratio * in[1], 1, 1, 0, bn());
    return conv(name + ".fc2", hidden, in[1], 1, 1, 0, bn());
  }

  void head(const Shape& in) {
    const Shape pooled{in[0], in[1]};
    const Shape out{in[0], spec_.num_classes};
    log_.push_back({"head.pool", 0, 0, pooled});
    for (const char* h : {"head.head", "head.head_dist"}) {
      if (std::string(h) == "head.head_dist" && !spec_.distillation) break;
      log_.push_back({std::string(h) + ".bn", 0, 2 * in[1], pooled});
      log_.push_back({std::string(h) + ".linear", in[0] * in[1] * spec_.num_classes,
                      in[1] * spec_.num_classes + spec_.num_classes, out});
    }
  }

  const ModelSpec& spec_;
  std::int64_t batch_;
  CostLog log_;
};

CostReport summarize(const CostLog& log, Granularity granularity) {
  CostReport r;
  std::int64_t dist_params = 0;
  for (const auto& rec : log) {
    r.macs += rec.macs;
    r.params += rec.params;
    if (rec.name.starts_with("head.head_dist.")) dist_params += rec.params;
  }
  r.params_single_head = r.params - dist_params;
  if (granularity == Granularity::Layer) {
    r.rows = log;
    return r;
  }
  for (const auto& rec : log) {
    const std::string block = block_of(rec.name);
    if (r.rows.empty() || r.rows.back().name != block) r.rows.push_back({block, 0, 0, {}});
    auto& row = r.rows.back();
    row.macs += rec.macs;
    row.params += rec.params;
    row.out_shape = rec.out_shape;
  }
  return r;
}

}  // namespace

CostReport count(const ModelSpec& spec, Granularity granularity, std::int64_t batch) {
  spec.validate();
  return summarize(SpecCounter(spec, batch).run(), granularity);
}

CostReport count(const Model& model, Granularity granularity, std::int64_t batch) {
  return summarize(model.account(batch), granularity);
}

std::string block_of(const std::string& layer_name) {
  std::vector<std::string> parts;
  std::stringstream ss(layer_name);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  std::size_t keep = 1;
  if (!parts.empty() && parts[0] == "stages") keep = 4;
  if (!parts.empty() && parts[0] == "subsample") keep = 3;
  keep = std::min(keep, parts.size());
  std::string out;
  for (std::size_t i = 0; i < keep; ++i) out += (i ? "." : "") + parts[i];
  return out;
}

std::string shape_csv(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
  return out;
}

void write_cost_csv(std::ostream& out, const CostReport& report) {
  out << "layer,name,macs,params,out_shape\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out << i << "," << r.name << "," << r.macs << "," << r.params << "," << shape_csv(r.out_shape)
        << "\n";
  }
}

}  // namespace levit
