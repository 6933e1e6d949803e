#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "levit/blocks.hpp"
#include "levit/cost.hpp"
#include "levit/profiler.hpp"

namespace levit {

// ---------------------------------------------------------------------------
// Declarative description
// ---------------------------------------------------------------------------

struct StageSpec {
  int depth = 0;  // attention + MLP pairs
  std::int64_t channels = 0;
  std::int64_t heads = 0;
  std::int64_t key_dim = 0;
  std::int64_t value_ratio = 2;  // per-head value width, in units of key_dim
  Grid grid;
  bool operator==(const StageSpec&) const = default;
};

// Shrinking attention between two stages, followed by an MLP at the new resolution.
struct SubsampleSpec {
  std::int64_t heads = 0;
  std::int64_t key_dim = 0;
  std::int64_t value_ratio = 4;
  std::int64_t source_channels = 0;
  std::int64_t target_channels = 0;
  bool operator==(const SubsampleSpec&) const = default;
};

enum class PatchEmbedKind { Conv4, Single16 };
enum class PositionKind { AttentionBias, AbsoluteEmbedding };

struct ModelSpec {
  std::string name;
  std::int64_t image_size = 224;
  std::vector<std::int64_t> embed_channels;  // (3, ..., stage-1 C)
  PatchEmbedKind patch_embed = PatchEmbedKind::Conv4;
  std::vector<StageSpec> stages;
  std::vector<SubsampleSpec> subsamples;  // one between each pair of stages
  double drop_path = 0.0;
  std::int64_t num_classes = 1000;
  std::int64_t mlp_ratio = 2;
  NormKind norm = NormKind::BatchNorm;
  bool distillation = true;  // second classifier head
  PositionKind position = PositionKind::AttentionBias;
  bool attention_activation = true;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

// Stage grids for an input of `image_size` pixels: size/16, then ceil halving.
std::vector<Grid> stage_grids(std::int64_t image_size, std::size_t stages);

// Same architecture at another input resolution (grids recomputed).
ModelSpec with_image_size(ModelSpec spec, std::int64_t image_size);

const std::vector<std::string>& preset_names();
// Throws ConfigError listing the known names.
ModelSpec preset(const std::string& name);

// One-change variants of LeViT-128S: "A2" single-conv patch embedding,
// "A3" LayerNorm instead of BN, "A4" no distillation head, "A5" absolute
// position embedding instead of attention bias, "A7" no attention activation.
const std::vector<std::string>& ablation_names();
ModelSpec ablation(const std::string& code);

// JSON form of a spec. Reading also accepts {"preset": name, ...overrides}.
nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);
ModelSpec load_spec(const std::string& path);
void save_spec(const ModelSpec& spec, const std::string& path);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelOutput {
  Tensor logits;                   // mean over heads
  std::vector<Tensor> head_logits; // one per head
};

class Model {
 public:
  static Model build(const ModelSpec& spec, std::uint64_t seed, DType dtype = default_dtype());

  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  const ModelSpec& spec() const { return spec_; }
  DType dtype() const { return dtype_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode);
  void train() { set_mode(Mode::Train); }
  void eval() { set_mode(Mode::Eval); }
  bool fused() const { return fused_; }

  ModelOutput forward(const Tensor& images, Profiler* profiler = nullptr);
  // Patch embedding (plus absolute position map when configured).
  Tensor embed(const Tensor& images, Profiler* profiler = nullptr);
  // Output of every stage, in order.
  std::vector<Tensor> forward_stages(const Tensor& images);

  StateList state() const;
  std::vector<Tensor> parameters() const;
  // Copies values from `other` by name; shapes and names must match exactly.
  void load_state(const StateList& other);
  Model clone() const;

  // Folds every BN into its neighbouring conv or linear map. Eval-only afterwards.
  void fuse_in_place();

  void seed_drop_path(std::uint64_t seed) { drop_rng_.seed(seed); }
  // Replaces the drop-path probability of every residual branch.
  void set_drop_path(double p);

  struct Entry {
    std::string name;
    std::unique_ptr<Module> module;
    int stage = 0;  // stage whose output includes this block
  };
  const std::vector<Entry>& blocks() const { return blocks_; }
  Module& block(const std::string& name);
  PatchEmbed& patch_embed() { return *embed_; }
  Head& head() { return *head_; }

  // Per-layer cost records for a batch of `batch` images.
  CostLog account(std::int64_t batch = 1) const;

 private:
  Model() = default;

  ModelSpec spec_;
  DType dtype_ = DType::F32;
  Mode mode_ = Mode::Eval;
  bool fused_ = false;
  std::unique_ptr<PatchEmbed> embed_;
  std::unique_ptr<PositionalEmbedding> position_;
  std::vector<Entry> blocks_;
  std::unique_ptr<Head> head_;
  std::mt19937_64 drop_rng_;
};

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

enum class Granularity { Layer, Block };

struct CostReport {
  std::vector<CostRecord> rows;
  std::int64_t macs = 0;
  std::int64_t params = 0;              // both heads
  std::int64_t params_single_head = 0;  // classification head only
};

// Counts from the spec alone, without allocating weights.
CostReport count(const ModelSpec& spec, Granularity granularity = Granularity::Layer,
                 std::int64_t batch = 1);
// Counts by walking a built model's layers.
CostReport count(const Model& model, Granularity granularity = Granularity::Layer,
                 std::int64_t batch = 1);

// Block a layer record belongs to, e.g. "stages.1.2.attn.q.conv" -> "stages.1.2.attn".
std::string block_of(const std::string& layer_name);

// CSV with header layer,name,macs,params,out_shape.
void write_cost_csv(std::ostream& out, const CostReport& report);
std::string shape_csv(const Shape& shape);  // "1x256x14x14"

}  // namespace levit
