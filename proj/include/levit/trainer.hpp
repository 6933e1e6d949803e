#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "levit/model.hpp"

namespace levit {

struct DatasetConfig {
  int num_classes = 4;
  int samples = 256;
  int image_size = 32;
  double contrast = 0.6;  // peak-to-peak amplitude of the bar pattern
  double noise = 0.15;    // uniform noise half-width; must stay below contrast
  double period = 8.0;    // bar period in pixels
  std::uint64_t seed = 0;
};

/// Oriented sinusoidal bars, one orientation per class (angle k * pi / K),
/// random phase per sample, plus uniform noise. Pixels lie in [0, 1].
class SyntheticDataset {
 public:
  explicit SyntheticDataset(const DatasetConfig& config);

  const DatasetConfig& config() const { return config_; }
  int size() const { return static_cast<int>(labels_.size()); }
  int label(int i) const { return labels_[static_cast<std::size_t>(i)]; }
  std::span<const float> image(int i) const;

  // (B, 3, S, S) batch of the given samples.
  Tensor images(std::span<const int> indices, DType dtype = default_dtype()) const;
  std::vector<int> labels(std::span<const int> indices) const;

 private:
  DatasetConfig config_;
  std::vector<float> pixels_;
  std::vector<int> labels_;
};

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // applied to conv / linear weights only
  int batch_size = 32;
  int steps = 500;
  std::uint64_t seed = 0;
  std::optional<double> drop_path;  // overrides the spec's p when set

  void validate() const;
};

struct CurvePoint {
  int step = 0;
  double loss = 0;
  double accuracy = 0;  // on the step's batch, from the averaged logits
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  bool diverged = false;
  std::string message;
  // Whole-dataset evaluation in eval mode, before and after training.
  double initial_loss = 0;
  double final_loss = 0;
  double final_accuracy = 0;
};

/// Mean over heads of each head's cross-entropy.
Tensor dual_head_loss(const std::vector<Tensor>& head_logits, std::span<const int> labels);

// SGD with heavy-ball momentum: v <- mu v + (g + wd w); w <- w - lr v.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr, double momentum, double weight_decay);
  void step();
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_, weight_decay_;
};

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};
Evaluation evaluate(Model& model, const SyntheticDataset& data, int batch_size = 64);

TrainResult train(Model& model, const SyntheticDataset& data, const TrainConfig& config);

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve);

// Configuration file for the train command:
// {"model": <preset name or spec object>, "train": {...}, "dataset": {...}, "model_seed": n}
struct TrainingSetup {
  ModelSpec spec;
  TrainConfig train;
  DatasetConfig dataset;
  std::uint64_t model_seed = 0;
};
TrainingSetup training_setup_from_json(const nlohmann::json& j);
TrainingSetup load_training_setup(const std::string& path);

// The small pyramid used for learnability runs on 32x32 inputs.
ModelSpec toy_spec(int num_classes = 4);

}  // namespace levit
