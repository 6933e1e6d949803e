#include "levit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

#include "tensor_impl.hpp"

namespace levit {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

SyntheticDataset::SyntheticDataset(const DatasetConfig& config) : config_(config) {
  if (config.num_classes < 2) throw ConfigError("dataset.num_classes: must be at least 2");
  if (config.samples < config.num_classes) {
    throw ConfigError("dataset.samples: need at least one sample per class");
  }
  if (config.image_size < 16 || config.image_size % 16 != 0) {
    throw ConfigError("dataset.image_size: must be a positive multiple of 16");
  }
  if (!(config.noise >= 0 && config.noise < config.contrast)) {
    throw ConfigError("dataset.noise: must be non-negative and below dataset.contrast");
  }
  if (!(config.contrast > 0 && config.contrast <= 1)) {
    throw ConfigError("dataset.contrast: must lie in (0, 1]");
  }
  if (!(config.period > 0)) throw ConfigError("dataset.period: must be positive");

  std::mt19937_64 rng(config.seed);
  labels_.resize(static_cast<std::size_t>(config.samples));
  for (int i = 0; i < config.samples; ++i) labels_[i] = i % config.num_classes;
  std::shuffle(labels_.begin(), labels_.end(), rng);

  const int s = config.image_size;
  const std::size_t per_image = 3 * static_cast<std::size_t>(s) * s;
  pixels_.resize(per_image * labels_.size());
  std::uniform_real_distribution<double> phase_dist(0.0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> noise_dist(-config.noise, config.noise);
  const double k = 2 * std::numbers::pi / config.period;
  for (std::size_t n = 0; n < labels_.size(); ++n) {
    const double angle = labels_[n] * std::numbers::pi / config.num_classes;
    const double cx = std::cos(angle), cy = std::sin(angle);
    const double phase = phase_dist(rng);
    float* img = pixels_.data() + n * per_image;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double bar = 0.5 + 0.5 * config.contrast * std::sin(k * (x * cx + y * cy) + phase);
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(bar + noise_dist(rng), 0.0, 1.0);
          img[(static_cast<std::size_t>(c) * s + y) * s + x] = static_cast<float>(v);
        }
      }
  }
}

std::span<const float> SyntheticDataset::image(int i) const {
  const std::size_t per_image = 3 * static_cast<std::size_t>(config_.image_size) * config_.image_size;
  return {pixels_.data() + static_cast<std::size_t>(i) * per_image, per_image};
}

Tensor SyntheticDataset::images(std::span<const int> indices, DType dtype) const {
  const std::int64_t s = config_.image_size;
  std::vector<double> values;
  values.reserve(indices.size() * 3 * s * s);
  for (int i : indices) {
    const auto img = image(i);
    values.insert(values.end(), img.begin(), img.end());
  }
  return Tensor::from_values({static_cast<std::int64_t>(indices.size()), 3, s, s}, values, dtype);
}

std::vector<int> SyntheticDataset::labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(label(i));
  return out;
}

// ---------------------------------------------------------------------------
// Loss / optimizer
// ---------------------------------------------------------------------------

Tensor dual_head_loss(const std::vector<Tensor>& head_logits, std::span<const int> labels) {
  if (head_logits.empty()) throw std::invalid_argument("dual_head_loss: no logits");
  for (const auto& l : head_logits) {
    if (l.shape() != head_logits.front().shape()) {
      throw ShapeError("dual_head_loss: heads disagree on shape " + shape_str(l.shape()) +
                       " vs " + shape_str(head_logits.front().shape()));
    }
  }
  Tensor total = cross_entropy(head_logits.front(), labels);
  for (std::size_t i = 1; i < head_logits.size(); ++i) {
    total = add(total, cross_entropy(head_logits[i], labels));
  }
  return scale(total, 1.0 / static_cast<double>(head_logits.size()));
}

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const Tensor g = p.grad();
    auto& v = velocity_[i];
    const double wd = p.ndim() > 1 ? weight_decay_ : 0.0;
    dispatch(p.dtype(), [&]<typename T>() {
      auto w = p.data<T>();
      const auto grad = g.data<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + static_cast<double>(grad[j]) + wd * static_cast<double>(w[j]);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - lr_ * v[j]);
      }
    });
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0)) throw ConfigError("train.learning_rate: must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum: must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay: must be non-negative");
  if (batch_size < 2) throw ConfigError("train.batch_size: must be at least 2 (batch statistics)");
  if (steps < 1) throw ConfigError("train.steps: must be at least 1");
  if (drop_path && !(*drop_path >= 0 && *drop_path < 1)) {
    throw ConfigError("train.drop_path: must lie in [0, 1)");
  }
}

namespace {

double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const auto pred = argmax_rows(logits);
  int hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

Evaluation evaluate(Model& model, const SyntheticDataset& data, int batch_size) {
  const Mode previous = model.mode();
  model.eval();
  NoGradGuard no_grad;
  Evaluation e;
  for (int start = 0; start < data.size(); start += batch_size) {
    std::vector<int> idx(static_cast<std::size_t>(std::min(batch_size, data.size() - start)));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data.labels(idx);
    const auto out = model.forward(data.images(idx, model.dtype()));
    const double n = static_cast<double>(idx.size());
    e.loss += dual_head_loss(out.head_logits, labels).item() * n;
    e.accuracy += batch_accuracy(out.logits, labels) * n;
  }
  e.loss /= data.size();
  e.accuracy /= data.size();
  model.set_mode(previous);
  return e;
}

TrainResult train(Model& model, const SyntheticDataset& data, const TrainConfig& config) {
  config.validate();
  if (model.spec().num_classes != data.config().num_classes) {
    throw ConfigError("model has " + std::to_string(model.spec().num_classes) +
                      " classes but the dataset has " +
                      std::to_string(data.config().num_classes));
  }
  if (model.spec().image_size != data.config().image_size) {
    throw ConfigError("model expects " + std::to_string(model.spec().image_size) +
                      " px images but the dataset has " +
                      std::to_string(data.config().image_size));
  }
  if (model.fused()) throw ConfigError("cannot train a fused model");
  if (config.drop_path) model.set_drop_path(*config.drop_path);
  model.seed_drop_path(config.seed ^ 0x5bd1e995ULL);

  TrainResult result;
  result.initial_loss = evaluate(model, data).loss;

  Sgd opt(model.parameters(), config.learning_rate, config.momentum, config.weight_decay);
  std::mt19937_64 rng(config.seed);
  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  model.train();
  for (int step = 0; step < config.steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < config.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const auto labels = data.labels(idx);
    opt.zero_grad();
    const auto out = model.forward(data.images(idx, model.dtype()));
    Tensor loss = dual_head_loss(out.head_logits, labels);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      result.diverged = true;
      result.message = "loss became non-finite at step " + std::to_string(step);
      break;
    }
    result.curve.push_back({step, value, batch_accuracy(out.logits, labels)});
    loss.backward();
    opt.step();
  }
  model.eval();
  if (!result.diverged) {
    const auto final_eval = evaluate(model, data);
    result.final_loss = final_eval.loss;
    result.final_accuracy = final_eval.accuracy;
    if (!std::isfinite(final_eval.loss)) {
      result.diverged = true;
      result.message = "evaluation loss is non-finite after training";
    }
  }
  return result;
}

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "step,loss,accuracy\n";
  out.precision(10);
  for (const auto& p : curve) out << p.step << "," << p.loss << "," << p.accuracy << "\n";
}

// ---------------------------------------------------------------------------
// Setup files
// ---------------------------------------------------------------------------

ModelSpec toy_spec(int num_classes) {
  return spec_from_json({{"name", "toy"},
                         {"image_size", 32},
                         {"embed_channels", {3, 8, 16, 32, 64}},
                         {"stages",
                          {{{"depth", 2}, {"channels", 64}, {"heads", 2}, {"key_dim", 16}},
                           {{"depth", 2}, {"channels", 96}, {"heads", 3}, {"key_dim", 16}},
                           {{"depth", 2}, {"channels", 128}, {"heads", 4}, {"key_dim", 16}}}},
                         {"subsamples",
                          {{{"heads", 4}, {"key_dim", 16}, {"source_channels", 64},
                            {"target_channels", 96}},
                           {{"heads", 6}, {"key_dim", 16}, {"source_channels", 96},
                            {"target_channels", 128}}}},
                         {"num_classes", num_classes}});
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, const std::string& section, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": wrong type (" + e.what() + ")");
  }
}

}  // namespace

TrainingSetup training_setup_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainingSetup s;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    read(d, "num_classes", "dataset", s.dataset.num_classes);
    read(d, "samples", "dataset", s.dataset.samples);
    read(d, "image_size", "dataset", s.dataset.image_size);
    read(d, "contrast", "dataset", s.dataset.contrast);
    read(d, "noise", "dataset", s.dataset.noise);
    read(d, "period", "dataset", s.dataset.period);
    read(d, "seed", "dataset", s.dataset.seed);
  }
  if (!j.contains("model") || j.at("model") == "toy") {
    s.spec = toy_spec(s.dataset.num_classes);
  } else if (j.at("model").is_string()) {
    s.spec = spec_from_json({{"preset", j.at("model").get<std::string>()},
                             {"image_size", s.dataset.image_size},
                             {"num_classes", s.dataset.num_classes}});
  } else {
    s.spec = spec_from_json(j.at("model"));
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    read(t, "learning_rate", "train", s.train.learning_rate);
    read(t, "momentum", "train", s.train.momentum);
    read(t, "weight_decay", "train", s.train.weight_decay);
    read(t, "batch_size", "train", s.train.batch_size);
    read(t, "steps", "train", s.train.steps);
    read(t, "seed", "train", s.train.seed);
    if (t.contains("drop_path")) {
      double p = 0;
      read(t, "drop_path", "train", p);
      s.train.drop_path = p;
    }
  }
  read(j, "model_seed", "", s.model_seed);
  s.train.validate();
  return s;
}

TrainingSetup load_training_setup(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open training config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return training_setup_from_json(j);
}

}  // namespace levit
